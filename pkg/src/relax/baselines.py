"""Gradient-based attribution baselines: mean-embedding saliency and its
noise-averaged variant.

Both explain the scalar summary g(X) = mean_d f(X)_d of the embedding.  The
per-pixel derivative of g is estimated either analytically (exact, linear
extractors only, via basis-image probing) or by central finite differences
(any extractor, two embedding calls per pixel, desk scale only).  Since g is
a mean over embedding coordinates, differentiating g directly is identical
to averaging per-coordinate gradients and D times cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relax.core import STREAM_SMOOTHGRAD, Image, RngSpec, seeded_rng
from relax.extractors import Extractor

MODE_ANALYTIC = "analytic"
MODE_FD = "fd"

# Finite differences probe every pixel twice; above this pixel count the run
# would not be a desk-scale computation any more.
FD_PIXEL_LIMIT = 16384

_PROBE_CHUNK = 128


@dataclass(frozen=True)
class SmoothgradParams:
    """Sample count, per-pixel Gaussian noise level, and noise seed."""

    n_samples: int = 25
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be at least 1, got {self.n_samples}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class SaliencySpec:
    mode: str = MODE_FD
    fd_step: float = 1e-3
    smoothgrad: SmoothgradParams | None = None

    def __post_init__(self) -> None:
        if self.mode not in (MODE_ANALYTIC, MODE_FD):
            raise ValueError(f"mode must be '{MODE_ANALYTIC}' or '{MODE_FD}', got {self.mode!r}")
        if not self.fd_step > 0.0:
            raise ValueError(f"fd_step must be positive, got {self.fd_step}")


def linear_gradient_matrix(
    extractor: Extractor, height: int, width: int, channels: int
) -> np.ndarray:
    """(D, H*W*C) gradient of a linear extractor, recovered by basis probes.

    Column k is f(e_k) - f(0) for the single-pixel basis image e_k; exact
    for any extractor that is linear in its input.
    """
    if not extractor.is_linear:
        raise ValueError("analytic gradients require a linear extractor")
    size = height * width * channels
    origin = extractor(np.zeros((height, width, channels)))
    columns = np.empty((size, origin.shape[0]))
    for start in range(0, size, _PROBE_CHUNK):
        stop = min(start + _PROBE_CHUNK, size)
        probes = np.zeros((stop - start, size))
        probes[np.arange(stop - start), np.arange(start, stop)] = 1.0
        probes = probes.reshape(stop - start, height, width, channels)
        columns[start:stop] = extractor.batch(probes) - origin
    return columns.T


def _fd_gradient(
    image_data: np.ndarray, extractor: Extractor, fd_step: float, batch_size: int = 64
) -> np.ndarray:
    """Central-difference derivative of g at each pixel, channels averaged."""
    H, W, C = image_data.shape
    if H * W > FD_PIXEL_LIMIT:
        raise ValueError(
            f"finite differences on {H}x{W} = {H * W} pixels exceeds the "
            f"cost guard of {FD_PIXEL_LIMIT}"
        )
    flat_grid = np.arange(H * W)
    grad = np.empty(H * W)
    for start in range(0, H * W, batch_size):
        stop = min(start + batch_size, H * W)
        idx = flat_grid[start:stop]
        rows, cols = idx // W, idx % W
        plus = np.repeat(image_data[np.newaxis], stop - start, axis=0)
        minus = plus.copy()
        plus[np.arange(stop - start), rows, cols, :] += fd_step
        minus[np.arange(stop - start), rows, cols, :] -= fd_step
        g_plus = extractor.batch(plus).mean(axis=1)
        g_minus = extractor.batch(minus).mean(axis=1)
        grad[start:stop] = (g_plus - g_minus) / (2.0 * fd_step * C)
    return grad.reshape(H, W)


def _saliency_of_data(data: np.ndarray, extractor: Extractor, spec: SaliencySpec) -> np.ndarray:
    H, W, C = data.shape
    if spec.mode == MODE_ANALYTIC:
        matrix = linear_gradient_matrix(extractor, H, W, C)
        per_input = matrix.mean(axis=0).reshape(H, W, C)
        return per_input.mean(axis=2)
    return _fd_gradient(data, extractor, spec.fd_step)


def saliency(image: Image, extractor: Extractor, spec: SaliencySpec = SaliencySpec()) -> np.ndarray:
    """H x W grid of the per-pixel derivative of the mean embedding coordinate."""
    return _saliency_of_data(image.data.astype(np.float64), extractor, spec)


def smoothgrad(
    image: Image, extractor: Extractor, spec: SaliencySpec = SaliencySpec()
) -> np.ndarray:
    """Mean saliency over noisy copies of the image.

    Each copy adds iid Gaussian(0, sigma^2) pixel noise and clamps back to
    [0, 1]; draws come from the seed in ``spec.smoothgrad``.  With sigma=0
    every copy equals the input, so the result is exactly the plain
    saliency and is computed as such.
    """
    params = spec.smoothgrad or SmoothgradParams()
    data = image.data.astype(np.float64)
    if params.sigma == 0.0:
        return _saliency_of_data(data, extractor, spec)
    total = np.zeros(data.shape[:2])
    for sample in range(params.n_samples):
        rng = seeded_rng(RngSpec(params.seed, STREAM_SMOOTHGRAD), sample)
        noisy = np.clip(data + rng.normal(0.0, params.sigma, size=data.shape), 0.0, 1.0)
        total += _saliency_of_data(noisy, extractor, spec)
    return total / params.n_samples
