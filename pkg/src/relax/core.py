"""Shared value types and deterministic RNG plumbing.

Every random draw in the package flows through :func:`seeded_rng` so that a
run is a pure function of the user-supplied seed.  Worker streams are derived
from ``(seed, stream_id, *path)`` rather than shared, which keeps results
identical no matter how work is split.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

# Stream ids, one per independent consumer of randomness.  Two consumers must
# never share a stream id or their draws would be correlated.
STREAM_MASKS = 0
STREAM_FILL_NOISE = 1
STREAM_SMOOTHGRAD = 2
STREAM_SCENES = 3
STREAM_EVAL = 4
STREAM_CHANCE = 5
STREAM_BOUND = 6


@dataclass(frozen=True)
class RngSpec:
    """Seed plus stream id; the complete description of a random stream."""

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.stream_id, int) or self.stream_id < 0:
            raise ValueError(f"stream_id must be a non-negative integer, got {self.stream_id!r}")

    def stream(self, stream_id: int) -> "RngSpec":
        return RngSpec(self.seed, stream_id)


def seeded_rng(spec: RngSpec, *path: int) -> np.random.Generator:
    """Deterministic generator for ``(spec.seed, spec.stream_id, *path)``.

    Uses Philox keyed through ``numpy.random.SeedSequence``; both are fixed
    algorithms, so identical arguments yield bitwise-identical draw sequences
    on every platform and in every release of this package.  ``path`` lets a
    consumer split one stream into per-index substreams (one per mask, one
    per worker) that are independent and order-free.
    """
    for element in path:
        if element < 0:
            raise ValueError(f"stream path elements must be non-negative, got {path!r}")
    ss = np.random.SeedSequence(entropy=spec.seed, spawn_key=(spec.stream_id, *path))
    return np.random.Generator(np.random.Philox(ss))


def worker_count() -> int:
    """Worker cap from the RELAX_THREADS environment variable (0/unset = auto)."""
    raw = os.environ.get("RELAX_THREADS", "").strip()
    if raw in ("", "0"):
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise RuntimeError(f"RELAX_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise RuntimeError(f"RELAX_THREADS must be non-negative, got {value}")
    return value


def stable_digest(text: str) -> str:
    """Short stable identifier for a canonical settings string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Image:
    """Image with intensities in the unit interval.

    ``data`` is ``(height, width, channels)`` float32, channels 1 or 3.
    float32 is the package-wide storage dtype, so a round trip through the
    tensor file format is bit-exact.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got shape {arr.shape}")
        arr = arr.astype(np.float32, copy=False)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"image intensities must lie in [0, 1], got range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        """Build an image from (H, W) or (H, W, C); uint8 is scaled by 1/255."""
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / np.float32(255.0)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        return cls(arr.astype(np.float32))


@dataclass(frozen=True)
class Explanation:
    """Importance and uncertainty heatmaps plus run provenance.

    ``uncertainty`` holds NaN wherever ``mask_weight`` <= 1: the sample
    variance has no defined value from fewer than two effective samples.
    ``mask_weight`` is the per-pixel sum of mask values across the run.
    """

    importance: np.ndarray
    uncertainty: np.ndarray
    mask_weight: np.ndarray
    n_masks: int
    config_digest: str
    seed: int
    n_zero_similarity: int = 0

    def __post_init__(self) -> None:
        imp = np.asarray(self.importance, dtype=np.float64)
        unc = np.asarray(self.uncertainty, dtype=np.float64)
        wgt = np.asarray(self.mask_weight, dtype=np.float64)
        if imp.ndim != 2:
            raise ValueError(f"importance must be (H, W), got shape {imp.shape}")
        if unc.shape != imp.shape or wgt.shape != imp.shape:
            raise ValueError(
                f"grid shapes disagree: importance {imp.shape}, "
                f"uncertainty {unc.shape}, mask_weight {wgt.shape}"
            )
        if self.n_masks < 2:
            raise ValueError(f"n_masks must be at least 2, got {self.n_masks}")
        object.__setattr__(self, "importance", imp)
        object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "mask_weight", wgt)

    @property
    def shape(self) -> tuple[int, int]:
        return self.importance.shape

    @property
    def uncertainty_defined(self) -> np.ndarray:
        """Boolean grid: True where the uncertainty estimate exists."""
        return self.mask_weight > 1.0
