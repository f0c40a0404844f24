"""Stochastic occlusion masks and their application to images.

Mask values live in [0, 1]: 1 keeps a pixel, 0 occludes it.  Every mask in a
batch is a pure function of ``(MaskBatchSpec, index)``; workers can therefore
produce disjoint index ranges in parallel and the resulting set of masks is
identical to a sequential run.

Bilinear convention for the upsampled strategy: the coarse h×w Bernoulli
values sit at the interior cell corners of the (h+1)C_H × (w+1)C_W canvas,
i.e. value (r, c) at canvas node ((r+1)·C_H, (c+1)·C_W); border nodes
replicate the nearest coarse value; a canvas pixel (y, x) samples the
tensor-product hat interpolation of its cell's four corner nodes at integer
coordinates.  Any fixed convention satisfies the estimator; this one is
documented here and pinned by golden tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relax.core import Image, RngSpec, seeded_rng

RISE_BILINEAR = "RiseBilinear"
PER_PIXEL_BERNOULLI = "PerPixelBernoulli"
BLOCK_DROPOUT = "BlockDropout"
RISE_NOISE_FILL = "RiseBilinearNoiseFill"

_VARIANTS = (RISE_BILINEAR, PER_PIXEL_BERNOULLI, BLOCK_DROPOUT, RISE_NOISE_FILL)

# Substream roles under a mask index: the mask draw and its fill noise.
_ROLE_MASK = 0
_ROLE_NOISE = 1


@dataclass(frozen=True)
class MaskStrategy:
    """Which occlusion distribution to sample and its parameters.

    ``h``/``w`` are the coarse grid size of the bilinear variants, ``p`` the
    Bernoulli keep-probability, ``block`` the side length of dropped squares,
    ``fill_mean``/``fill_std`` the per-pixel noise statistics of the
    noise-fill variant.  ``noise_additive`` flips the noise-fill formula from
    the subtractive reading ``X*M - D*(1-M)`` to ``X*M + D*(1-M)``; the
    subtractive form is the default.
    """

    variant: str = RISE_BILINEAR
    h: int = 7
    w: int = 7
    p: float = 0.5
    block: int = 8
    fill_mean: np.ndarray | None = None
    fill_std: np.ndarray | None = None
    noise_additive: bool = False

    def __post_init__(self) -> None:
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown mask variant {self.variant!r}, expected one of {_VARIANTS}")
        # Block dropout admits the degenerate p=1 (no dropped blocks); the
        # Bernoulli-driven variants need both mask states to occur.
        if self.variant == BLOCK_DROPOUT:
            if not 0.0 < self.p <= 1.0:
                raise ValueError(f"keep-probability p must be in (0, 1], got {self.p}")
        elif not 0.0 < self.p < 1.0:
            raise ValueError(f"keep-probability p must be in (0, 1), got {self.p}")
        if self.variant in (RISE_BILINEAR, RISE_NOISE_FILL):
            if self.h < 1 or self.w < 1:
                raise ValueError(f"coarse grid must be at least 1x1, got {self.h}x{self.w}")
        if self.variant == BLOCK_DROPOUT and self.block < 1:
            raise ValueError(f"block side must be positive, got {self.block}")
        if self.variant == RISE_NOISE_FILL:
            if self.fill_mean is None or self.fill_std is None:
                raise ValueError("noise-fill strategy requires fill_mean and fill_std grids")
            mean = np.asarray(self.fill_mean, dtype=np.float64)
            std = np.asarray(self.fill_std, dtype=np.float64)
            if mean.ndim != 2 or std.shape != mean.shape:
                raise ValueError(
                    f"fill grids must be matching (H, W) arrays, got "
                    f"{mean.shape} and {std.shape}"
                )
            if std.min() < 0.0:
                raise ValueError("fill_std must be elementwise non-negative")
            object.__setattr__(self, "fill_mean", mean)
            object.__setattr__(self, "fill_std", std)

    def descriptor(self) -> str:
        """Canonical settings string used in config digests."""
        parts = [f"variant={self.variant}", f"p={self.p!r}"]
        if self.variant in (RISE_BILINEAR, RISE_NOISE_FILL):
            parts.append(f"h={self.h}")
            parts.append(f"w={self.w}")
        if self.variant == BLOCK_DROPOUT:
            parts.append(f"block={self.block}")
        if self.variant == RISE_NOISE_FILL:
            mean = self.fill_mean
            std = self.fill_std
            parts.append(f"fill_mean_sum={float(mean.sum())!r}")
            parts.append(f"fill_std_sum={float(std.sum())!r}")
            parts.append(f"noise_additive={self.noise_additive}")
        return ",".join(parts)


@dataclass(frozen=True)
class MaskBatchSpec:
    """A batch of ``n_masks`` masks drawn under ``strategy`` from ``rng``."""

    n_masks: int
    strategy: MaskStrategy
    rng: RngSpec

    def __post_init__(self) -> None:
        if self.n_masks < 1:
            raise ValueError(f"n_masks must be at least 1, got {self.n_masks}")


def canvas_shape(H: int, W: int, h: int, w: int) -> tuple[int, int]:
    """Pre-crop canvas dimensions (h+1)*floor(H/h) x (w+1)*floor(W/w)."""
    return (h + 1) * (H // h), (w + 1) * (W // w)


def _validate_rise_dims(H: int, W: int, h: int, w: int) -> tuple[int, int]:
    if not (1 <= h < H and 1 <= w < W):
        raise ValueError(f"coarse grid {h}x{w} must satisfy 1 <= h < H={H}, 1 <= w < W={W}")
    canvas_h, canvas_w = canvas_shape(H, W, h, w)
    if canvas_h < H or canvas_w < W:
        raise ValueError(
            f"canvas {canvas_h}x{canvas_w} smaller than image {H}x{W}; "
            f"coarse grid {h}x{w} is too fine for this image"
        )
    return canvas_h, canvas_w


def rise_canvas(coarse: np.ndarray, C_H: int, C_W: int) -> np.ndarray:
    """Upsample a coarse grid onto the (h+1)C_H x (w+1)C_W canvas."""
    coarse = np.asarray(coarse, dtype=np.float64)
    h, w = coarse.shape
    padded = np.pad(coarse, 1, mode="edge")  # corner nodes, borders replicated
    ys = np.arange((h + 1) * C_H)
    xs = np.arange((w + 1) * C_W)
    iy = ys // C_H
    jx = xs // C_W
    ty = (ys - iy * C_H) / C_H
    tx = (xs - jx * C_W) / C_W
    a = padded[np.ix_(iy, jx)]
    b = padded[np.ix_(iy, jx + 1)]
    c = padded[np.ix_(iy + 1, jx)]
    d = padded[np.ix_(iy + 1, jx + 1)]
    wy = ty[:, np.newaxis]
    wx = tx[np.newaxis, :]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def rise_mask(strategy: MaskStrategy, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """One bilinear-upsampled Bernoulli mask, randomly cropped to H x W.

    Draw order is fixed: the h x w coarse grid row-major, then the row
    offset, then the column offset.  Offsets are uniform over [0, C_H] and
    [0, C_W] inclusive; when the coarse grid does not divide the image the
    upper end is clamped so the crop window stays inside the canvas.
    """
    if strategy.variant not in (RISE_BILINEAR, RISE_NOISE_FILL):
        raise ValueError(f"rise_mask requires a bilinear variant, got {strategy.variant!r}")
    h, w = strategy.h, strategy.w
    canvas_h, canvas_w = _validate_rise_dims(H, W, h, w)
    C_H, C_W = H // h, W // w
    coarse = (rng.random((h, w)) < strategy.p).astype(np.float64)
    canvas = rise_canvas(coarse, C_H, C_W)
    dy = int(rng.integers(0, min(C_H, canvas_h - H), endpoint=True))
    dx = int(rng.integers(0, min(C_W, canvas_w - W), endpoint=True))
    return canvas[dy : dy + H, dx : dx + W]


def pixel_dropout_mask(
    strategy: MaskStrategy, rng: np.random.Generator, H: int, W: int
) -> np.ndarray:
    """Binary mask with elements iid Bernoulli(p)."""
    if strategy.variant != PER_PIXEL_BERNOULLI:
        raise ValueError(f"pixel_dropout_mask requires PerPixelBernoulli, got {strategy.variant!r}")
    return (rng.random((H, W)) < strategy.p).astype(np.float64)


def block_mask_from_seeds(seed_grid: np.ndarray, block: int) -> np.ndarray:
    """Ones grid with a clipped block x block square zeroed around each seed.

    The square around seed (y, x) covers rows [y - block//2, y - block//2 +
    block) intersected with the grid, and the same columns.
    """
    seed_grid = np.asarray(seed_grid, dtype=bool)
    H, W = seed_grid.shape
    mask = np.ones((H, W), dtype=np.float64)
    lo = block // 2
    for y, x in zip(*np.nonzero(seed_grid)):
        mask[max(0, y - lo) : y - lo + block, max(0, x - lo) : x - lo + block] = 0.0
    return mask


def block_dropout_mask(
    strategy: MaskStrategy, rng: np.random.Generator, H: int, W: int
) -> np.ndarray:
    """Mask that zeroes square regions around iid Bernoulli(1-p) seed pixels."""
    if strategy.variant != BLOCK_DROPOUT:
        raise ValueError(f"block_dropout_mask requires BlockDropout, got {strategy.variant!r}")
    if strategy.block > min(H, W):
        raise ValueError(f"block {strategy.block} exceeds min image side {min(H, W)}")
    seeds = rng.random((H, W)) < (1.0 - strategy.p)
    return block_mask_from_seeds(seeds, strategy.block)


def mask_at(spec: MaskBatchSpec, index: int, H: int, W: int) -> np.ndarray:
    """Mask ``index`` of the batch; pure in (spec, index)."""
    if not 0 <= index < spec.n_masks:
        raise ValueError(f"mask index {index} outside [0, {spec.n_masks})")
    rng = seeded_rng(spec.rng, index, _ROLE_MASK)
    variant = spec.strategy.variant
    if variant in (RISE_BILINEAR, RISE_NOISE_FILL):
        return rise_mask(spec.strategy, rng, H, W)
    if variant == PER_PIXEL_BERNOULLI:
        return pixel_dropout_mask(spec.strategy, rng, H, W)
    return block_dropout_mask(spec.strategy, rng, H, W)


def apply_mask(
    image: Image,
    mask: np.ndarray,
    strategy: MaskStrategy,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Masked image data (H, W, C) float64.

    Zero-fill variants return ``X * M``.  The noise-fill variant returns
    ``X * M - D * (1 - M)`` (or ``+`` with ``noise_additive``) where ``D`` is
    drawn elementwise from Normal(fill_mean, fill_std) on each call, and the
    result is clamped back to [0, 1].
    """
    data = image.data.astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != data.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image shape {data.shape[:2]}")
    masked = data * mask[:, :, np.newaxis]
    if strategy.variant != RISE_NOISE_FILL:
        return masked
    if rng is None:
        raise ValueError("noise-fill application requires an rng for the noise draw")
    if strategy.fill_mean.shape != mask.shape:
        raise ValueError(
            f"fill grid shape {strategy.fill_mean.shape} != image shape {mask.shape}"
        )
    noise = rng.normal(strategy.fill_mean, strategy.fill_std)[:, :, np.newaxis]
    if strategy.noise_additive:
        masked = masked + noise * (1.0 - mask[:, :, np.newaxis])
    else:
        masked = masked - noise * (1.0 - mask[:, :, np.newaxis])
    return np.clip(masked, 0.0, 1.0)


def masked_image_at(image: Image, spec: MaskBatchSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask, masked image data) for batch position ``index``; pure in (spec, index)."""
    mask = mask_at(spec, index, image.height, image.width)
    noise_rng = None
    if spec.strategy.variant == RISE_NOISE_FILL:
        noise_rng = seeded_rng(spec.rng, index, _ROLE_NOISE)
    return mask, apply_mask(image, mask, spec.strategy, rng=noise_rng)
