"""Deterministic synthetic scenes: textured objects with exact ground truth.

Scenes are flat-background images holding one to three textured objects
(rectangles or ellipses filled with checkerboard, stripe, or noise texture).
Textures give gradient-histogram extractors energy inside the object, not
just at its silhouette, so localisation metrics measure what they claim to.
The ground truth is the exact union of rendered object pixels, and every
emitted image satisfies a minimum object/background mean-intensity gap.

A corpus is a directory with netpbm images and masks, a manifest, and
per-pixel mean/std grids (inputs for noise-fill masking) computed from the
quantized bytes actually written to disk.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from relax.core import STREAM_SCENES, Image, RngSpec, seeded_rng, worker_count
from relax.evalmetrics import GroundTruth
from relax.formats import (
    atomic_write_bytes,
    read_netpbm,
    read_tensor,
    write_netpbm,
    write_tensor,
)

SHAPE_RECTANGLE = "rectangle"
SHAPE_ELLIPSE = "ellipse"
SHAPES = (SHAPE_RECTANGLE, SHAPE_ELLIPSE)

TEXTURE_CHECKER = "checker"
TEXTURE_STRIPES = "stripes"
TEXTURE_NOISE = "noise-patch"
TEXTURES = (TEXTURE_CHECKER, TEXTURE_STRIPES, TEXTURE_NOISE)

MANIFEST_NAME = "manifest.txt"
MIN_CONTRAST = 0.3
_TEXTURE_AMPLITUDE = 0.2
_CONTRAST_HEADROOM = 0.15
# Object extents are drawn uniformly from [frac_lo * side, frac_hi * side].
_EXTENT_FRAC_LO = 0.25
_EXTENT_FRAC_HI = 0.5
# Keep objects away from the frame border: occlusion masks built by bilinear
# upsampling have elevated per-pixel variance in the border bands, so
# importance estimates are noisiest exactly there.  A margin keeps the
# ground-truth region out of that noise floor.
_PLACEMENT_MARGIN = 6
_MIN_VISIBLE_FRACTION = 0.3
_PLACEMENT_TRIES = 64
_SCENE_TRIES = 32


class SceneGenerationError(RuntimeError):
    """Placement or contrast constraints could not be met within retry budget."""


@dataclass(frozen=True)
class SceneSpec:
    """Template for one scene (or, with an index, a whole corpus)."""

    height: int = 64
    width: int = 64
    channels: int = 1
    n_objects: int = 1
    shapes: tuple[str, ...] = SHAPES
    textures: tuple[str, ...] = TEXTURES
    contrast: float = 0.5
    rng: RngSpec = field(default_factory=lambda: RngSpec(0, STREAM_SCENES))

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not 1 <= self.n_objects <= 3:
            raise ValueError(f"n_objects must lie in [1, 3], got {self.n_objects}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")
        if not self.textures or any(t not in TEXTURES for t in self.textures):
            raise ValueError(f"textures must be drawn from {TEXTURES}, got {self.textures}")
        if not MIN_CONTRAST <= self.contrast <= 0.8:
            raise ValueError(
                f"contrast must lie in [{MIN_CONTRAST}, 0.8], got {self.contrast}"
            )


def _shape_mask(
    shape: str, height: int, width: int, rng: np.random.Generator
) -> np.ndarray:
    lo = max(6, int(height * _EXTENT_FRAC_LO))
    hi = max(lo + 1, int(height * _EXTENT_FRAC_HI))
    ext_h = int(rng.integers(lo, hi, endpoint=True))
    lo_w = max(6, int(width * _EXTENT_FRAC_LO))
    hi_w = max(lo_w + 1, int(width * _EXTENT_FRAC_HI))
    ext_w = int(rng.integers(lo_w, hi_w, endpoint=True))
    margin_y = min(_PLACEMENT_MARGIN, (height - ext_h) // 2)
    margin_x = min(_PLACEMENT_MARGIN, (width - ext_w) // 2)
    top = int(rng.integers(margin_y, height - ext_h - margin_y, endpoint=True))
    left = int(rng.integers(margin_x, width - ext_w - margin_x, endpoint=True))
    mask = np.zeros((height, width), dtype=bool)
    if shape == SHAPE_RECTANGLE:
        mask[top : top + ext_h, left : left + ext_w] = True
        return mask
    # Ellipse inscribed in the drawn bounding box.
    ry = ext_h / 2.0
    rx = ext_w / 2.0
    cy = top + ry - 0.5
    cx = left + rx - 0.5
    ys, xs = np.mgrid[0:height, 0:width]
    mask[((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0] = True
    return mask


def _texture_field(
    texture: str,
    base: float,
    height: int,
    width: int,
    rng: np.random.Generator,
) -> np.ndarray:
    amp = _TEXTURE_AMPLITUDE
    ys, xs = np.mgrid[0:height, 0:width]
    if texture == TEXTURE_CHECKER:
        cell = int(rng.choice((4, 6, 8)))
        parity = (ys // cell + xs // cell) % 2
        return base + amp * np.where(parity == 0, 1.0, -1.0)
    if texture == TEXTURE_STRIPES:
        half = int(rng.choice((2, 3, 4)))
        coord = ys if rng.random() < 0.5 else xs
        parity = (coord // half) % 2
        return base + amp * np.where(parity == 0, 1.0, -1.0)
    return base + rng.uniform(-amp, amp, size=(height, width))


def _render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[Image, GroundTruth, str]:
    H, W = spec.height, spec.width
    background = float(rng.uniform(0.0, 0.2))
    base = min(background + spec.contrast + _CONTRAST_HEADROOM, 1.0 - _TEXTURE_AMPLITUDE)
    label = str(rng.choice(spec.shapes))

    canvas = np.full((H, W), background, dtype=np.float64)
    placed: list[np.ndarray] = []
    union = np.zeros((H, W), dtype=bool)
    for _ in range(spec.n_objects):
        for attempt in range(_PLACEMENT_TRIES + 1):
            if attempt == _PLACEMENT_TRIES:
                raise SceneGenerationError(
                    f"no valid placement after {_PLACEMENT_TRIES} tries"
                )
            mask = _shape_mask(label, H, W, rng)
            visible_ok = True
            for prev in placed:
                remaining = prev & ~mask
                if remaining.sum() < _MIN_VISIBLE_FRACTION * prev.sum():
                    visible_ok = False
                    break
            if visible_ok:
                break
        texture = str(rng.choice(spec.textures))
        fill = _texture_field(texture, base, H, W, rng)
        canvas = np.where(mask, fill, canvas)
        placed.append(mask)
        union |= mask

    gap = abs(canvas[union].mean() - canvas[~union].mean())
    if gap < spec.contrast:
        raise SceneGenerationError(f"contrast {gap:.3f} below requested {spec.contrast}")
    data = np.clip(canvas, 0.0, 1.0).astype(np.float32)[..., np.newaxis]
    if spec.channels == 3:
        data = np.repeat(data, 3, axis=2)
    return Image(data), GroundTruth(union), label


def generate_scene(spec: SceneSpec, index: int = 0) -> tuple[Image, GroundTruth, str]:
    """Render scene ``index`` of the template; bitwise deterministic per (spec, index)."""
    for attempt in range(_SCENE_TRIES):
        rng = seeded_rng(spec.rng, index, attempt)
        try:
            return _render_scene(spec, rng)
        except SceneGenerationError:
            continue
    raise SceneGenerationError(
        f"scene {index}: constraints unmet after {_SCENE_TRIES} attempts"
    )


# ---------------------------------------------------------------------------
# On-disk corpus.


def _image_to_bytesable(image: Image) -> np.ndarray:
    quantized = np.rint(image.data * 255.0).astype(np.uint8)
    if quantized.shape[2] == 1:
        return quantized[:, :, 0]
    return quantized


def generate_corpus(template: SceneSpec, n: int, out_dir: str) -> "Corpus":
    """Write an n-scene corpus under out_dir and return its loader.

    Layout: images/scene_*.pgm|ppm, masks/scene_*.pgm, stats/mean.rlxt,
    stats/std.rlxt, manifest.txt.  The stats grids are computed from the
    quantized pixel values actually written, so a reader recomputing them
    from the image files reproduces them exactly.
    """
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "stats"), exist_ok=True)

    indices = list(range(n))
    workers = min(worker_count(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda i: generate_scene(template, i), indices))
    else:
        scenes = [generate_scene(template, i) for i in indices]

    ext = "pgm" if template.channels == 1 else "ppm"
    records = []
    accum = np.zeros((template.height, template.width, template.channels), dtype=np.float64)
    accum_sq = np.zeros_like(accum)
    for i, (image, gt, label) in enumerate(scenes):
        image_rel = f"images/scene_{i:05d}.{ext}"
        mask_rel = f"masks/scene_{i:05d}.pgm"
        quantized = _image_to_bytesable(image)
        write_netpbm(os.path.join(out_dir, image_rel), quantized)
        write_netpbm(
            os.path.join(out_dir, mask_rel),
            np.where(gt.mask, 255, 0).astype(np.uint8),
        )
        records.append((image_rel, mask_rel, label))
        stored = quantized.astype(np.float64) / 255.0
        if stored.ndim == 2:
            stored = stored[..., np.newaxis]
        accum += stored
        accum_sq += stored**2

    mean = accum / n
    variance = np.maximum(accum_sq / n - mean**2, 0.0)
    write_tensor(os.path.join(out_dir, "stats", "mean.rlxt"), mean.astype(np.float32))
    write_tensor(
        os.path.join(out_dir, "stats", "std.rlxt"), np.sqrt(variance).astype(np.float32)
    )

    lines = [
        "corpus_version\t1",
        f"count\t{n}",
        f"height\t{template.height}",
        f"width\t{template.width}",
        f"channels\t{template.channels}",
        f"seed\t{template.rng.seed}",
        f"stream\t{template.rng.stream_id}",
        f"contrast\t{template.contrast}",
        "mean_path\tstats/mean.rlxt",
        "std_path\tstats/std.rlxt",
        "",
    ]
    lines.extend("\t".join(record) for record in records)
    atomic_write_bytes(
        os.path.join(out_dir, MANIFEST_NAME), ("\n".join(lines) + "\n").encode("utf-8")
    )
    return Corpus(out_dir)


class Corpus:
    """Loader for a manifest-described corpus directory."""

    def __init__(self, root: str) -> None:
        self.root = root
        manifest = os.path.join(root, MANIFEST_NAME)
        with open(manifest, "r", encoding="utf-8") as handle:
            raw = handle.read()
        self.meta: dict[str, str] = {}
        self.records: list[tuple[str, str, str]] = []
        in_records = False
        for line in raw.splitlines():
            if not line.strip():
                in_records = True
                continue
            parts = line.split("\t")
            if not in_records and len(parts) == 2:
                self.meta[parts[0]] = parts[1]
            elif len(parts) == 3:
                self.records.append((parts[0], parts[1], parts[2]))
            else:
                raise ValueError(f"malformed manifest line: {line!r}")
        declared = int(self.meta.get("count", len(self.records)))
        if declared != len(self.records):
            raise ValueError(
                f"manifest declares {declared} records but lists {len(self.records)}"
            )

    def __len__(self) -> int:
        return len(self.records)

    def load(self, index: int) -> tuple[Image, GroundTruth, str]:
        image_rel, mask_rel, label = self.records[index]
        pixels = read_netpbm(os.path.join(self.root, image_rel))
        image = Image.from_array(pixels)
        mask = read_netpbm(os.path.join(self.root, mask_rel))
        return image, GroundTruth(mask > 127), label

    def items(self) -> Iterator[tuple[Image, GroundTruth, str]]:
        for index in range(len(self.records)):
            yield self.load(index)

    def load_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = read_tensor(os.path.join(self.root, self.meta["mean_path"]))
        std = read_tensor(os.path.join(self.root, self.meta["std_path"]))
        return mean, std
