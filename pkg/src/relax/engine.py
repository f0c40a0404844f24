"""Estimators for masked-similarity attribution with uncertainty.

Importance of pixel (i, j) is the mean over N random masks of the embedding
similarity between the full and the masked image, weighted by how much each
mask kept the pixel:

    importance_ij = (1/N) * sum_n s_n * M_ij(n)

Uncertainty is the weighted sample variance of the similarities at each
pixel, centered on the weighted mean sum_n s_n M_ij(n) / W_ij with
W_ij = sum_n M_ij(n):

    uncertainty_ij = sum_n M_ij(n) * (s_n - weighted_mean_ij)^2 / (W_ij - 1)

Both a two-pass estimator (mask stream replayed from the seed, nothing
stored but N similarity scalars) and a streaming one-pass estimator
(weighted Welford recursion) are provided; they agree within floating-point
tolerance.  ``uncertainty_norm="n"`` switches to the per-mask-count variant
``(1/N) * sum_n M(s - importance)^2`` for comparison studies.

Accumulation always runs in strictly increasing mask-index order, so a
result is a pure, bitwise-reproducible function of (image, extractor
settings, mask spec).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from relax.core import (
    STREAM_BOUND,
    STREAM_MASKS,
    Explanation,
    Image,
    RngSpec,
    seeded_rng,
    stable_digest,
)
from relax.extractors import Extractor
from relax.maskgen import MaskBatchSpec, apply_mask, masked_image_at

# Alg-style running-weight floor: keeps the first weighted-mean update away
# from 0/0 at pixels a mask never touched.
EPS_W = 1e-12

# Floor for the denominator of relative deviations in the identity checks.
REL_DEV_FLOOR = 1e-12

UNCERTAINTY_NORMS = ("w-1", "n")

DEFAULT_BATCH = 64


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product over the product of norms; defined as 0.0 if either norm is 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


class CosineKernel:
    """Similarity kernel ⟨a,b⟩/(‖a‖‖b‖); symmetric, in [0,1] on non-negative inputs."""

    variant = "cosine"

    def pair(self, a: np.ndarray, b: np.ndarray) -> float:
        return cosine_similarity(a, b)

    def batch(self, reference: np.ndarray, embeddings: np.ndarray) -> tuple[np.ndarray, int]:
        """Similarities of each row against ``reference`` plus the zero-norm count."""
        reference = np.asarray(reference, dtype=np.float64).ravel()
        embeddings = np.asarray(embeddings, dtype=np.float64)
        ref_norm = float(np.linalg.norm(reference))
        norms = np.linalg.norm(embeddings, axis=1)
        zero = norms == 0.0
        if ref_norm == 0.0:
            return np.zeros(embeddings.shape[0]), embeddings.shape[0]
        sims = np.where(zero, 0.0, (embeddings @ reference) / (np.where(zero, 1.0, norms) * ref_norm))
        return sims, int(zero.sum())


@dataclass(frozen=True)
class UrelaxPolicy:
    """Uncertainty-filter threshold policy: epsilon = gamma * aggregate(uncertainty)."""

    aggregation: str = "median"
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.aggregation not in ("mean", "median"):
            raise ValueError(f"aggregation must be 'mean' or 'median', got {self.aggregation!r}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


class _ExplicitMasks:
    """Mask source from a fixed list of masks (zero-fill), for direct injection."""

    def __init__(self, masks: Sequence[np.ndarray]):
        self.masks = [np.asarray(m, dtype=np.float64) for m in masks]
        self.n_masks = len(self.masks)
        self.seed = 0

    def pair(self, image: Image, index: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.masks[index]
        if mask.shape != (image.height, image.width):
            raise ValueError(f"mask {index} shape {mask.shape} != image {image.height}x{image.width}")
        return mask, image.data.astype(np.float64) * mask[:, :, np.newaxis]

    def descriptor(self) -> str:
        return f"explicit(n={self.n_masks})"


class _SpecMasks:
    """Mask source driven by a MaskBatchSpec; pure per index."""

    def __init__(self, spec: MaskBatchSpec):
        self.spec = spec
        self.n_masks = spec.n_masks
        self.seed = spec.rng.seed

    def pair(self, image: Image, index: int) -> tuple[np.ndarray, np.ndarray]:
        return masked_image_at(image, self.spec, index)

    def descriptor(self) -> str:
        return f"n={self.spec.n_masks},{self.spec.strategy.descriptor()}"


def _as_source(masks) -> "_SpecMasks | _ExplicitMasks":
    if isinstance(masks, MaskBatchSpec):
        return _SpecMasks(masks)
    return _ExplicitMasks(masks)


def _run_digest(source, extractor: Extractor, kernel, uncertainty_norm: str) -> str:
    return stable_digest(
        f"masks[{source.descriptor()}];extractor[{extractor.descriptor()}];"
        f"kernel[{kernel.variant}];unorm[{uncertainty_norm}]"
    )


def _similarity_batches(image, extractor, source, kernel, batch_size):
    """Yield (index, mask, similarity) in strictly increasing index order."""
    reference = extractor(image.data)
    n = source.n_masks
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        pairs = [source.pair(image, i) for i in range(start, stop)]
        stacked = np.stack([p[1] for p in pairs])
        try:
            embeddings = extractor.batch(stacked)
        except Exception as exc:
            raise RuntimeError(
                f"extractor failed on masked images for mask indices [{start}, {stop}): {exc}"
            ) from exc
        sims, zeros = kernel.batch(reference, embeddings)
        yield start, pairs, sims, zeros


def _validate_norm(uncertainty_norm: str) -> None:
    if uncertainty_norm not in UNCERTAINTY_NORMS:
        raise ValueError(
            f"uncertainty_norm must be one of {UNCERTAINTY_NORMS}, got {uncertainty_norm!r}"
        )


def relax_two_pass(
    image: Image,
    extractor: Extractor,
    masks,
    kernel: CosineKernel | None = None,
    *,
    uncertainty_norm: str = "w-1",
    batch_size: int = DEFAULT_BATCH,
) -> Explanation:
    """Importance and uncertainty via two passes over the replayed mask stream.

    Pass one embeds every masked image and accumulates the importance mean
    and per-pixel mask weight, keeping only the N similarity scalars; pass
    two regenerates each mask (no extractor calls) to accumulate the
    variance around the chosen center.  Pixels with final weight <= 1 get
    NaN uncertainty under the default normalization.
    """
    _validate_norm(uncertainty_norm)
    kernel = kernel or CosineKernel()
    source = _as_source(masks)
    n = source.n_masks
    if n < 2:
        raise ValueError(f"need at least 2 masks for an uncertainty estimate, got {n}")
    H, W = image.height, image.width

    weight = np.zeros((H, W))
    score_sum = np.zeros((H, W))
    sims = np.empty(n)
    zero_count = 0
    for start, pairs, batch_sims, zeros in _similarity_batches(
        image, extractor, source, kernel, batch_size
    ):
        zero_count += zeros
        for offset, (mask, _) in enumerate(pairs):
            s = batch_sims[offset]
            sims[start + offset] = s
            weight += mask
            score_sum += s * mask

    importance = score_sum / n
    touched = weight > 0.0
    if uncertainty_norm == "w-1":
        center = np.where(touched, score_sum / np.where(touched, weight, 1.0), 0.0)
    else:
        center = importance

    residual = np.zeros((H, W))
    for index in range(n):  # replay, extraction-free
        mask = source.pair(image, index)[0]
        residual += mask * (sims[index] - center) ** 2

    if uncertainty_norm == "w-1":
        defined = weight > 1.0
        uncertainty = np.where(defined, residual / np.where(defined, weight - 1.0, 1.0), np.nan)
    else:
        uncertainty = residual / n

    return Explanation(
        importance=importance,
        uncertainty=uncertainty,
        mask_weight=weight,
        n_masks=n,
        config_digest=_run_digest(source, extractor, kernel, uncertainty_norm),
        seed=source.seed,
        n_zero_similarity=zero_count,
    )


def relax_one_pass(
    image: Image,
    extractor: Extractor,
    masks,
    kernel: CosineKernel | None = None,
    *,
    uncertainty_norm: str = "w-1",
    batch_size: int = DEFAULT_BATCH,
) -> Explanation:
    """Single pass over the mask stream with a weighted running mean/variance.

    Per mask, with running weight W (initialized to a tiny positive floor so
    the first update never divides by zero):

        W += M;  R += M * (s - R) / W;  U += (s - R_new) * (s - R_old) * M

    The final R is the weighted mean of similarities, so it is rescaled by
    W/N on output to the mean-over-masks importance; U equals the weighted
    squared residual around R, divided by (exact mask weight - 1) for the
    default normalization.  Outputs match :func:`relax_two_pass` within
    floating-point tolerance.
    """
    _validate_norm(uncertainty_norm)
    kernel = kernel or CosineKernel()
    source = _as_source(masks)
    n = source.n_masks
    if n < 2:
        raise ValueError(f"need at least 2 masks for an uncertainty estimate, got {n}")
    H, W = image.height, image.width

    running_w = np.full((H, W), EPS_W)
    weight = np.zeros((H, W))  # exact mask-weight bookkeeping, no floor
    mean = np.zeros((H, W))
    m2 = np.zeros((H, W))
    zero_count = 0
    for start, pairs, batch_sims, zeros in _similarity_batches(
        image, extractor, source, kernel, batch_size
    ):
        zero_count += zeros
        for offset, (mask, _) in enumerate(pairs):
            s = batch_sims[offset]
            running_w += mask
            weight += mask
            mean_old = mean
            mean = mean + mask * (s - mean) / running_w
            m2 = m2 + (s - mean) * (s - mean_old) * mask

    importance = mean * weight / n
    if uncertainty_norm == "w-1":
        defined = weight > 1.0
        uncertainty = np.where(defined, m2 / np.where(defined, weight - 1.0, 1.0), np.nan)
    else:
        # Shift the squared residual from the weighted-mean center to the
        # importance center: sum M (s-c)^2 = sum M (s-R)^2 + W (R-c)^2.
        uncertainty = (m2 + weight * (mean - importance) ** 2) / n

    return Explanation(
        importance=importance,
        uncertainty=uncertainty,
        mask_weight=weight,
        n_masks=n,
        config_digest=_run_digest(source, extractor, kernel, uncertainty_norm),
        seed=source.seed,
        n_zero_similarity=zero_count,
    )


def urelax_filter(explanation: Explanation, policy: UrelaxPolicy = UrelaxPolicy()) -> np.ndarray:
    """Importance with unreliable pixels zeroed.

    A pixel survives iff its uncertainty is strictly below
    ``gamma * aggregate(uncertainty)``, where the aggregate (mean or median)
    runs over pixels with defined uncertainty; undefined pixels never
    survive.  With a constant uncertainty grid the strict inequality zeroes
    everything; that degenerate case is intentional.
    """
    defined = explanation.uncertainty_defined & np.isfinite(explanation.uncertainty)
    if not defined.any():
        return np.zeros_like(explanation.importance)
    values = explanation.uncertainty[defined]
    aggregate = float(np.mean(values)) if policy.aggregation == "mean" else float(np.median(values))
    epsilon = policy.gamma * aggregate
    keep = defined & (explanation.uncertainty < epsilon)
    return np.where(keep, explanation.importance, 0.0)


def mask_count_bound(delta: float, t: float) -> int:
    """Masks needed so P(max pixel error > t) <= delta: ceil(-ln(delta/2) / (2 t^2))."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not t > 0.0:
        raise ValueError(f"t must be positive, got {t}")
    return math.ceil(-math.log(delta / 2.0) / (2.0 * t * t))


def bound_for_masks(n_masks: int, delta: float) -> float:
    """Error level t guaranteed at confidence 1-delta by n_masks masks."""
    if n_masks < 1:
        raise ValueError(f"n_masks must be positive, got {n_masks}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(-math.log(delta / 2.0) / (2.0 * n_masks))


def parzen_identity_check(similarities: np.ndarray, masks: np.ndarray) -> float:
    """Max relative gap between rescaled importance and the weighted mean.

    The importance estimator, rescaled by N / mask weight, must equal the
    per-pixel similarity-density estimate sum_n s_n M_ij(n) / sum_n M_ij(n).
    Both sides are computed through different operation orders; pixels no
    mask touched are excluded.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 3 or sims.shape != (masks.shape[0],):
        raise ValueError(f"expected (N,) similarities and (N, H, W) masks, got {sims.shape}, {masks.shape}")
    n = sims.shape[0]
    weight = masks.sum(axis=0)
    importance = np.tensordot(sims, masks, axes=1) / n
    direct = (sims[:, np.newaxis, np.newaxis] * masks).sum(axis=0)
    tested = weight > 0.0
    lhs = importance[tested] * n / weight[tested]
    rhs = direct[tested] / weight[tested]
    return float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), REL_DEV_FLOOR)))


def rkhs_identity_check(
    reference: np.ndarray, embeddings: np.ndarray, masks: np.ndarray
) -> float:
    """Max relative gap between the similarity route and the feature-map route.

    With the unit-normalization feature map phi(x) = x/|x|, the cosine
    importance estimate must equal the inner product of phi(reference) with
    the mask-weighted mean of the phi(embedding_n) — importance is a linear
    functional of the embedded masked images.
    """
    reference = np.asarray(reference, dtype=np.float64).ravel()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if embeddings.ndim != 2 or masks.ndim != 3 or embeddings.shape[0] != masks.shape[0]:
        raise ValueError(
            f"expected (N, D) embeddings and (N, H, W) masks, got {embeddings.shape}, {masks.shape}"
        )
    norms = np.linalg.norm(embeddings, axis=1)
    ref_norm = np.linalg.norm(reference)
    if ref_norm == 0.0 or np.any(norms == 0.0):
        raise ValueError("identity check requires nonzero embeddings")
    n = embeddings.shape[0]

    sims = (embeddings @ reference) / (norms * ref_norm)
    via_similarity = np.tensordot(sims, masks, axes=1) / n

    phi = embeddings / norms[:, np.newaxis]
    mean_map = np.tensordot(masks, phi, axes=(0, 0)) / n  # (H, W, D)
    via_features = mean_map @ (reference / ref_norm)

    return float(
        np.max(
            np.abs(via_features - via_similarity)
            / np.maximum(np.abs(via_similarity), REL_DEV_FLOOR)
        )
    )


@dataclass(frozen=True)
class BoundCurveRow:
    """One grid point of an empirical-error-vs-bound run."""

    n_masks: int
    errors: tuple[float, ...]
    mean_error: float
    bound: float


def bound_verification_run(
    image: Image,
    extractor: Extractor,
    n_grid: Sequence[int],
    n_repeats: int,
    reference_n: int,
    strategy,
    seed: int,
    delta: float = 0.01,
    batch_size: int = DEFAULT_BATCH,
) -> list[BoundCurveRow]:
    """Empirical max-pixel estimation error against the theoretical bound.

    A reference importance map is estimated with ``reference_n`` masks; each
    grid point N is then re-estimated ``n_repeats`` times with fresh seeds
    and compared by max absolute pixel difference.  Per-run seeds derive
    from (seed, N, repeat); the reference reuses the (reference_n, repeat 0)
    seed, so a grid point at reference_n reproduces it exactly.
    """
    if any(n < 2 for n in n_grid) or reference_n < 2:
        raise ValueError("every grid point and the reference need at least 2 masks")
    if max(n_grid) > reference_n:
        raise ValueError(
            f"reference_n={reference_n} must dominate the grid (max {max(n_grid)})"
        )
    if n_repeats < 1:
        raise ValueError(f"n_repeats must be positive, got {n_repeats}")

    def run_seed(n: int, repeat: int) -> int:
        gen = seeded_rng(RngSpec(seed, STREAM_BOUND), n, repeat)
        return int(gen.integers(0, 2**63, dtype=np.uint64))

    def estimate(n: int, repeat: int) -> np.ndarray:
        spec = MaskBatchSpec(n, strategy, RngSpec(run_seed(n, repeat), STREAM_MASKS))
        return relax_one_pass(image, extractor, spec, batch_size=batch_size).importance

    reference = estimate(reference_n, 0)
    rows = []
    for n in n_grid:
        errors = tuple(
            float(np.max(np.abs(estimate(n, repeat) - reference)))
            for repeat in range(n_repeats)
        )
        rows.append(
            BoundCurveRow(
                n_masks=n,
                errors=errors,
                mean_error=float(np.mean(errors)),
                bound=bound_for_masks(n, delta),
            )
        )
    return rows
