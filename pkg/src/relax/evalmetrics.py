"""Explanation quality metrics and corpus-level evaluation.

Localisation metrics (pointing game, top-k intersection, relevance rank)
depend only on the rank order of importance values; ties are always broken
toward the smaller row-major pixel index so every score is deterministic.
Faithfulness is measured by monotonicity: bins of pixels ranked by absolute
importance are zero-masked one at a time, and the rank correlation between a
bin's mean absolute importance and the probe-probability drop it causes is
reported.

The probe is a nearest-centroid classifier with a softmax over negative
squared embedding distances; it exists to give monotonicity a probability
to watch, not to be a good classifier.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from relax.core import (
    STREAM_EVAL,
    Explanation,
    Image,
    RngSpec,
    seeded_rng,
    worker_count,
)
from relax.baselines import SaliencySpec, SmoothgradParams, saliency, smoothgrad
from relax.engine import UrelaxPolicy, relax_one_pass, urelax_filter
from relax.extractors import Extractor
from relax.maskgen import MaskBatchSpec, MaskStrategy
from relax.core import STREAM_MASKS

METHOD_RELAX = "RELAX"
METHOD_URELAX = "U-RELAX"
METHOD_SALIENCY = "Saliency"
METHOD_SMOOTHGRAD = "SmoothGrad"
METHOD_RANDOM = "Random"
METHODS = (METHOD_RELAX, METHOD_URELAX, METHOD_SALIENCY, METHOD_SMOOTHGRAD, METHOD_RANDOM)

METRIC_POINTING = "pointing"
METRIC_TOPK = "topk"
METRIC_RANK = "rank"
METRIC_MONOTONICITY = "monotonicity"
METRICS = (METRIC_POINTING, METRIC_TOPK, METRIC_RANK, METRIC_MONOTONICITY)

SCORE_HEADER = ("method", "metric", "mean", "std", "n")

# Seed-derivation roles under (seed, repeat, image).
_ROLE_MASKS = 0
_ROLE_RANDOM = 1
_ROLE_NOISE = 2


@dataclass(frozen=True)
class GroundTruth:
    """Binary object-location grid; union over all objects in the scene."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError(f"ground truth must be (H, W), got shape {mask.shape}")
        if not mask.any():
            raise ValueError("ground truth must contain at least one positive pixel")
        object.__setattr__(self, "mask", mask)

    @property
    def positives(self) -> int:
        return int(self.mask.sum())


def ranked_indices(grid: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending value; ties keep row-major order."""
    flat = np.asarray(grid, dtype=np.float64).ravel()
    return np.argsort(-flat, kind="stable")


def _check_shapes(grid: np.ndarray, gt: GroundTruth) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != gt.mask.shape:
        raise ValueError(f"importance shape {grid.shape} != ground truth shape {gt.mask.shape}")
    return grid


def pointing_game(grid: np.ndarray, gt: GroundTruth) -> int:
    """1 iff the single highest-importance pixel lies inside the ground truth."""
    grid = _check_shapes(grid, gt)
    return int(gt.mask.ravel()[int(np.argmax(grid))])


def topk_intersection(grid: np.ndarray, gt: GroundTruth, k: int) -> float:
    """|top-k pixels ∩ ground truth| / k."""
    grid = _check_shapes(grid, gt)
    if not 1 <= k <= grid.size:
        raise ValueError(f"k must lie in [1, {grid.size}], got {k}")
    top = ranked_indices(grid)[:k]
    return float(gt.mask.ravel()[top].sum()) / k


def relevance_rank(grid: np.ndarray, gt: GroundTruth) -> float:
    """Fraction of the |GT| highest-importance pixels that fall inside GT."""
    grid = _check_shapes(grid, gt)
    k = gt.positives
    hits = 0
    for index in ranked_indices(grid)[:k]:
        if gt.mask.ravel()[index]:
            hits += 1
    return hits / k


@dataclass(frozen=True)
class ProbeModel:
    """Nearest-centroid softmax probe over negative squared distances."""

    centroids: np.ndarray
    classes: tuple[str, ...]
    temperature: float = 1.0

    def __post_init__(self) -> None:
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] < 2:
            raise ValueError(f"need (K>=2, D) centroids, got shape {centroids.shape}")
        if len(self.classes) != centroids.shape[0]:
            raise ValueError(
                f"{len(self.classes)} class names for {centroids.shape[0]} centroids"
            )
        if not self.temperature > 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "centroids", centroids)

    @classmethod
    def fit(
        cls, embeddings: np.ndarray, labels: Sequence[str], temperature: float = 1.0
    ) -> "ProbeModel":
        embeddings = np.asarray(embeddings, dtype=np.float64)
        classes = tuple(sorted(set(labels)))
        if len(classes) < 2:
            raise ValueError(f"probe needs at least 2 classes, got {classes}")
        labels = np.asarray(labels)
        centroids = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
        return cls(centroids=centroids, classes=classes, temperature=temperature)

    def predict_proba(self, embedding: np.ndarray) -> np.ndarray:
        embedding = np.asarray(embedding, dtype=np.float64).ravel()
        if embedding.shape[0] != self.centroids.shape[1]:
            raise ValueError(
                f"embedding dim {embedding.shape[0]} != centroid dim {self.centroids.shape[1]}"
            )
        logits = -np.sum((self.centroids - embedding) ** 2, axis=1) / self.temperature
        logits -= logits.max()
        weights = np.exp(logits)
        return weights / weights.sum()


@dataclass(frozen=True)
class MonotonicityResult:
    value: float
    degenerate: bool = False


def monotonicity(
    grid: np.ndarray,
    image: Image,
    extractor: Extractor,
    probe: ProbeModel,
    bins: int = 10,
) -> MonotonicityResult:
    """Spearman correlation between binned |importance| and probe-probability drops.

    Pixels are ranked by absolute importance and split into ``bins`` groups
    of (near-)equal size, highest first; zero-masking a group should hurt
    the probe's confidence in the originally predicted class roughly in
    proportion to the group's importance.  Degenerate inputs (all
    importances equal, or constant drops) return 0 with the flag set.
    """
    if bins < 3:
        raise ValueError(f"need at least 3 bins, got {bins}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (image.height, image.width):
        raise ValueError(f"importance shape {grid.shape} != image {image.height}x{image.width}")
    magnitude = np.abs(grid).ravel()
    if np.all(magnitude == magnitude[0]):
        return MonotonicityResult(0.0, degenerate=True)

    order = ranked_indices(np.abs(grid))
    groups = np.array_split(order, bins)

    base_probs = probe.predict_proba(extractor(image.data))
    predicted = int(np.argmax(base_probs))

    masked = np.repeat(image.data.astype(np.float64)[np.newaxis], bins, axis=0)
    width = image.width
    for b, group in enumerate(groups):
        masked[b, group // width, group % width, :] = 0.0
    embeddings = extractor.batch(masked)

    drops = np.empty(bins)
    mean_importance = np.empty(bins)
    for b, group in enumerate(groups):
        drops[b] = base_probs[predicted] - probe.predict_proba(embeddings[b])[predicted]
        mean_importance[b] = magnitude[group].mean()

    with warnings.catch_warnings():
        # constant drops are a handled degenerate case, not a caller error
        warnings.simplefilter("ignore", stats.ConstantInputWarning)
        rho = stats.spearmanr(mean_importance, drops).statistic
    if np.isnan(rho):
        return MonotonicityResult(0.0, degenerate=True)
    return MonotonicityResult(float(rho))


def random_importance(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Chance-level baseline: iid uniform importance."""
    return rng.random((height, width))


# ---------------------------------------------------------------------------
# Corpus-level evaluation.


@dataclass(frozen=True)
class ScoreRow:
    method: str
    metric: str
    mean: float
    std: float
    n: int


def format_score_table(rows: Iterable[ScoreRow], delimiter: str = ",") -> str:
    lines = [delimiter.join(SCORE_HEADER)]
    for row in rows:
        lines.append(
            delimiter.join(
                (row.method, row.metric, f"{row.mean:.6f}", f"{row.std:.6f}", str(row.n))
            )
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EvalSettings:
    """Everything evaluate_corpus needs beyond corpus/methods/metrics."""

    n_masks: int = 3000
    strategy: MaskStrategy = MaskStrategy()
    seed: int = 0
    n_repeats: int = 3
    urelax_policy: UrelaxPolicy = UrelaxPolicy()
    saliency_spec: SaliencySpec = SaliencySpec()
    topk: int | None = None  # None: per-image |GT|
    bins: int = 10
    batch_size: int = 64
    limit: int | None = None


def _derived_seed(base: RngSpec, *path: int) -> int:
    return int(seeded_rng(base, *path).integers(0, 2**63, dtype=np.uint64))


def _method_grid(
    method: str,
    image: Image,
    extractor: Extractor,
    settings: EvalSettings,
    eval_rng: RngSpec,
    repeat: int,
    index: int,
) -> np.ndarray:
    if method in (METHOD_RELAX, METHOD_URELAX):
        run_seed = _derived_seed(eval_rng, repeat, index, _ROLE_MASKS)
        spec = MaskBatchSpec(settings.n_masks, settings.strategy, RngSpec(run_seed, STREAM_MASKS))
        explanation = relax_one_pass(
            image, extractor, spec, batch_size=settings.batch_size
        )
        if method == METHOD_RELAX:
            return explanation.importance
        return urelax_filter(explanation, settings.urelax_policy)
    if method == METHOD_SALIENCY:
        return saliency(image, extractor, settings.saliency_spec)
    if method == METHOD_SMOOTHGRAD:
        base = settings.saliency_spec.smoothgrad or SmoothgradParams()
        noise_seed = _derived_seed(eval_rng, repeat, index, _ROLE_NOISE)
        spec = SaliencySpec(
            mode=settings.saliency_spec.mode,
            fd_step=settings.saliency_spec.fd_step,
            smoothgrad=SmoothgradParams(base.n_samples, base.sigma, noise_seed),
        )
        return smoothgrad(image, extractor, spec)
    if method == METHOD_RANDOM:
        rng = seeded_rng(eval_rng, repeat, index, _ROLE_RANDOM)
        return random_importance(image.height, image.width, rng)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _score(
    metric: str,
    grid: np.ndarray,
    image: Image,
    gt: GroundTruth,
    extractor: Extractor,
    probe: ProbeModel | None,
    settings: EvalSettings,
) -> float:
    if metric == METRIC_POINTING:
        return float(pointing_game(grid, gt))
    if metric == METRIC_TOPK:
        k = settings.topk if settings.topk is not None else gt.positives
        return topk_intersection(grid, gt, k)
    if metric == METRIC_RANK:
        return relevance_rank(grid, gt)
    if metric == METRIC_MONOTONICITY:
        if probe is None:
            raise ValueError("monotonicity requires a fitted probe")
        return monotonicity(grid, image, extractor, probe, bins=settings.bins).value
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def fit_corpus_probe(corpus, extractor: Extractor, temperature: float = 1.0) -> ProbeModel:
    """Probe fitted on the embeddings of every corpus image, by label."""
    embeddings = []
    labels = []
    for image, _, label in corpus.items():
        embeddings.append(extractor(image.data))
        labels.append(label)
    return ProbeModel.fit(np.stack(embeddings), labels, temperature=temperature)


def evaluate_corpus(
    corpus,
    methods: Sequence[str],
    metrics: Sequence[str],
    extractor: Extractor,
    settings: EvalSettings = EvalSettings(),
) -> list[ScoreRow]:
    """Score each method on each metric over the corpus.

    The corpus is any object whose ``items()`` yields (Image, GroundTruth,
    label) triples.  Every (repeat, image, method) combination draws its
    randomness from seeds derived from ``settings.seed``, so two runs with
    identical settings produce identical tables.  Returned rows hold the
    mean and std across repeat-level means (std 0 for a single repeat) and
    the number of images scored.
    """
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    for metric in metrics:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")

    items = list(corpus.items())
    if settings.limit is not None:
        items = items[: settings.limit]
    if not items:
        raise ValueError("corpus is empty")

    probe = None
    if METRIC_MONOTONICITY in metrics:
        probe = fit_corpus_probe(corpus, extractor)

    eval_rng = RngSpec(settings.seed, STREAM_EVAL)

    def score_image(task: tuple[int, int]) -> dict[tuple[str, str], float]:
        repeat, index = task
        image, gt, _ = items[index]
        scores = {}
        for method in methods:
            grid = _method_grid(method, image, extractor, settings, eval_rng, repeat, index)
            for metric in metrics:
                scores[(method, metric)] = _score(
                    metric, grid, image, gt, extractor, probe, settings
                )
        return scores

    per_repeat_means: dict[tuple[str, str], list[float]] = {
        (method, metric): [] for method in methods for metric in metrics
    }
    workers = min(worker_count(), len(items))
    for repeat in range(settings.n_repeats):
        tasks = [(repeat, index) for index in range(len(items))]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                all_scores = list(pool.map(score_image, tasks))
        else:
            all_scores = [score_image(task) for task in tasks]
        for key in per_repeat_means:
            per_repeat_means[key].append(float(np.mean([s[key] for s in all_scores])))

    rows = []
    for method in methods:
        for metric in metrics:
            values = per_repeat_means[(method, metric)]
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            rows.append(
                ScoreRow(
                    method=method,
                    metric=metric,
                    mean=float(np.mean(values)),
                    std=std,
                    n=len(items),
                )
            )
    return rows
