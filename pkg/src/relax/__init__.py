"""Attribution heatmaps with uncertainty for arbitrary image feature extractors.

The package estimates per-pixel importance of an input image by measuring how
much the similarity between the embedding of the full image and embeddings of
randomly masked copies drops when a pixel is occluded, and reports a matching
per-pixel uncertainty from the same sample of masks.

The estimation core, mask generation, extractors, and file formats are
re-exported here; evaluation metrics (:mod:`relax.evalmetrics`), synthetic
corpora (:mod:`relax.synthdata`), gradient baselines (:mod:`relax.baselines`),
and figure rendering (:mod:`relax.report`) stay in their own modules.
"""

from relax.core import Explanation, Image, RngSpec, seeded_rng, worker_count
from relax.engine import (
    UNCERTAINTY_NORMS,
    UrelaxPolicy,
    bound_for_masks,
    bound_verification_run,
    cosine_similarity,
    mask_count_bound,
    parzen_identity_check,
    relax_one_pass,
    relax_two_pass,
    rkhs_identity_check,
    urelax_filter,
)
from relax.extractors import (
    DownsampleFlattenExtractor,
    ExternalExtractor,
    Extractor,
    HogExtractor,
    HogParams,
    LinearProjectionExtractor,
    ProtocolError,
)
from relax.formats import (
    load_image,
    read_tensor,
    render_heatmap,
    save_image,
    write_tensor,
)
from relax.maskgen import (
    BLOCK_DROPOUT,
    PER_PIXEL_BERNOULLI,
    RISE_BILINEAR,
    RISE_NOISE_FILL,
    MaskBatchSpec,
    MaskStrategy,
    apply_mask,
    mask_at,
    masked_image_at,
)

__all__ = [
    "BLOCK_DROPOUT",
    "DownsampleFlattenExtractor",
    "Explanation",
    "ExternalExtractor",
    "Extractor",
    "HogExtractor",
    "HogParams",
    "Image",
    "LinearProjectionExtractor",
    "MaskBatchSpec",
    "MaskStrategy",
    "PER_PIXEL_BERNOULLI",
    "ProtocolError",
    "RISE_BILINEAR",
    "RISE_NOISE_FILL",
    "RngSpec",
    "UNCERTAINTY_NORMS",
    "UrelaxPolicy",
    "apply_mask",
    "bound_for_masks",
    "bound_verification_run",
    "cosine_similarity",
    "load_image",
    "mask_at",
    "mask_count_bound",
    "masked_image_at",
    "parzen_identity_check",
    "read_tensor",
    "relax_one_pass",
    "relax_two_pass",
    "render_heatmap",
    "rkhs_identity_check",
    "save_image",
    "seeded_rng",
    "urelax_filter",
    "worker_count",
    "write_tensor",
]

__version__ = "0.1.0"
