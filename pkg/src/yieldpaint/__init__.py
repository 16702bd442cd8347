"""Reconstruction of sparse corporate-bond yield surfaces.

Three engines fill a rating x tenor yield matrix from a handful of observed
cells: total-variation inpainting (:mod:`yieldpaint.tv`), thin plate
splines (:mod:`yieldpaint.tps`) and denoising autoencoders
(:mod:`yieldpaint.dae`, built on the small numpy network engine in
:mod:`yieldpaint.neural`). :mod:`yieldpaint.harness` benchmarks them under
uniform and block masking.
"""

from yieldpaint.surface import (
    DEFAULT_RATINGS,
    DEFAULT_TENORS,
    MaskedSurface,
    RatingGrid,
    SurfaceDataset,
    SyntheticConfig,
    TenorGrid,
    YieldSurface,
    crop_surface,
    descale,
    generate_synthetic,
    load_csv,
    pad_surface,
    save_csv,
    scale_to_unit,
)
from yieldpaint.masking import CorruptionSpec, mask_block, mask_uniform, replicate_and_corrupt
from yieldpaint.metrics import MetricsReport, error_metrics, monotonicity_violations

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_RATINGS",
    "DEFAULT_TENORS",
    "CorruptionSpec",
    "MaskedSurface",
    "MetricsReport",
    "RatingGrid",
    "SurfaceDataset",
    "SyntheticConfig",
    "TenorGrid",
    "YieldSurface",
    "crop_surface",
    "descale",
    "error_metrics",
    "generate_synthetic",
    "load_csv",
    "mask_block",
    "mask_uniform",
    "monotonicity_violations",
    "pad_surface",
    "replicate_and_corrupt",
    "save_csv",
    "scale_to_unit",
]
