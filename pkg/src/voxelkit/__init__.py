"""N-D image processing with backend dispatch.

Images are :class:`NdImage` values tagged with a backend.  Operations run
on the backend of their inputs; the accelerated backend uses compiled
multithreaded kernels where they exist and falls back to the reference
implementation otherwise.
"""

from . import core, deconv, filters, iosynth, metrics, morphthresh, segmentation, transform
from ._compiled import HAVE_COMPILED
from .core import (
    ACCELERATED,
    REFERENCE,
    REGISTRY,
    BackendId,
    ExecutionRegistry,
    FallbackWarning,
    LabelImage,
    NdImage,
    as_image,
    dispatch,
    elementwise,
    normalize_minmax,
    thread_count,
    to_backend,
)
from .deconv import IterationTrace, StoppingRule, poisson_log_likelihood, prepare_psf, richardson_lucy, rl_step
from .errors import VoxelkitError
from .filters import StructuringElement, fft_convolve, gaussian, median
from .iosynth import (
    SynthSpec,
    export_slice,
    gaussian_psf,
    generate_blobs,
    generate_cell_phantom,
    read_volume,
    write_volume,
)
from .metrics import (
    MetricReport,
    average_precision,
    frc,
    frc_resolution,
    masked_quality,
    psnr,
    si_psnr,
    single_image_frc,
    ssim,
)
from .morphthresh import binary_morphology, fill_holes, multi_otsu, otsu_threshold, remove_small_objects
from .segmentation import (
    connected_components,
    distance_transform,
    find_seeds,
    local_maxima,
    relabel_sequential,
    segment_cells,
    segment_nuclei,
    watershed,
)
from .transform import rescale, upscale2x_downscale

REGISTRY.freeze()

__version__ = "0.1.0"

__all__ = [
    "ACCELERATED", "REFERENCE", "REGISTRY", "HAVE_COMPILED", "BackendId", "ExecutionRegistry",
    "FallbackWarning", "LabelImage", "NdImage", "VoxelkitError", "as_image", "dispatch", "elementwise",
    "normalize_minmax", "thread_count", "to_backend",
    "StructuringElement", "gaussian", "median", "fft_convolve",
    "rescale", "upscale2x_downscale",
    "otsu_threshold", "multi_otsu", "binary_morphology", "fill_holes", "remove_small_objects",
    "distance_transform", "local_maxima", "find_seeds", "connected_components", "relabel_sequential",
    "watershed", "segment_nuclei", "segment_cells",
    "StoppingRule", "IterationTrace", "prepare_psf", "rl_step", "richardson_lucy", "poisson_log_likelihood",
    "psnr", "si_psnr", "ssim", "frc", "frc_resolution", "single_image_frc", "average_precision",
    "masked_quality", "MetricReport",
    "SynthSpec", "generate_blobs", "generate_cell_phantom", "gaussian_psf", "read_volume", "write_volume",
    "export_slice",
    "core", "filters", "transform", "morphthresh", "segmentation", "deconv", "metrics", "iosynth",
]
