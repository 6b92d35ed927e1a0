"""Two-stage learned image stitching.

Stage one estimates a large-baseline homography from a coarse-to-fine
feature-correlation pyramid (4-point parameterization); stage two
re-renders the pair of canvas-warped images into an artifact-free panorama
with an edge-preserved deformation network. Includes the synthetic
quadruple generator, size-free inference, training harness, evaluation
metrics, and a CLI binding them together.
"""

from .correlation import correlate, correlation_counters, memory_cells, reset_correlation_counters
from .deformation import (
    DeformationNet,
    DeformationNetConfig,
    StitchInputs,
    build_perceptual_extractor,
    content_loss,
    edge_loss,
    extract_edges,
    stitch,
    total_loss,
)
from .errors import (
    CheckpointIncompatible,
    CorruptManifest,
    DatasetEmpty,
    DegenerateCorners,
    ExtractorUnavailable,
    IndivisibleInput,
    MissingImage,
    MultiChannelInput,
    NonPositiveScale,
    PatchOutOfBounds,
    ShapeMismatch,
    StitchForgeError,
)
from .evaluation import (
    evaluate_model,
    image_fidelity,
    overlap_rate,
    rmse_4pt,
    split_report,
)
from .geometry import (
    CanvasSpec,
    apply_homography,
    canvas_for_pair,
    compute_canvas,
    corners,
    offsets_to_homography,
    rescale_offsets,
    solve_dlt,
    warp_image,
)
from .homography import (
    HomographyNet,
    HomographyNetConfig,
    OffsetPrediction,
    PyramidFeatures,
    homography_loss,
    infer_homography,
)
from .synthesis import (
    StitchQuadruple,
    SynthesisConfig,
    brightness_augment,
    read_dataset,
    sample_offsets,
    synthesize_dataset,
    synthesize_quadruple,
    write_dataset,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    load_config,
    lr_at,
    model_from_checkpoint,
    save_checkpoint,
    save_config,
    train_stage,
)

__version__ = "0.1.0"
