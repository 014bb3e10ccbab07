"""Lung-nodule CT segmentation toolkit.

A dual-branch network couples a segmentation encoder-decoder with a binary
nodule classifier through feature-combination blocks, and replaces the final
sigmoid with an unrolled variational solver whose area prior is modulated by
the classifier's confidence. The package also ships the data pipeline
(MetaImage volumes to balanced 128x128 slice patches), losses, evaluation
metrics, a two-phase trainer with group freezing, and a CLI.
"""
from .config import RESOLVED_CONFIG_NAME, RunConfig
from .errors import (
    CheckpointError,
    ConfigurationError,
    FormatError,
    IntegrityError,
    PlacementError,
    TrainingAbort,
    TruncationError,
)
from .imaging_io import (
    ManifestEntry,
    NoduleAnnotation,
    PatchManifest,
    ScanVolume,
    load_patch_dataset,
    read_annotations,
    read_metaimage,
    write_metaimage,
    write_patch_dataset,
)
from .metrics import (
    METRIC_NAMES,
    CaseMetrics,
    MetricsReport,
    aggregate_report,
    assd,
    binarize,
    case_metrics,
    extract_contour,
    hausdorff,
    pixel_metrics,
)
from .network import (
    DEFAULT_COMBINE_PAIRS,
    ASPP,
    DepthwiseSeparableConv,
    FeatureCombine,
    ForwardOutputs,
    ModelConfig,
    NoduleSegNet,
    SegBlock,
)
from .objectives import LossWeights, bce_loss, dice_loss, loss_components, total_loss
from .roi_pipeline import (
    ROIStack,
    RoiGeometry,
    SlicePatch,
    augment_flip,
    build_slice_dataset,
    extract_roi,
    normalize_intensity,
    synthesize_sphere_mask,
)
from .std_activation import (
    STDLayer,
    STDParams,
    gaussian_kernel,
    mirror_pad2d,
    std_energy,
    std_solve,
    std_solve_trace,
    variational_sigmoid,
)
from .trainer import (
    CrossValResult,
    FreezeSpec,
    TrainConfig,
    TrainResult,
    apply_freeze,
    crossvalidate,
    evaluate_model,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    select_split,
    train,
)

__version__ = "0.1.0"
