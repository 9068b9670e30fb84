"""Hyperspectral anomaly detection with masked self-supervised enhancement.

The package bundles classic Mahalanobis detectors (global and dual-window
local), a windowed-attention reconstruction network trained with a masking
pretext task and a multi-scale gradient-similarity loss, model selection by
a detection-side validation statistic, and an ROC/AUC evaluation harness.
"""

from __future__ import annotations

from .cube import (
    CubeFormatError,
    GroundTruthMap,
    HsiCube,
    crop_four,
    load_cube,
    load_pgm,
    load_truth,
    normalize_symmetric,
    normalize_unit,
    random_rotate_flip,
    save_cube,
    save_pgm,
    save_truth,
    select_bands,
)
from .detectors import (
    DEFAULT_RIDGE_EPS,
    LRX_DEFAULT_WINDOWS,
    DualWindow,
    GaussianStats,
    ScoreMap,
    SingularCovarianceError,
    enhance_and_detect,
    global_stats,
    grx,
    load_score_map,
    lrx,
    residual_map,
    save_score_map,
    score_visualization,
)
from .evaluation import (
    BenchmarkSummary,
    RocCurve,
    SceneMetrics,
    adaptive_truncate,
    asnpr_db,
    auc,
    evaluate_scene,
    roc,
    summarize,
    threshold_aucs,
    write_metrics_csv,
)
from .masking import (
    CUTMIX,
    CUTOUT,
    FillSpec,
    GrowthError,
    MaskGenerationError,
    MaskMap,
    MaskParams,
    apply_mask,
    generate_mask_map,
    grow_region,
)
from .msgms import (
    MsgmsConfig,
    SOBEL_BANK,
    avg_pool_half,
    gms_map,
    gradient_magnitude,
    msgms_loss,
)
from .network import (
    CheckpointError,
    NetParams,
    NetworkConfig,
    body_output,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    swin_block,
    window_attention_probs,
)
from .synth import SynthParams, synth_scene
from .training import (
    DomainSearchState,
    EpochRecord,
    TrainConfig,
    TrainReport,
    augment_and_mask,
    domain_metric,
    train,
    write_epoch_log,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSummary",
    "CheckpointError",
    "CubeFormatError",
    "CUTMIX",
    "CUTOUT",
    "DEFAULT_RIDGE_EPS",
    "DomainSearchState",
    "DualWindow",
    "EpochRecord",
    "FillSpec",
    "GaussianStats",
    "GroundTruthMap",
    "GrowthError",
    "HsiCube",
    "LRX_DEFAULT_WINDOWS",
    "MaskGenerationError",
    "MaskMap",
    "MaskParams",
    "MsgmsConfig",
    "NetParams",
    "NetworkConfig",
    "RocCurve",
    "SceneMetrics",
    "ScoreMap",
    "SingularCovarianceError",
    "SOBEL_BANK",
    "SynthParams",
    "TrainConfig",
    "TrainReport",
    "adaptive_truncate",
    "apply_mask",
    "asnpr_db",
    "auc",
    "augment_and_mask",
    "avg_pool_half",
    "body_output",
    "crop_four",
    "domain_metric",
    "enhance_and_detect",
    "evaluate_scene",
    "forward",
    "generate_mask_map",
    "global_stats",
    "gms_map",
    "gradient_magnitude",
    "grow_region",
    "grx",
    "init_params",
    "load_checkpoint",
    "load_cube",
    "load_pgm",
    "load_score_map",
    "load_truth",
    "loss_and_grad",
    "lrx",
    "msgms_loss",
    "normalize_symmetric",
    "normalize_unit",
    "random_rotate_flip",
    "residual_map",
    "roc",
    "save_checkpoint",
    "save_cube",
    "save_pgm",
    "save_score_map",
    "save_truth",
    "score_visualization",
    "select_bands",
    "swin_block",
    "summarize",
    "synth_scene",
    "threshold_aucs",
    "train",
    "window_attention_probs",
    "write_epoch_log",
    "write_metrics_csv",
]
