"""Generalizable video semantic segmentation with class-wise non-salient feature learning."""

__version__ = "0.1.0"

from .core import (
    BinaryMask,
    EmptyMaskError,
    FeatureMap,
    FlowField,
    LabelMap,
    bilinear_resize,
    bilinear_warp,
    masked_mean,
    resize_flow,
)
from .config import (
    ConfigError,
    DataConfig,
    LossWeights,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    apply_override,
    config_hash,
    from_dict,
    load_config,
    save_config,
)
from .synthdata import (
    DatasetError,
    DomainStyle,
    SyntheticDataset,
    VideoSample,
    build_default_styles,
    generate_dataset,
    generate_scene,
    read_dataset,
    write_dataset,
)
from .engine import (
    ABLATION_VARIANTS,
    MetricsReport,
    TrainingDivergedError,
    TrainResult,
    ablate,
    alpha_sweep,
    build_model,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    predict_pair,
    save_checkpoint,
    total_loss,
    train,
)
from .report import ReportError, render_run_report

__all__ = [
    "__version__",
    "BinaryMask",
    "EmptyMaskError",
    "FeatureMap",
    "FlowField",
    "LabelMap",
    "bilinear_resize",
    "bilinear_warp",
    "masked_mean",
    "resize_flow",
    "ConfigError",
    "DataConfig",
    "LossWeights",
    "ModelConfig",
    "OptimizerConfig",
    "RunConfig",
    "apply_override",
    "config_hash",
    "from_dict",
    "load_config",
    "save_config",
    "DatasetError",
    "DomainStyle",
    "SyntheticDataset",
    "VideoSample",
    "build_default_styles",
    "generate_dataset",
    "generate_scene",
    "read_dataset",
    "write_dataset",
    "ABLATION_VARIANTS",
    "MetricsReport",
    "TrainingDivergedError",
    "TrainResult",
    "ablate",
    "alpha_sweep",
    "build_model",
    "evaluate",
    "load_checkpoint",
    "model_from_checkpoint",
    "predict_pair",
    "save_checkpoint",
    "total_loss",
    "train",
    "ReportError",
    "render_run_report",
]
