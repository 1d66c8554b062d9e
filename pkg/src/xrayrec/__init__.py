"""Config-driven multi-label recognition of prohibited items in transparent imagery."""

from .augment import (
    AugmentPipelineConfig,
    MixedBatch,
    augment_batch,
    blend_labels,
    blend_pair,
    mixup_batch,
    random_crop,
    random_flip,
    random_rotate,
    resize,
)
from .datasets import (
    CLASSES,
    BoundingBox,
    DatasetManifest,
    label_distribution,
    load_manifest,
    object_scale,
    scale_histogram,
)
from .errors import ConfigError, TrainingDiverged
from .evaluation import APReport, PRCurve, ablation_run, average_precision, evaluate, pr_curve
from .model import (
    CBAM,
    AttentionConfig,
    BackboneConfig,
    ChannelAttention,
    Classifier,
    HeadConfig,
    SpatialAttention,
    build_classifier,
    class_scores,
    load_checkpoint,
    rescore,
    save_checkpoint,
)
from .synth import SynthConfig, synth_dataset
from .training import (
    NesterovSGD,
    TrainConfig,
    TrainLog,
    bce_multilabel_loss,
    mixup_loss,
    rescoring_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentPipelineConfig", "MixedBatch", "augment_batch", "blend_labels", "blend_pair",
    "mixup_batch", "random_crop", "random_flip", "random_rotate", "resize",
    "CLASSES", "BoundingBox", "DatasetManifest", "label_distribution", "load_manifest",
    "object_scale", "scale_histogram",
    "ConfigError", "TrainingDiverged",
    "APReport", "PRCurve", "ablation_run", "average_precision", "evaluate", "pr_curve",
    "CBAM", "AttentionConfig", "BackboneConfig", "ChannelAttention", "Classifier",
    "HeadConfig", "SpatialAttention", "build_classifier", "class_scores",
    "load_checkpoint", "rescore", "save_checkpoint",
    "SynthConfig", "synth_dataset",
    "NesterovSGD", "TrainConfig", "TrainLog", "bce_multilabel_loss", "mixup_loss",
    "rescoring_loss", "train",
]
