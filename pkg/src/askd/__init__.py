"""Attention-similarity distillation lab for low-resolution face recognition.

Train an HR teacher, distill its channel/spatial attention maps into an LR
student by minimizing their cosine distance, then evaluate verification,
identification, and attention-correlation diagnostics.
"""

from .attention import (
    CBAM,
    AttentionTap,
    ChannelAttention,
    SpatialAttention,
    channel_attention,
    refine,
    spatial_attention,
)
from .backbone import Backbone, BackboneConfig, ForwardResult, build_backbone, enumerate_sites
from .checkpoint import Checkpoint, state_dict_hash
from .degrade import (
    DegradeSpec,
    ImageDegrader,
    ImagePairRecord,
    build_pair_manifest,
    degrade_image,
    read_manifest,
    write_manifest,
)
from .evaluate import (
    CheckpointEmbedder,
    IdentificationSet,
    VerificationPair,
    rank_k_accuracy,
    verification_accuracy,
)
from .analysis import CorrelationReport, attention_correlation, export_attention_overlays, pearson_r
from .losses import (
    ClassHead,
    DistillConfig,
    LossBreakdown,
    MarginConfig,
    arcface_loss,
    attention_cosine_distance,
    distill_loss,
    logit_kd_loss,
    normalized_softmax_loss,
    total_loss,
)
from .trainer import (
    StudentRecognizer,
    TeacherRecognizer,
    TrainConfig,
    TrainLogRecord,
    lr_at_epoch,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionTap", "CBAM", "ChannelAttention", "SpatialAttention",
    "channel_attention", "spatial_attention", "refine",
    "Backbone", "BackboneConfig", "ForwardResult", "build_backbone", "enumerate_sites",
    "Checkpoint", "state_dict_hash",
    "DegradeSpec", "ImageDegrader", "ImagePairRecord",
    "build_pair_manifest", "degrade_image", "read_manifest", "write_manifest",
    "CheckpointEmbedder", "IdentificationSet", "VerificationPair",
    "rank_k_accuracy", "verification_accuracy",
    "CorrelationReport", "attention_correlation", "export_attention_overlays", "pearson_r",
    "ClassHead", "DistillConfig", "LossBreakdown", "MarginConfig",
    "arcface_loss", "attention_cosine_distance", "distill_loss",
    "logit_kd_loss", "normalized_softmax_loss", "total_loss",
    "StudentRecognizer", "TeacherRecognizer", "TrainConfig", "TrainLogRecord",
    "lr_at_epoch", "train_student", "train_teacher",
    "__version__",
]
