"""Desk-scale mixture-of-experts language modeling with cosine-anchor routing."""

from .analysis import (
    anchor_dispersion_stats,
    routing_trace,
    specialization_table,
    utilization,
)
from .data import Tokenizer, make_batches, train_bpe, train_val_split
from .gradcheck import grad_check
from .losses import (
    LossBreakdown,
    balance_loss,
    dispersion_loss,
    lm_loss,
    total_loss,
    z_loss,
)
from .model import (
    ExpertFFN,
    LanguageModel,
    ModelConfig,
    build_model,
    count_parameters,
    expert_forward,
    rope_apply,
)
from .router import (
    AnchorSet,
    RoutingDecision,
    RoutingRecord,
    csr_forward,
    init_anchors_kaiming,
    init_anchors_orthogonal,
    resonance,
    select_topk,
)
from .training import TrainConfig, evaluate, lr_at, progressive_k, train

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "ExpertFFN",
    "LanguageModel",
    "LossBreakdown",
    "ModelConfig",
    "RoutingDecision",
    "RoutingRecord",
    "Tokenizer",
    "TrainConfig",
    "anchor_dispersion_stats",
    "balance_loss",
    "build_model",
    "count_parameters",
    "csr_forward",
    "dispersion_loss",
    "evaluate",
    "expert_forward",
    "grad_check",
    "init_anchors_kaiming",
    "init_anchors_orthogonal",
    "lm_loss",
    "lr_at",
    "make_batches",
    "progressive_k",
    "resonance",
    "rope_apply",
    "routing_trace",
    "select_topk",
    "specialization_table",
    "total_loss",
    "train",
    "train_bpe",
    "train_val_split",
    "utilization",
    "z_loss",
]
