"""Self-supervised objectives, view generation, pretraining and checkpoints."""

from .augment import AugmentPolicy, ViewPair, make_view_pair, make_view_pairs
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, read_metadata, save_checkpoint
from .losses import (
    barlow_twins_loss,
    cross_correlation,
    nt_xent_loss,
    sinkhorn_normalize,
    swapped_prediction_loss,
    swav_codes,
    swav_loss,
)
from .pretrain import METHODS, PretrainError, SslConfig, pretrain, stage_name

__all__ = [
    "AugmentPolicy",
    "ViewPair",
    "make_view_pair",
    "make_view_pairs",
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "read_metadata",
    "save_checkpoint",
    "barlow_twins_loss",
    "cross_correlation",
    "nt_xent_loss",
    "sinkhorn_normalize",
    "swapped_prediction_loss",
    "swav_codes",
    "swav_loss",
    "METHODS",
    "PretrainError",
    "SslConfig",
    "pretrain",
    "stage_name",
]
