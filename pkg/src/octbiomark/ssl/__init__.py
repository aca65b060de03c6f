"""Self-supervised feature learning: conv encoder and BYOL training loop."""

from .encoder import ConvEncoder, EncoderSpec, DESK_ENCODER, PAPER_SCALE_ENCODER
from .byol import (
    BYOLState,
    MLPHead,
    TrainConfig,
    TrainResult,
    byol_loss,
    init_state,
    ema_update,
    ema_update_module,
    train,
    save_checkpoint,
    load_checkpoint,
    save_loss_trace,
    load_loss_trace,
)

__all__ = [
    "ConvEncoder",
    "EncoderSpec",
    "DESK_ENCODER",
    "PAPER_SCALE_ENCODER",
    "BYOLState",
    "MLPHead",
    "TrainConfig",
    "TrainResult",
    "byol_loss",
    "init_state",
    "ema_update",
    "ema_update_module",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "save_loss_trace",
    "load_loss_trace",
]
