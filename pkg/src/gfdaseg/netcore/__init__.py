from .autodiff import Gradients, Tensor, UnrecordedParameterError, backward, param
from .model import (
    DESK,
    REDUCED,
    ModelState,
    NetConfig,
    decoder_forward,
    encoder_forward,
    head_forward,
    segment_logits,
)
from .optim import Adam, NonFiniteGradientError, ema_update

__all__ = [
    "Adam",
    "DESK",
    "Gradients",
    "ModelState",
    "NetConfig",
    "NonFiniteGradientError",
    "REDUCED",
    "Tensor",
    "UnrecordedParameterError",
    "backward",
    "decoder_forward",
    "ema_update",
    "encoder_forward",
    "head_forward",
    "param",
    "segment_logits",
]
