"""Dual-encoder polyp segmentation on a small numpy autodiff core."""

__version__ = "0.1.0"

from .model import ModelConfig, UNet, YNet, build_model, build_unet_baseline, build_ynet
from .optim import LossConfig, ScaledRMSProp, composite_loss, dice_coefficient
from .tensor import Tape, Tensor

__all__ = [
    "LossConfig",
    "ModelConfig",
    "ScaledRMSProp",
    "Tape",
    "Tensor",
    "UNet",
    "YNet",
    "build_model",
    "build_unet_baseline",
    "build_ynet",
    "composite_loss",
    "dice_coefficient",
]
