"""From-scratch dual-frame U-Net: forward, manual backprop, Adam, training."""

from .checkpoint import load_checkpoint, load_history, save_checkpoint, save_history
from .optim import NonFiniteGradients, adam_init, adam_step
from .train import (ResidualPair, TrainConfig, TrainingDiverged, make_residual_pair,
                    mse_loss, postprocess, train)
from .unet import (ShapeError, UNetConfig, count_params, init_unet, is_learnable,
                   param_plan, unet_backward, unet_forward)

__all__ = [
    "NonFiniteGradients", "ResidualPair", "ShapeError", "TrainConfig",
    "TrainingDiverged", "UNetConfig", "adam_init", "adam_step", "count_params",
    "init_unet", "is_learnable", "load_checkpoint", "load_history",
    "make_residual_pair", "mse_loss", "param_plan", "postprocess",
    "save_checkpoint", "save_history", "train", "unet_backward", "unet_forward",
]
