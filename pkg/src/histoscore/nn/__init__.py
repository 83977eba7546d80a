"""From-scratch CNN engine: layers, losses, Adam, architectures, training."""

from .checkpoint import load_model, save_model
from .losses import dice_loss, l2_loss, score_loss
from .network import ARCHS, LayerSpec, Model, NetworkSpec, ShapeError, build_network
from .optim import AdamState, adam_step
from .train import Dataset, Hyperparams, gradient_check, predict, train

__all__ = [
    "ARCHS",
    "AdamState",
    "Dataset",
    "Hyperparams",
    "LayerSpec",
    "Model",
    "NetworkSpec",
    "ShapeError",
    "adam_step",
    "build_network",
    "dice_loss",
    "gradient_check",
    "l2_loss",
    "load_model",
    "predict",
    "save_model",
    "score_loss",
    "train",
]
