from .layers import AdaptiveAvgPool2d, AvgPool1d, Conv2d, Dense, Dropout, Flatten, ReLU, Sequential, Shift
from .losses import (
    combine_beta,
    combine_homoscedastic,
    combine_stable,
    loss_beta,
    loss_homoscedastic,
    loss_stable,
    loss_stable_with_grad,
    residual_losses,
)
from .model import BACKBONES, Backbone, PoseNetModel, RegressorHead, build_model
from .optim import AdamState, adam_step
from .serialization import load_model, model_from_bytes, model_to_bytes, save_model
from .training import TrainConfig, TrainingData, extract_trunk_features, train

__all__ = [
    "AdaptiveAvgPool2d", "AvgPool1d", "Conv2d", "Dense", "Dropout", "Flatten", "ReLU", "Sequential", "Shift",
    "combine_beta", "combine_homoscedastic", "combine_stable", "loss_beta", "loss_homoscedastic",
    "loss_stable", "loss_stable_with_grad", "residual_losses",
    "BACKBONES", "Backbone", "PoseNetModel", "RegressorHead", "build_model",
    "AdamState", "adam_step", "load_model", "model_from_bytes", "model_to_bytes", "save_model",
    "TrainConfig", "TrainingData", "extract_trunk_features", "train",
]
