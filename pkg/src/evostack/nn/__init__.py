"""Miniature neural-network stack: autodiff, transformer, backbone, training."""

from .backbone import Backbone, backbone_features
from .checkpoint import load_checkpoint, save_checkpoint
from .models import Head, MLPClassifier, Network, VisionTransformer, build_model, set_unfreeze_depth
from .training import (LossSpec, TrainState, decisions, focal_loss_from_probs, loss_and_grad,
                       predict_batched, sgd_step, train)

__all__ = [
    "Backbone", "Head", "LossSpec", "MLPClassifier", "Network", "TrainState", "VisionTransformer",
    "backbone_features", "build_model", "decisions", "focal_loss_from_probs", "load_checkpoint",
    "loss_and_grad", "predict_batched", "save_checkpoint", "set_unfreeze_depth", "sgd_step", "train",
]
