"""Prompt interaction between the two branches of a frozen image-text encoder.

Temporal prompts ride along a few intermediate layers of each branch; a small
shared hub turns each layer's prompts into the next layer's, mixing the two
modalities through similarity gates.  Only the prompts and the hub train.
"""
from .backbone import BackboneConfig, FrozenBackbone, ImageTextPair
from .config import ConfigError, ExperimentConfig
from .gradcheck import GradCheckReport, grad_check
from .hub import HubParams, SimilarityConfig, activation_gates, hub_step, similarity
from .model import MODES, LayerSchedule, PromptedModel
from .tensor import Tensor, backward, no_grad
from .trainer import ablate, count_params, sweep, train

__all__ = [
    "BackboneConfig", "FrozenBackbone", "ImageTextPair", "ConfigError", "ExperimentConfig",
    "GradCheckReport", "grad_check", "HubParams", "SimilarityConfig", "activation_gates",
    "hub_step", "similarity", "MODES", "LayerSchedule", "PromptedModel", "Tensor", "backward",
    "no_grad", "ablate", "count_params", "sweep", "train",
]
