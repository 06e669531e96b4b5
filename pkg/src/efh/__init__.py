"""Desk-scale real-time open-vocabulary detector with an efficient fusion head."""

from .autograd import (AttentionMask, Tensor, backward, bilinear_sample, concat,
                       grad_check, layer_norm, matmul, softmax, top_k)
from .model import Detector, ModelConfig
from .textenc import LanguageCache
from .training import DnConfig, GroundTruth, LossWeights

__all__ = [
    "AttentionMask", "Tensor", "backward", "bilinear_sample", "concat",
    "grad_check", "layer_norm", "matmul", "softmax", "top_k",
    "Detector", "ModelConfig", "LanguageCache",
    "DnConfig", "GroundTruth", "LossWeights",
]

__version__ = "0.1.0"
