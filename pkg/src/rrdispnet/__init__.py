"""Unsupervised monocular disparity estimation with ambiguity masks.

A self-contained CPU engine: a small reverse-mode autodiff tensor core, the
encoder-decoder disparity network family, the masked-reconstruction warping
model, the five-term multiscale training objective, KITTI-style evaluation
and a training/inference CLI.
"""

from .tensor import ParamStore, Tensor, backward, grad_check
from .network import DispNet, NetworkConfig, ScaleOutputs, build, param_count
from .losses import FeatureExtractor, LossWeights, total_loss
from .train import Adam, TrainConfig, train

__all__ = [
    "Adam",
    "DispNet",
    "FeatureExtractor",
    "LossWeights",
    "NetworkConfig",
    "ParamStore",
    "ScaleOutputs",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "grad_check",
    "param_count",
    "total_loss",
    "train",
]
