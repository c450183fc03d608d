"""Latent-tree recursive grounding of referring expressions, in pure numpy."""

from .diffcore import GumbelSampler, Tape, Tensor, backward, check_gradients
from .training import ParameterStore, TrainConfig, configure_ablation, evaluate, forward, train

__all__ = [
    "GumbelSampler", "ParameterStore", "Tape", "Tensor", "TrainConfig", "backward",
    "check_gradients", "configure_ablation", "evaluate", "forward", "train",
]
__version__ = "0.1.0"
