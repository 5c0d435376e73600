"""Numerics for the amortized sampler: autodiff tape, network, optimizer."""

from flipmatch.nn import tape
from flipmatch.nn.adam import AdamState
from flipmatch.nn.mae import MaeConfig, MaeParams, load_checkpoint, save_checkpoint
from flipmatch.nn.tape import Tensor, backward

__all__ = [
    "tape",
    "Tensor",
    "backward",
    "MaeConfig",
    "MaeParams",
    "save_checkpoint",
    "load_checkpoint",
    "AdamState",
]
