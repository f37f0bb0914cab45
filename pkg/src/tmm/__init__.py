"""Toeplitz MLP Mixer at desk scale.

Causal Toeplitz token mixing (FFT and materialized paths), a small numpy
reverse-mode autodiff engine, model/training/inference code and an
operator-theory analysis toolkit for trained Toeplitz layers.
"""

from tmm.model import ModelConfig, TMModel, build
from tmm.toeplitz import ContextExhaustedError, mix_forward

__all__ = ["ModelConfig", "TMModel", "build", "mix_forward", "ContextExhaustedError"]
__version__ = "0.1.0"
