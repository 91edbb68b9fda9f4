"""Stochastic adversarial video prediction on a small numpy autodiff engine."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
