"""Depthwise-separable rewrites and learnable-threshold channel pruning for small conv nets."""

from dualprune.tensor import NumericError, ShapeError, Tensor, backward, grad, no_grad

__version__ = "0.1.0"

__all__ = ["NumericError", "ShapeError", "Tensor", "backward", "grad", "no_grad"]
