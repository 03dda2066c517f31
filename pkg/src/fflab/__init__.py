"""Desk-scale crowd counting laboratory."""

from fflab.tensor import Tensor, no_grad, set_default_dtype  # noqa: F401

__version__ = "0.1.0"
