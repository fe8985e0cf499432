"""Micro-expression recognition toolkit: attention residual networks on a
small numpy autodiff core, plus the training and evaluation protocols that
go with them."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape  # noqa: F401
