"""Volumetric segmentation with dynamic ROI resampling and linear self-attention."""
from . import errors
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "errors", "no_grad", "__version__"]
