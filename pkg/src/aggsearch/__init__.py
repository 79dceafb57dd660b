"""Differentiable search over block operators and multi-scale feature
aggregation for encoder-decoder segmentation networks, at desk scale."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, save_tensor, load_tensor
from .ops import ConvSpec

__all__ = ["Tensor", "Tape", "ConvSpec", "save_tensor", "load_tensor", "__version__"]
