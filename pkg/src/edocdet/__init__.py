"""Document-layout detection with depthwise-separable backbones and
focal/global feature distillation, on a small numpy autograd engine."""

__version__ = "0.1.0"

from .tensor import Tensor

__all__ = ["Tensor", "__version__"]
