"""Desk-scale ViT/CNN semantic image communications toolkit."""
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "precision", "__version__"]
