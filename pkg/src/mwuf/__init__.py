"""Warm-up of cold item ID embeddings with meta scaling and shifting networks."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
