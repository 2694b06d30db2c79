"""Coarse-to-fine environmental sound classification with LLM-derived label ontologies."""
from ._kernels import BACKEND as TSNE_BACKEND

__version__ = "0.1.0"

__all__ = ["TSNE_BACKEND", "__version__"]
