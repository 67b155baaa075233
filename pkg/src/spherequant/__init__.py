"""Supervised spherical multi-codebook quantization and asymmetric inner-product search."""

from .config import HyperParams, SGDSettings, m_from_bits
from .embedder import EmbedderParams, embed
from .encoder import encode_batch, reconstruct, sls_encode
from .search import SparseCodebooks, build_lut, search_batch, topk
from .trainer import FitResult, encode_database, fit

__all__ = [
    "EmbedderParams",
    "FitResult",
    "HyperParams",
    "SGDSettings",
    "SparseCodebooks",
    "build_lut",
    "embed",
    "encode_batch",
    "encode_database",
    "fit",
    "m_from_bits",
    "reconstruct",
    "search_batch",
    "sls_encode",
    "topk",
]

__version__ = "0.1.0"
