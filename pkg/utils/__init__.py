# utils/__init__.py
from .file_handler import DataFormatError, load_embeddings, load_index, save_embeddings, save_index
from .session import RunSession, parse_with_config

__all__ = [
    "DataFormatError",
    "RunSession",
    "load_embeddings",
    "load_index",
    "parse_with_config",
    "save_embeddings",
    "save_index",
]
