from .dense import EmbeddingClient, EmbeddingStore, load_store, parse_vectors, search_dense, write_vectors
from .sparse import (
    DEFAULT_B,
    DEFAULT_K1,
    InvertedIndex,
    bm25_score,
    build_index,
    dump_index,
    load_index,
    save_index,
    search_sparse,
    tokenize,
)

__all__ = [
    "DEFAULT_B",
    "DEFAULT_K1",
    "EmbeddingClient",
    "EmbeddingStore",
    "InvertedIndex",
    "bm25_score",
    "build_index",
    "dump_index",
    "load_index",
    "load_store",
    "parse_vectors",
    "save_index",
    "search_dense",
    "search_sparse",
    "tokenize",
    "write_vectors",
]
