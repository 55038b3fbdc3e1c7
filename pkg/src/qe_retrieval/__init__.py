"""Query-enhanced text-image retrieval and multi-granularity evaluation."""
from .embedding import (
    EmbeddingStore,
    SimilarityMatrix,
    SyntheticEncoder,
    build_store,
    cosine_similarity,
    load_store,
    save_store,
    top_k_per_row,
)
from .enhancer import EnhancedQuery, PromptTemplate, enhance, passthrough
from .manifest import DatasetManifest, Granularity, ImageRecord, Mode, QueryRecord, RetrievalResult
from .metrics import multi_recall_at_k, recall_at_k
from .retrieval import ImageIndex, RetrievalConfig, brute_force_topk, retrieve

__all__ = [
    "DatasetManifest", "EmbeddingStore", "EnhancedQuery", "Granularity", "ImageIndex", "ImageRecord", "Mode",
    "PromptTemplate", "QueryRecord", "RetrievalConfig", "RetrievalResult", "SimilarityMatrix", "SyntheticEncoder",
    "brute_force_topk", "build_store", "cosine_similarity", "enhance", "load_store", "multi_recall_at_k",
    "passthrough", "recall_at_k", "retrieve", "save_store", "top_k_per_row",
]

__version__ = "0.1.0"
