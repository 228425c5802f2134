"""Multi-view modality-aligned item representations for graph recommenders.

The pipeline: item metadata fields become view prompts, an encoder bridge
supplies aligned text/image embeddings, temperature-scaled similarity
profiles weight the views, a fusion layer collapses them into one item text
vector, and a graph collaborative-filtering backbone consumes the result.
"""

from .alignment import SimilarityProfile, cosine_similarity, profile_all, view_similarity_scores
from .backbone import RecConfig, RecModelState, bpr_loss, predict_scores, train
from .data import InteractionDataset, ItemMetadata, compute_stats, load_interactions, load_metadata
from .evaluation import EvalConfig, EvalReport, early_stopper, evaluate, ndcg_at_k, recall_at_k
from .fusion import fuse_all, fuse_concat, fuse_mlp, fuse_sa, fuse_sum
from .prompts import ItemViews, PromptTemplate, build_views, soft_truncate
from .store import ViewEmbeddingSet, read_store, synth_store, write_store

__version__ = "0.1.0"

__all__ = [
    "InteractionDataset",
    "ItemMetadata",
    "ItemViews",
    "PromptTemplate",
    "SimilarityProfile",
    "ViewEmbeddingSet",
    "RecConfig",
    "RecModelState",
    "EvalConfig",
    "EvalReport",
    "bpr_loss",
    "build_views",
    "compute_stats",
    "cosine_similarity",
    "early_stopper",
    "evaluate",
    "fuse_all",
    "fuse_concat",
    "fuse_mlp",
    "fuse_sa",
    "fuse_sum",
    "load_interactions",
    "load_metadata",
    "ndcg_at_k",
    "predict_scores",
    "profile_all",
    "read_store",
    "recall_at_k",
    "soft_truncate",
    "synth_store",
    "train",
    "view_similarity_scores",
    "write_store",
]
