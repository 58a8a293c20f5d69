"""Training-data density estimation over embedding vectors."""

from .embed import EmbedderSpec, EmbeddingMatrix, cosine_sim, embed_batch, read_matrix, toy_embed, write_matrix
from .kde import (
    KdeResult,
    KernelSpec,
    avg_knn_distance,
    combine_split,
    decomposed_kde,
    exact_kde,
    exact_kde_batch,
    kernel_eval,
    random_kde,
)
from .knn import NeighborList, batch_query, query_knn, recall_at_k

__version__ = "0.1.0"
