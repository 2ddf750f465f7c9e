"""Hierarchical graph alignment for image-text retrieval, built on a small numpy autodiff core."""

from .align import LossConfig, SimilarityBreakdown, cosine, hierarchical_similarity, triplet_loss
from .evalkit import RecallReport, recall_report, similarity_matrix
from .ingest import DatasetManifest, RawFeatureSet, SyntheticConfig, generate_synthetic, load_dataset, read_blob, write_blob
from .model import HGANModel, ModelConfig
from .numgrad import DiffValue, check_gradient, no_grad
from .train import TrainConfig, lr_at, train

__all__ = [
    "DatasetManifest", "DiffValue", "HGANModel", "LossConfig", "ModelConfig", "RawFeatureSet", "RecallReport",
    "SimilarityBreakdown", "SyntheticConfig", "TrainConfig", "check_gradient", "cosine", "generate_synthetic",
    "hierarchical_similarity", "load_dataset", "lr_at", "no_grad", "read_blob", "recall_report",
    "similarity_matrix", "train", "triplet_loss", "write_blob",
]
