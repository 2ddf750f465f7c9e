"""Three-level image-text similarity and the hardest-negative triplet loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numgrad as ng
from .graph import ConfigError
from .numgrad import DiffValue


@dataclass
class LossConfig:
    margin: float = 0.2
    enable_s1: bool = True
    enable_s2: bool = True
    enable_s3: bool = True
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if not self.enable_s3:
            raise ConfigError("the MFAR-level similarity (S3) cannot be disabled")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


@dataclass
class SimilarityBreakdown:
    s1: Optional[float]
    s2: Optional[float]
    s3: float
    total: float
    enable_s1: bool
    enable_s2: bool


def cosine(u, v) -> DiffValue:
    u, v = ng.as_value(u), ng.as_value(v)
    if u.shape != v.shape:
        raise ng.DimensionError(f"cosine of shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u.value), np.linalg.norm(v.value)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("degenerate vector: cosine of a zero-norm input")
    return ng.sum(u * v) / ng.sqrt(ng.sum(ng.square(u)) * ng.sum(ng.square(v)))


def _meanrows(x) -> DiffValue:
    return ng.mean(ng.as_value(x), axis=0)


def hierarchical_similarity(
    local, unified, pooled_image, tokens, pooled_text, cfg: LossConfig = LossConfig()
) -> SimilarityBreakdown:
    """Similarity of one image and one caption.

    ``local`` (k x D) and ``unified`` ((m+k) x D) are the projected image
    features, ``tokens`` (l x D) the projected caption; matrix levels compare
    row means. ``pooled_*`` are the MFAR outputs.
    """
    with ng.no_grad():
        t_mean = _meanrows(tokens)
        s1 = float(cosine(_meanrows(local), t_mean).value) if cfg.enable_s1 else None
        s2 = float(cosine(_meanrows(unified), t_mean).value) if cfg.enable_s2 else None
        s3 = float(cosine(pooled_image, pooled_text).value)
    total = s3 + (s1 or 0.0) + (s2 or 0.0)
    return SimilarityBreakdown(s1, s2, s3, total, cfg.enable_s1, cfg.enable_s2)


def cosine_grid(a, b) -> DiffValue:
    """All-pairs cosine between rows of ``a`` (Na x D) and ``b`` (Nb x D)."""
    return ng.matmul(ng.l2_normalize(a), ng.transpose(ng.l2_normalize(b), (1, 0)))


def similarity_grid(image_levels: dict, text_levels: dict, cfg: LossConfig) -> DiffValue:
    """Total similarity for every (image, caption) pair.

    ``image_levels`` maps ``"local"``, ``"unified"``, ``"pooled"`` to B_i x D
    summaries; ``text_levels`` maps ``"tokens"`` and ``"pooled"`` to B_t x D.
    """
    total = cosine_grid(image_levels["pooled"], text_levels["pooled"])
    if cfg.enable_s1:
        total = total + cosine_grid(image_levels["local"], text_levels["tokens"])
    if cfg.enable_s2:
        total = total + cosine_grid(image_levels["unified"], text_levels["tokens"])
    return total


def triplet_loss(S, cfg: LossConfig = LossConfig()) -> DiffValue:
    """Bidirectional hinge loss against the in-batch hardest negatives.

    ``S[a, b]`` is the similarity of image ``a`` and caption ``b``; the
    diagonal holds the matched pairs.
    """
    S = ng.as_value(S)
    B = S.shape[0]
    if S.ndim != 2 or S.shape[1] != B:
        raise ng.DimensionError(f"similarity matrix must be square, got {S.shape}")
    if B < 2:
        raise ValueError("triplet loss needs a batch of at least 2 to have negatives")
    off_diag = ~np.eye(B, dtype=bool)
    positives = S[np.arange(B), np.arange(B)]
    hardest_caption = ng.max(S, axis=1, where=off_diag)  # per image, over captions
    hardest_image = ng.max(S, axis=0, where=off_diag)  # per caption, over images
    cost = ng.relu(cfg.margin + hardest_caption - positives) + ng.relu(cfg.margin + hardest_image - positives)
    total = ng.sum(cost)
    return total / float(B) if cfg.reduction == "mean" else total
