"""Retrieval evaluation: similarity matrices, Recall@K, and diagnostic exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numgrad as ng
from .align import LossConfig, cosine_grid, similarity_grid
from .ingest import Dataset
from .model import HGANModel

KS = (1, 5, 10)
RECALL_FIELDS = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum")


class DataError(ValueError):
    """Evaluation inputs that do not line up (e.g. a caption without an image)."""


@dataclass
class RecallReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float
    i2t_ranks: np.ndarray = field(repr=False)
    t2i_ranks: np.ndarray = field(repr=False)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in RECALL_FIELDS}

    def to_json(self) -> str:
        doc = self.metrics()
        doc["i2t_ranks"] = self.i2t_ranks.tolist()
        doc["t2i_ranks"] = self.t2i_ranks.tolist()
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECALL_FIELDS)
        writer.writerow([f"{getattr(self, k):.4f}" for k in RECALL_FIELDS])
        return buf.getvalue()


def _report(i2t_ranks: np.ndarray, t2i_ranks: np.ndarray, ks: Sequence[int]) -> RecallReport:
    vals = [100.0 * np.mean(i2t_ranks < k) for k in ks] + [100.0 * np.mean(t2i_ranks < k) for k in ks]
    return RecallReport(*vals, float(np.sum(vals)), i2t_ranks, t2i_ranks)


def _check_groups(S: np.ndarray, caption_image: np.ndarray) -> np.ndarray:
    caption_image = np.asarray(caption_image)
    n_img, n_cap = S.shape
    if caption_image.shape != (n_cap,):
        raise DataError(f"{caption_image.shape[0]} caption labels for {n_cap} caption columns")
    if np.any(caption_image < 0) or np.any(caption_image >= n_img):
        raise DataError("caption mapped to no image group")
    return caption_image.astype(np.int64)


def recall_report(S: np.ndarray, caption_image: np.ndarray, ks: Sequence[int] = KS) -> RecallReport:
    """Recall@K both ways from an images x captions score matrix.

    Ranks are 0-based; an equal score ranks ahead only if its index is lower.
    Image-to-text uses the best-ranked caption of the image's group.
    """
    S = np.asarray(S, dtype=np.float64)
    caption_image = _check_groups(S, caption_image)
    n_img, n_cap = S.shape
    cols = np.arange(n_cap)

    i2t = np.full(n_img, n_cap, dtype=np.int64)
    for a in range(n_img):
        gt = np.flatnonzero(caption_image == a)
        if gt.size == 0:
            continue
        row = S[a]
        vals = row[gt][:, None]
        ranks = (row[None, :] > vals).sum(1) + ((row[None, :] == vals) & (cols[None, :] < gt[:, None])).sum(1)
        i2t[a] = ranks.min()

    rows = np.arange(n_img)[:, None]
    vals = S[caption_image, cols][None, :]
    t2i = (S > vals).sum(0) + ((S == vals) & (rows < caption_image[None, :])).sum(0)
    return _report(i2t, t2i.astype(np.int64), ks)


def recall_report_bruteforce(S: np.ndarray, caption_image: np.ndarray, ks: Sequence[int] = KS) -> RecallReport:
    """Reference implementation: fully sort every row and column."""
    S = np.asarray(S, dtype=np.float64)
    caption_image = _check_groups(S, caption_image)
    n_img, n_cap = S.shape
    i2t = np.empty(n_img, dtype=np.int64)
    for a in range(n_img):
        order = np.lexsort((np.arange(n_cap), -S[a]))
        hits = np.flatnonzero(caption_image[order] == a)
        i2t[a] = hits[0] if hits.size else n_cap
    t2i = np.empty(n_cap, dtype=np.int64)
    for c in range(n_cap):
        order = np.lexsort((np.arange(n_img), -S[:, c]))
        t2i[c] = int(np.flatnonzero(order == caption_image[c])[0])
    return _report(i2t, t2i, ks)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def embed_dataset(model: HGANModel, data: Dataset, chunk: int = 256) -> tuple[dict, dict]:
    """Eval-mode summaries for every image and caption, as numpy arrays."""
    img: dict[str, list] = {}
    txt: dict[str, list] = {}
    with ng.no_grad():
        for sl in _chunks(data.n_images, chunk):
            levels = model.encode_images(data.global_grids[sl], data.regions[sl], mode="eval")
            for k, v in levels.items():
                if isinstance(v, ng.DiffValue):
                    img.setdefault(k, []).append(v.value)
        for sl in _chunks(data.n_captions, chunk):
            levels = model.encode_texts(data.tokens[sl], mode="eval")
            for k, v in levels.items():
                if isinstance(v, ng.DiffValue):
                    txt.setdefault(k, []).append(v.value)
    return ({k: np.concatenate(v) for k, v in img.items()}, {k: np.concatenate(v) for k, v in txt.items()})


def similarity_matrix(model: HGANModel, data: Dataset, loss_cfg: LossConfig) -> np.ndarray:
    """images x captions total similarity, with every embedding computed once in eval mode."""
    img, txt = embed_dataset(model, data)
    with ng.no_grad():
        return similarity_grid(img, txt, loss_cfg).value


def evaluate(model: HGANModel, data: Dataset, loss_cfg: LossConfig, folds: Optional[list[list[str]]] = None):
    """Recall report for ``data``; with ``folds`` the six recalls are averaged over the folds."""
    if not folds:
        return recall_report(similarity_matrix(model, data, loss_cfg), data.caption_image)
    reports = [evaluate(model, data.subset_groups(fold), loss_cfg) for fold in folds]
    vals = [float(np.mean([getattr(r, k) for r in reports])) for k in RECALL_FIELDS[:-1]]
    return RecallReport(
        *vals, float(np.sum(vals)),
        np.concatenate([r.i2t_ranks for r in reports]),
        np.concatenate([r.t2i_ranks for r in reports]),
    )


def word_similarity(model: HGANModel, grid: np.ndarray, regions: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Normalized image-word scores: softmax over tokens of cos(token_i, image vector)."""
    with ng.no_grad():
        image_vec = model.encode_images([grid], [regions], mode="eval")["pooled"]
        projected = ng.affine(tokens, model.proj.w_s, model.proj.b_s)
        scores = cosine_grid(projected, image_vec).value[:, 0]
    return ng.softmax(scores).value


def word_similarity_csv(weights: np.ndarray, labels: Optional[Sequence[str]] = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token", "similarity"])
    for i, w in enumerate(weights):
        writer.writerow([labels[i] if labels is not None else i, f"{w:.8f}"])
    return buf.getvalue()
