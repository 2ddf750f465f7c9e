"""Projection of raw features into the shared space and feature-graph assembly.

Graphs are fully connected with self-loops, so a graph is just its node
matrix. Batched graphs carry a boolean ``mask`` over the node axis marking
real (non-padding) rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numgrad as ng
from .ingest import RawFeatureSet
from .numgrad import DiffValue


class ConfigError(ValueError):
    """Inconsistent model or run configuration."""


def uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, (rows, cols))


@dataclass
class ProjectionParams:
    w_g: DiffValue
    b_g: DiffValue
    w_l: DiffValue
    b_l: DiffValue
    w_s: DiffValue
    b_s: DiffValue

    @classmethod
    def init(cls, D0: int, D1: int, D: int, rng: np.random.Generator) -> "ProjectionParams":
        return cls(
            w_g=ng.parameter(uniform_init(rng, D, D0), "proj.w_g"),
            b_g=ng.parameter(np.zeros(D), "proj.b_g"),
            w_l=ng.parameter(uniform_init(rng, D, D0), "proj.w_l"),
            b_l=ng.parameter(np.zeros(D), "proj.b_l"),
            w_s=ng.parameter(uniform_init(rng, D, D1), "proj.w_s"),
            b_s=ng.parameter(np.zeros(D), "proj.b_s"),
        )

    def named(self) -> dict[str, DiffValue]:
        return {k: getattr(self, k) for k in ("w_g", "b_g", "w_l", "b_l", "w_s", "b_s")}


@dataclass
class FeatureGraph:
    """Node matrix (N x D, or B x N x D when batched) plus bookkeeping.

    For images the nodes are the projected global rows followed by the
    projected region rows; ``local`` keeps the region projection on its own
    because the region-level similarity needs it. For text ``local`` is the
    node matrix itself.
    """

    nodes: DiffValue
    modality: str
    global_count: int
    local_count: int
    mask: Optional[np.ndarray] = None
    local: Optional[DiffValue] = None
    local_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.nodes.shape[-2]

    @property
    def batched(self) -> bool:
        return self.nodes.ndim == 3


def pad_rows(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length row matrices into B x Nmax x D with a validity mask."""
    width = arrays[0].shape[1]
    n_max = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n_max, width))
    mask = np.zeros((len(arrays), n_max), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask


def _check_flags(use_global: bool, use_local: bool) -> None:
    if not (use_global or use_local):
        raise ConfigError("image graph needs at least one of use_global / use_local")


def build_image_graph(
    raw: RawFeatureSet, p: ProjectionParams, use_global: bool = True, use_local: bool = True
) -> FeatureGraph:
    _check_flags(use_global, use_local)
    parts, m, k = [], 0, 0
    local = None
    if use_global:
        parts.append(ng.affine(raw.global_grid, p.w_g, p.b_g))
        m = raw.global_grid.shape[0]
    if use_local:
        local = ng.affine(raw.regions, p.w_l, p.b_l)
        parts.append(local)
        k = raw.regions.shape[0]
    nodes = parts[0] if len(parts) == 1 else ng.concat(parts, axis=0)
    return FeatureGraph(nodes, "image", m, k, local=local)


def build_text_graph(raw: RawFeatureSet, p: ProjectionParams) -> FeatureGraph:
    nodes = ng.affine(raw.tokens, p.w_s, p.b_s)
    return FeatureGraph(nodes, "text", 0, raw.tokens.shape[0], local=nodes)


def build_image_batch(
    grids: Sequence[np.ndarray],
    regions: Sequence[np.ndarray],
    p: ProjectionParams,
    use_global: bool = True,
    use_local: bool = True,
) -> FeatureGraph:
    """Batched image graphs; global and region blocks are padded separately."""
    _check_flags(use_global, use_local)
    parts, masks = [], []
    m = k = 0
    local = local_mask = None
    if use_global:
        G, gmask = pad_rows(grids)
        parts.append(ng.affine(G, p.w_g, p.b_g) * gmask[..., None])
        masks.append(gmask)
        m = G.shape[1]
    if use_local:
        L, local_mask = pad_rows(regions)
        local = ng.affine(L, p.w_l, p.b_l) * local_mask[..., None]
        parts.append(local)
        masks.append(local_mask)
        k = L.shape[1]
    nodes = parts[0] if len(parts) == 1 else ng.concat(parts, axis=1)
    return FeatureGraph(nodes, "image", m, k, np.concatenate(masks, axis=1), local, local_mask)


def build_text_batch(tokens: Sequence[np.ndarray], p: ProjectionParams) -> FeatureGraph:
    S, mask = pad_rows(tokens)
    nodes = ng.affine(S, p.w_s, p.b_s) * mask[..., None]
    return FeatureGraph(nodes, "text", 0, S.shape[1], mask, nodes, mask)


def edge_weight(graph: FeatureGraph, i: int, j: int) -> np.ndarray:
    """Element-product edge between nodes ``i`` and ``j`` (diagnostic only)."""
    n = graph.size
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"edge ({i}, {j}) out of range for {n} nodes")
    nodes = graph.nodes.value
    return nodes[..., i, :] * nodes[..., j, :]
