"""Multi-granularity feature aggregation and rearrangement.

``M`` multi-head attention aggregation layers refine the node features of a
graph, then a rearrangement pool sorts every channel across nodes and takes a
weighted sum of the order statistics. The weights come from a bidirectional
GRU run over sinusoidal position codes, so they depend on the node count only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numgrad as ng
from .graph import ConfigError, FeatureGraph, uniform_init
from .numgrad import BatchNormState, DiffValue, GRUParams


@dataclass
class AggregationLayerParams:
    """One attention aggregation layer.

    The per-head projections are stored stacked: rows ``h*d:(h+1)*d`` of
    ``wq``/``wk``/``wv`` are head ``h``'s d x D matrix, with ``d = D / heads``.
    """

    wq: DiffValue
    wk: DiffValue
    wv: DiffValue
    wo: DiffValue
    bn: BatchNormState
    heads: int

    @classmethod
    def init(cls, D: int, heads: int, rng: np.random.Generator, name: str = "agg") -> "AggregationLayerParams":
        if heads < 1 or D % heads:
            raise ConfigError(f"heads={heads} must divide D={D}")
        return cls(
            wq=ng.parameter(uniform_init(rng, D, D), f"{name}.wq"),
            wk=ng.parameter(uniform_init(rng, D, D), f"{name}.wk"),
            wv=ng.parameter(uniform_init(rng, D, D), f"{name}.wv"),
            wo=ng.parameter(uniform_init(rng, D, D), f"{name}.wo"),
            bn=BatchNormState.create(D, name=f"{name}.bn"),
            heads=heads,
        )

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    def named(self) -> dict[str, DiffValue]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta}


@dataclass
class RearrangeParams:
    d_p: int
    forward: GRUParams
    backward: GRUParams
    mlp_w: DiffValue  # 1 x 2Dh
    mlp_b: DiffValue  # 1

    @classmethod
    def init(cls, d_p: int, hidden: int, rng: np.random.Generator, name: str = "rearrange") -> "RearrangeParams":
        if d_p % 2:
            raise ConfigError(f"positional dimension d_p={d_p} must be even")
        return cls(
            d_p=d_p,
            forward=GRUParams.init(d_p, hidden, rng, f"{name}.gru_fwd"),
            backward=GRUParams.init(d_p, hidden, rng, f"{name}.gru_bwd"),
            mlp_w=ng.parameter(uniform_init(rng, 1, 2 * hidden), f"{name}.mlp_w"),
            mlp_b=ng.parameter(np.zeros(1), f"{name}.mlp_b"),
        )

    @property
    def hidden(self) -> int:
        return self.forward.u_z.shape[0]

    def named(self) -> dict[str, DiffValue]:
        out = {f"gru_fwd.{k}": v for k, v in self.forward.named().items()}
        out.update({f"gru_bwd.{k}": v for k, v in self.backward.named().items()})
        out.update({"mlp_w": self.mlp_w, "mlp_b": self.mlp_b})
        return out


@dataclass
class MFARParams:
    layers: list[AggregationLayerParams]
    rearrange: RearrangeParams
    mfa_only: bool = False

    @classmethod
    def init(cls, D: int, heads: int, n_layers: int, d_p: int, hidden: int,
             rng: np.random.Generator, name: str, mfa_only: bool = False) -> "MFARParams":
        if n_layers < 1:
            raise ConfigError("MFAR needs at least one aggregation layer")
        layers = [AggregationLayerParams.init(D, heads, rng, f"{name}.layer{i}") for i in range(n_layers)]
        return cls(layers, RearrangeParams.init(d_p, hidden, rng, f"{name}.rearrange"), mfa_only)

    def named(self, include_rearrange: Optional[bool] = None) -> dict[str, DiffValue]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.named().items()})
        if include_rearrange if include_rearrange is not None else not self.mfa_only:
            out.update({f"rearrange.{k}": v for k, v in self.rearrange.named().items()})
        return out


# attention aggregation ---------------------------------------------------------------

def _split_heads(x: DiffValue, heads: int) -> DiffValue:
    # (..., N, D) -> (..., H, N, d)
    lead = x.ndim - 2
    d = x.shape[-1] // heads
    x = ng.reshape(x, x.shape[:-1] + (heads, d))
    return ng.transpose(x, list(range(lead)) + [lead + 1, lead, lead + 2])


def _merge_heads(x: DiffValue) -> DiffValue:
    # (..., H, N, d) -> (..., N, H*d)
    lead = x.ndim - 3
    x = ng.transpose(x, list(range(lead)) + [lead + 1, lead, lead + 2])
    return ng.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _key_mask(mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if mask is None else mask[..., None, None, :]


def attention_scores(nodes, layer: AggregationLayerParams, mask: Optional[np.ndarray] = None) -> DiffValue:
    """Per-head attention weights, shape (..., H, N, N); row ``i`` sums to 1 over valid ``j``."""
    nodes = ng.as_value(nodes)
    q = _split_heads(ng.matmul(nodes, ng.transpose(layer.wq, (1, 0))), layer.heads)
    k = _split_heads(ng.matmul(nodes, ng.transpose(layer.wk, (1, 0))), layer.heads)
    e = ng.matmul(q, ng.swapaxes(k, -1, -2)) / np.sqrt(layer.head_dim)
    return ng.softmax(e, axis=-1, mask=_key_mask(mask))


def aggregate_layer(nodes, layer: AggregationLayerParams, mode: str = "train",
                    mask: Optional[np.ndarray] = None) -> DiffValue:
    """Attention-weighted neighbour sum per head, head mix, ReLU, then batch norm."""
    nodes = ng.as_value(nodes)
    alpha = attention_scores(nodes, layer, mask)
    v = _split_heads(ng.matmul(nodes, ng.transpose(layer.wv, (1, 0))), layer.heads)
    mixed = ng.matmul(_merge_heads(ng.matmul(alpha, v)), ng.transpose(layer.wo, (1, 0)))
    return ng.batch_norm(ng.relu(mixed), layer.bn, mode, mask)


# rearrangement ---------------------------------------------------------------------------

def positional_encoding(n: int, d_p: int) -> np.ndarray:
    """Sinusoidal codes for positions 0..n-1: sin on even channels, cos on odd."""
    if d_p % 2:
        raise ConfigError(f"positional dimension d_p={d_p} must be even")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d_p, 2, dtype=np.float64) / d_p)
    out = np.empty((n, d_p))
    out[:, 0::2] = np.sin(pos / freq)
    out[:, 1::2] = np.cos(pos / freq)
    return out


def _run_gru(inputs: np.ndarray, p: GRUParams, reverse: bool) -> list[DiffValue]:
    h = ng.DiffValue(np.zeros(p.u_z.shape[0]))
    states: list[DiffValue] = [None] * len(inputs)  # type: ignore[list-item]
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    for i in order:
        h = ng.gru_cell(inputs[i], h, p)
        states[i] = h
    return states


def rearrangement_coefficients(n: int, rp: RearrangeParams) -> DiffValue:
    """Length-``n`` weights over order statistics, summing to 1."""
    if n < 1:
        raise ValueError("need at least one node")
    codes = positional_encoding(n, rp.d_p)
    fwd = ng.stack(_run_gru(codes, rp.forward, reverse=False))
    bwd = ng.stack(_run_gru(codes, rp.backward, reverse=True))
    scores = ng.affine(ng.concat([fwd, bwd], axis=1), rp.mlp_w, rp.mlp_b)
    return ng.softmax(ng.reshape(scores, (n,)), axis=-1)


def rearrange_pool(nodes, theta, mask: Optional[np.ndarray] = None) -> DiffValue:
    """Per channel, sort node values descending and weight the i-th largest by ``theta[i]``.

    ``nodes`` is (..., N, D); ``theta`` is (..., N) and must be zero beyond
    each graph's valid node count. Masked rows sort after every real value.
    """
    nodes, theta = ng.as_value(nodes), ng.as_value(theta)
    x = nodes.value
    keyed = x if mask is None else np.where(mask[..., None], x, -np.inf)
    order = np.argsort(-keyed, axis=-2, kind="stable")
    ranked = np.take_along_axis(x, order, axis=-2)
    if mask is not None:
        ranked = np.where(np.sort(mask, axis=-1)[..., ::-1, None], ranked, 0.0)
    w = np.broadcast_to(theta.value, x.shape[:-1])[..., None]
    out = (w * ranked).sum(axis=-2)

    def backward(g):
        g = g[..., None, :]
        d_nodes = np.zeros_like(x)
        np.put_along_axis(d_nodes, order, np.broadcast_to(w * g, x.shape), axis=-2)
        if mask is not None:
            d_nodes = d_nodes * mask[..., None]
        return d_nodes, (g * ranked).sum(axis=-1)

    return ng.make_op(out, (nodes, theta), backward)


def mean_pool(nodes, mask: Optional[np.ndarray] = None) -> DiffValue:
    """Average over valid nodes."""
    nodes = ng.as_value(nodes)
    if mask is None:
        return ng.sum(nodes, axis=-2) / float(nodes.shape[-2])
    counts = mask.sum(axis=-1, keepdims=True).astype(np.float64)
    return ng.sum(nodes * mask[..., None], axis=-2) / counts


def batch_coefficients(mask: np.ndarray, rp: RearrangeParams) -> DiffValue:
    """B x Nmax coefficient matrix: each row holds theta(N_b) followed by zeros."""
    counts = mask.sum(axis=-1)
    n_max = mask.shape[-1]
    cache = {}
    rows = []
    for n in counts:
        n = int(n)
        if n not in cache:
            theta = rearrangement_coefficients(n, rp)
            cache[n] = theta if n == n_max else ng.concat([theta, np.zeros(n_max - n)], axis=0)
        rows.append(cache[n])
    return ng.stack(rows, axis=0)


@dataclass
class MFAROutput:
    pooled: DiffValue
    nodes: DiffValue
    theta: Optional[DiffValue] = field(default=None)


def mfar_forward(graph: FeatureGraph, params: MFARParams, mode: str = "train") -> MFAROutput:
    """Aggregate ``M`` times, then pool to one vector per graph."""
    x = graph.nodes
    for layer in params.layers:
        x = aggregate_layer(x, layer, mode, graph.mask)
    if params.mfa_only:
        return MFAROutput(mean_pool(x, graph.mask), x)
    if graph.mask is None:
        theta = rearrangement_coefficients(x.shape[-2], params.rearrange)
    else:
        theta = batch_coefficients(graph.mask, params.rearrange)
    return MFAROutput(rearrange_pool(x, theta, graph.mask), x, theta)
