"""Finite-difference checks for every differentiable kernel and the full loss.

Each case builds a small random instance and returns a
:class:`~hgan.numgrad.GradCheckReport`. Inputs that meet ReLU or hinge kinks
are nudged away from zero so central differences stay valid.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numgrad as ng
from .align import LossConfig, cosine, triplet_loss
from .graph import ProjectionParams, build_image_graph, build_text_graph
from .ingest import RawFeatureSet
from .mfar import (
    AggregationLayerParams,
    RearrangeParams,
    aggregate_layer,
    attention_scores,
    mean_pool,
    rearrange_pool,
    rearrangement_coefficients,
)
from .model import HGANModel, ModelConfig
from .numgrad import BatchNormState, GradCheckReport, GRUParams, check_gradient


def _off_zero(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < gap, np.sign(x) * gap + (x == 0) * gap, x)


def _weights(rng, *shape):
    return rng.standard_normal(shape)


def tiny_instance(seed: int = 0, m: int = 3, k: int = 2, l: int = 4, D0: int = 6, D1: int = 5, B: int = 2):  # noqa: E741
    rng = np.random.default_rng(seed)
    return [
        RawFeatureSet(rng.standard_normal((m, D0)), rng.standard_normal((k, D0)), rng.standard_normal((l, D1)))
        for _ in range(B)
    ]


def full_loss_check(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, mfa_only: bool = False) -> GradCheckReport:
    """Gradient of the batch triplet loss w.r.t. every model parameter (m=3, k=2, l=4, D=8, H=2, M=1, B=2)."""
    samples = tiny_instance(seed)
    model = HGANModel(ModelConfig(D0=6, D1=5, D=8, heads=2, layers=1, d_p=4, gru_hidden=3, mfa_only=mfa_only), seed=seed)
    loss_cfg = LossConfig(margin=0.2)

    def loss():
        S = model.batch_similarity(
            [s.global_grid for s in samples], [s.regions for s in samples], [s.tokens for s in samples], loss_cfg
        )
        return triplet_loss(S, loss_cfg)

    return check_gradient(loss, model.parameters(), h=h, tol=tol)


def kernel_cases(seed: int = 0) -> dict[str, Callable[[float], GradCheckReport]]:
    rng = np.random.default_rng(seed)
    bn = BatchNormState.create(4)
    bn_eval = BatchNormState.create(4)
    bn_eval.running_mean = rng.standard_normal(4)
    bn_eval.running_var = rng.uniform(0.5, 2.0, 4)
    gru = GRUParams.init(3, 4, rng)
    layer = AggregationLayerParams.init(8, 2, rng)
    rp = RearrangeParams.init(4, 3, rng)
    mask = np.array([[True, True, True, True], [True, True, False, False]])
    proj_rng = np.random.default_rng(seed + 1)
    raw = tiny_instance(seed)[0]

    bn_weights = rng.standard_normal((5, 4))
    bn_masked_weights = rng.standard_normal((2, 4, 4))
    att_weights = rng.standard_normal((2, 2, 4, 4))
    agg_weights = rng.standard_normal((2, 4, 8))

    def bn_train(x, g, b):
        bn.gamma, bn.beta = g, b
        return ng.sum(ng.batch_norm(x, bn, "train") * bn_weights)

    def bn_masked(x):
        return ng.sum(ng.batch_norm(x, BatchNormState.create(4), "train", mask) * bn_masked_weights)

    def bn_eval_case(x, g, b):
        bn_eval.gamma, bn_eval.beta = g, b
        return ng.sum(ng.square(ng.batch_norm(x, bn_eval, "eval")))

    def gru_case(x, h0, *weights):
        p = GRUParams(*weights)
        return ng.sum(ng.square(ng.gru_cell(x, h0, p)))

    gru_arrays = {f"gru.{k}": v.value + 0.1 * rng.standard_normal(v.shape) for k, v in gru.named().items()}

    def attention_case(x, wq, wk):
        layer.wq, layer.wk = wq, wk
        return ng.sum(attention_scores(x, layer, mask) * att_weights)

    def aggregate_case(x, wq, wk, wv, wo):
        layer.wq, layer.wk, layer.wv, layer.wo = wq, wk, wv, wo
        return ng.sum(ng.square(aggregate_layer(x, layer, "train", mask)) * agg_weights)

    def coeff_case(w, b):
        rp.mlp_w, rp.mlp_b = w, b
        return ng.sum(rearrangement_coefficients(5, rp) * np.arange(1.0, 6.0))

    def graph_case(w_g, w_l, w_s):
        p = ProjectionParams(w_g, np.zeros(4), w_l, np.zeros(4), w_s, np.zeros(4))
        img = build_image_graph(raw, p)
        txt = build_text_graph(raw, p)
        return cosine(mean_pool(img.nodes), mean_pool(txt.nodes))

    x44 = _off_zero(rng.standard_normal((4, 4)))
    return {
        "affine": lambda tol: check_gradient(
            lambda x, W, b: ng.sum(ng.square(ng.affine(x, W, b))),
            {"x": _weights(rng, 3, 4), "W": _weights(rng, 2, 4), "b": _weights(rng, 2)}, tol=tol),
        "matmul": lambda tol: check_gradient(
            lambda a, b: ng.sum(ng.square(a @ b)), {"a": _weights(rng, 2, 3, 4), "b": _weights(rng, 4, 5)}, tol=tol),
        "softmax_rows": lambda tol: check_gradient(
            lambda e: ng.sum(ng.softmax_rows(e) * np.arange(16.0).reshape(4, 4)), _weights(rng, 4, 4), tol=tol),
        "relu": lambda tol: check_gradient(lambda x: ng.sum(ng.square(ng.relu(x))), x44, tol=tol),
        "sigmoid": lambda tol: check_gradient(lambda x: ng.sum(ng.sigmoid(x) * x), _weights(rng, 5), tol=tol),
        "tanh": lambda tol: check_gradient(lambda x: ng.sum(ng.tanh(x) * x), _weights(rng, 5), tol=tol),
        "sqrt_div": lambda tol: check_gradient(
            lambda x, y: ng.sum(ng.sqrt(x) / y), {"x": rng.uniform(0.5, 2, 4), "y": rng.uniform(0.5, 2, 4)}, tol=tol),
        "max": lambda tol: check_gradient(lambda x: ng.sum(ng.max(x, axis=1) * np.arange(1.0, 5.0)), x44, tol=tol),
        "concat_stack_getitem": lambda tol: check_gradient(
            lambda a, b: ng.sum(ng.square(ng.stack([ng.concat([a, b], axis=0)[1:4], b[:3] * 2.0]))),
            {"a": _weights(rng, 2, 3), "b": _weights(rng, 3, 3)}, tol=tol),
        "l2_normalize": lambda tol: check_gradient(
            lambda x: ng.sum(ng.l2_normalize(x) * np.arange(12.0).reshape(3, 4)), _weights(rng, 3, 4), tol=tol),
        "batch_norm_train": lambda tol: check_gradient(
            bn_train, {"x": _weights(rng, 5, 4), "gamma": rng.uniform(0.5, 1.5, 4), "beta": _weights(rng, 4)}, tol=tol),
        "batch_norm_masked": lambda tol: check_gradient(bn_masked, _weights(rng, 2, 4, 4), tol=tol),
        "batch_norm_eval": lambda tol: check_gradient(
            bn_eval_case, {"x": _weights(rng, 5, 4), "gamma": _weights(rng, 4), "beta": _weights(rng, 4)}, tol=tol),
        "gru_cell": lambda tol: check_gradient(
            gru_case, {"x": _weights(rng, 3), "h": rng.uniform(-0.9, 0.9, 4), **gru_arrays}, tol=tol),
        "attention_scores": lambda tol: check_gradient(
            attention_case,
            {"x": _weights(rng, 2, 4, 8), "wq": 0.5 * _weights(rng, 8, 8), "wk": 0.5 * _weights(rng, 8, 8)}, tol=tol),
        "aggregate_layer": lambda tol: check_gradient(
            aggregate_case,
            {"x": _weights(rng, 2, 4, 8), "wq": 0.3 * _weights(rng, 8, 8), "wk": 0.3 * _weights(rng, 8, 8),
             "wv": 0.3 * _weights(rng, 8, 8), "wo": 0.3 * _weights(rng, 8, 8)}, tol=tol),
        "rearrangement_coefficients": lambda tol: check_gradient(
            coeff_case, {"w": _weights(rng, 1, 6), "b": _weights(rng, 1)}, tol=tol),
        "rearrangement_gru": lambda tol: check_gradient(
            lambda: ng.sum(rearrangement_coefficients(4, rp) * np.arange(1.0, 5.0)), rp.named(), tol=tol),
        "rearrange_pool": lambda tol: check_gradient(
            lambda x, t: ng.sum(ng.square(rearrange_pool(x, ng.softmax(t), mask))),
            {"x": _weights(rng, 2, 4, 3), "t": _weights(rng, 2, 4)}, tol=tol),
        "mean_pool": lambda tol: check_gradient(
            lambda x: ng.sum(ng.square(mean_pool(x, mask))), _weights(rng, 2, 4, 3), tol=tol),
        "cosine": lambda tol: check_gradient(
            lambda u, v: cosine(u, v), {"u": _weights(rng, 5), "v": _weights(rng, 5)}, tol=tol),
        "graph_projection": lambda tol: check_gradient(
            graph_case,
            {"w_g": _weights(proj_rng, 4, 6), "w_l": _weights(proj_rng, 4, 6), "w_s": _weights(proj_rng, 4, 5)},
            tol=tol),
        "triplet_loss": lambda tol: check_gradient(
            lambda S: triplet_loss(S, LossConfig(margin=0.2)), np.array([[0.5, 0.45, 0.1], [0.33, 0.2, 0.6], [0.0, 0.9, 0.4]]),
            tol=tol),
    }


def run_suite(tol: float = 1e-4, seed: int = 0) -> dict[str, GradCheckReport]:
    reports = {name: case(tol) for name, case in kernel_cases(seed).items()}
    reports["full_loss"] = full_loss_check(seed, tol)
    reports["full_loss_mfa_only"] = full_loss_check(seed, tol, mfa_only=True)
    return reports
