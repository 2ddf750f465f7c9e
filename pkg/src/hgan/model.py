"""The full model: projections plus one MFAR stack per modality."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numgrad as ng
from .align import LossConfig, similarity_grid
from .graph import ConfigError, ProjectionParams, build_image_batch, build_text_batch
from .mfar import MFARParams, mean_pool, mfar_forward
from .numgrad import DiffValue


@dataclass
class ModelConfig:
    D0: int
    D1: int
    D: int = 1024
    heads: int = 8
    layers: int = 2
    d_p: int = 32
    gru_hidden: int = 32
    use_global: bool = True
    use_local: bool = True
    mfa_only: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.D < 1 or self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"heads={self.heads} must divide D={self.D}")
        if self.layers < 1:
            raise ConfigError("layers (M) must be >= 1")
        if self.d_p % 2:
            raise ConfigError("d_p must be even")
        if not (self.use_global or self.use_local):
            raise ConfigError("at least one of use_global / use_local must be set")


class HGANModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.proj = ProjectionParams.init(cfg.D0, cfg.D1, cfg.D, rng)
        self.image_mfar = MFARParams.init(cfg.D, cfg.heads, cfg.layers, cfg.d_p, cfg.gru_hidden, rng, "image", cfg.mfa_only)
        self.text_mfar = MFARParams.init(cfg.D, cfg.heads, cfg.layers, cfg.d_p, cfg.gru_hidden, rng, "text", cfg.mfa_only)
        for stack in (self.image_mfar, self.text_mfar):
            for layer in stack.layers:
                layer.bn.momentum = cfg.bn_momentum
                layer.bn.eps = cfg.bn_eps

    def parameters(self) -> dict[str, DiffValue]:
        """Trainable leaves by dotted name (rearrangement weights excluded in mfa_only mode)."""
        out = {f"proj.{k}": v for k, v in self.proj.named().items()}
        out.update({f"image.{k}": v for k, v in self.image_mfar.named().items()})
        out.update({f"text.{k}": v for k, v in self.text_mfar.named().items()})
        return out

    def all_parameters(self) -> dict[str, DiffValue]:
        out = {f"proj.{k}": v for k, v in self.proj.named().items()}
        out.update({f"image.{k}": v for k, v in self.image_mfar.named(True).items()})
        out.update({f"text.{k}": v for k, v in self.text_mfar.named(True).items()})
        return out

    def batch_norms(self):
        for prefix, stack in (("image", self.image_mfar), ("text", self.text_mfar)):
            for i, layer in enumerate(stack.layers):
                yield f"{prefix}.layer{i}.bn", layer.bn

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.value.copy() for k, v in self.all_parameters().items()}
        for name, bn in self.batch_norms():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.all_parameters()
        expected = set(params)
        for name, _ in self.batch_norms():
            expected |= {f"{name}.running_mean", f"{name}.running_var"}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.value = np.array(state[k], dtype=np.float64)
        for name, bn in self.batch_norms():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.all_parameters().values():
            p.zero_grad()

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    # forward ---------------------------------------------------------------------------

    def encode_images(self, grids: Sequence[np.ndarray], regions: Sequence[np.ndarray], mode: str = "train") -> dict:
        """Image summaries (B x D each) for the three similarity levels."""
        graph = build_image_batch(grids, regions, self.proj, self.cfg.use_global, self.cfg.use_local)
        out = mfar_forward(graph, self.image_mfar, mode)
        levels = {
            "unified": mean_pool(graph.nodes, graph.mask),
            "pooled": out.pooled,
            "graph": graph,
        }
        if graph.local is not None:
            levels["local"] = mean_pool(graph.local, graph.local_mask)
        return levels

    def encode_texts(self, tokens: Sequence[np.ndarray], mode: str = "train") -> dict:
        graph = build_text_batch(tokens, self.proj)
        out = mfar_forward(graph, self.text_mfar, mode)
        return {"tokens": mean_pool(graph.nodes, graph.mask), "pooled": out.pooled, "graph": graph}

    def batch_similarity(self, grids, regions, tokens, loss_cfg: LossConfig, mode: str = "train") -> DiffValue:
        """B x B similarity of the images against the captions of one batch."""
        if loss_cfg.enable_s1 and not self.cfg.use_local:
            raise ConfigError("region-level similarity needs use_local")
        return similarity_grid(self.encode_images(grids, regions, mode), self.encode_texts(tokens, mode), loss_cfg)


def embed_numpy(levels: dict) -> dict[str, np.ndarray]:
    return {k: v.value for k, v in levels.items() if isinstance(v, ng.DiffValue)}
