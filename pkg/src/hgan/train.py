"""Adam, the learning-rate schedule, checkpoints, and the training loop."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .align import LossConfig, triplet_loss
from .graph import ConfigError
from .ingest import Dataset, read_blob, write_blob
from .model import HGANModel, ModelConfig
from .numgrad import DiffValue

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A loss or gradient turned NaN/Inf."""


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 256
    base_lr: float = 2e-4
    decay: float = 0.1
    decay_every: int = 6
    warmup_fraction: float = 0.1
    margin: float = 0.2
    M: int = 2
    H: int = 8
    D: int = 1024
    d_p: int = 32
    gru_hidden: int = 32
    grad_clip: Optional[float] = 2.0
    reduction: str = "sum"
    seed: int = 0
    target_rsum: Optional[float] = None

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so every positive has a negative")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.H < 1 or self.D % self.H:
            raise ConfigError(f"H={self.H} must divide D={self.D}")
        if self.epochs < 1 or self.decay_every < 1:
            raise ConfigError("epochs and decay_every must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")


def lr_at(step: int, total_steps: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then step decay per epoch."""
    if step < 0:
        raise ValueError("step must be >= 0")
    # dividing by the inverse keeps 2e-4 -> 2e-5 -> 2e-6 exact in binary floating point
    lr = cfg.base_lr / (1.0 / cfg.decay) ** (epoch // cfg.decay_every)
    warmup = cfg.warmup_fraction * total_steps
    if step < warmup:
        lr *= step / warmup
    return lr


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, DiffValue], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to every named parameter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} (norm {np.linalg.norm(g)})")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# checkpoints -----------------------------------------------------------------------------

def save_checkpoint(path, model: HGANModel, opt: OptimizerState, run_config: dict, epoch: int) -> None:
    """Directory with ``checkpoint.json`` plus one 64-bit blob per array."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "optim").mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    for name, arr in state.items():
        write_blob(path / "params" / f"{name}.hgt", arr, precision=64)
    for name in opt.m:
        write_blob(path / "optim" / f"{name}.m.hgt", opt.m[name], precision=64)
        write_blob(path / "optim" / f"{name}.v.hgt", opt.v[name], precision=64)
    header = {
        "model": model.config_dict(),
        "run": run_config,
        "epoch": epoch,
        "step": opt.step,
        "seed": run_config.get("seed"),
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "params": sorted(opt.m)},
        "params": sorted(state),
    }
    (path / "checkpoint.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[HGANModel, OptimizerState, dict]:
    path = Path(path)
    header = json.loads((path / "checkpoint.json").read_text())
    model = HGANModel(ModelConfig(**header["model"]))
    model.load_state_dict({name: read_blob(path / "params" / f"{name}.hgt") for name in header["params"]})
    o = header["optimizer"]
    opt = OptimizerState(step=header["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    for name in o["params"]:
        opt.m[name] = read_blob(path / "optim" / f"{name}.m.hgt")
        opt.v[name] = read_blob(path / "optim" / f"{name}.v.hgt")
    return model, opt, header


# training loop -----------------------------------------------------------------------------

METRIC_COLUMNS = ["step", "epoch", "lr", "loss", "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum"]


@dataclass
class TrainResult:
    model: HGANModel
    optimizer: OptimizerState
    losses: list[float]
    epoch_rsum: list[float]
    epoch_reports: list = field(default_factory=list)


def model_config_for(train_cfg: TrainConfig, data: Dataset, **ablation) -> ModelConfig:
    return ModelConfig(
        D0=data.manifest.D0, D1=data.manifest.D1, D=train_cfg.D, heads=train_cfg.H, layers=train_cfg.M,
        d_p=train_cfg.d_p, gru_hidden=train_cfg.gru_hidden, **ablation,
    )


def epoch_batches(data: Dataset, batch_size: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled (images, captions) index batches; one random caption per image, no batch smaller than 2."""
    order = rng.permutation(data.n_images)
    captions = np.array([rng.choice(data.captions_of(int(i))) for i in order], dtype=np.int64)
    batches = [
        (order[s : s + batch_size], captions[s : s + batch_size]) for s in range(0, len(order), batch_size)
    ]
    if len(batches) > 1 and len(batches[-1][0]) < 2:
        imgs, caps = batches.pop()
        batches[-1] = (np.concatenate([batches[-1][0], imgs]), np.concatenate([batches[-1][1], caps]))
    return batches


def train_step(model: HGANModel, data: Dataset, images, captions, loss_cfg: LossConfig,
               params: dict[str, DiffValue]) -> tuple[DiffValue, dict[str, np.ndarray]]:
    model.zero_grad()
    S = model.batch_similarity(
        [data.global_grids[i] for i in images],
        [data.regions[i] for i in images],
        [data.tokens[c] for c in captions],
        loss_cfg,
        mode="train",
    )
    loss = triplet_loss(S, loss_cfg)
    if not np.isfinite(loss.value):
        raise NonFiniteError(f"non-finite loss {float(loss.value)}")
    loss.backward()
    return loss, {k: p.adjoint for k, p in params.items()}


def train(
    data: Dataset,
    cfg: TrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    val_data: Optional[Dataset] = None,
    out_dir=None,
    run_config: Optional[dict] = None,
    use_global: bool = True,
    use_local: bool = True,
    mfa_only: bool = False,
) -> TrainResult:
    """Train from scratch; logs per-iteration loss and per-epoch validation recall."""
    from .evalkit import evaluate

    cfg.validate()
    if data.manifest.split != "train":
        raise ConfigError(f"training manifest has split {data.manifest.split!r}, expected 'train'")
    if val_data is not None and (val_data.manifest.D0, val_data.manifest.D1) != (data.manifest.D0, data.manifest.D1):
        raise ConfigError("validation manifest feature dims differ from the training manifest")
    if data.n_images < 2:
        raise ConfigError("need at least two images to form negatives")
    loss_cfg = loss_cfg or LossConfig(margin=cfg.margin, reduction=cfg.reduction)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = HGANModel(model_config_for(cfg, data, use_global=use_global, use_local=use_local, mfa_only=mfa_only),
                      seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    params = model.parameters()
    opt = OptimizerState()
    run_config = dict(run_config or asdict(cfg))

    steps_per_epoch = len(epoch_batches(data, cfg.batch_size, np.random.default_rng(0)))
    total_steps = steps_per_epoch * cfg.epochs
    result = TrainResult(model, opt, [], [])

    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        fh.write(f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)

    try:
        step = 0
        for epoch in range(cfg.epochs):
            for images, captions in epoch_batches(data, cfg.batch_size, rng):
                lr = lr_at(step, total_steps, epoch, cfg)
                loss, grads = train_step(model, data, images, captions, loss_cfg, params)
                if cfg.grad_clip is not None:
                    clip_gradients(grads, cfg.grad_clip)
                adam_step(params, grads, opt, lr)
                result.losses.append(float(loss.value))
                if writer:
                    writer.writerow([step, epoch, f"{lr:.6e}", f"{float(loss.value):.8f}"] + [""] * 7)
                step += 1
            report = evaluate(model, val_data, loss_cfg) if val_data is not None else None
            if report is not None:
                result.epoch_reports.append(report)
                result.epoch_rsum.append(report.rsum)
                log.info("epoch %d loss %.4f rsum %.2f", epoch, result.losses[-1], report.rsum)
                if writer:
                    writer.writerow([step - 1, epoch, "", ""] + [f"{v:.4f}" for v in report.metrics().values()])
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoint", model, opt, run_config, epoch)
            if report is not None and cfg.target_rsum is not None and report.rsum >= cfg.target_rsum:
                break
    finally:
        if fh is not None:
            fh.close()
    return result


def train_config_from_dict(doc: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in doc.items() if k in known})
