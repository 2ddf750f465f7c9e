"""Command-line entry point: ``hgan {gen-data,train,eval,grad-check,embed,word-sim}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional


from .align import LossConfig
from .graph import ConfigError
from .ingest import FormatError, SyntheticConfig, generate_synthetic, load_dataset, write_blob
from .train import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything one run needs; serialized as a single flat JSON object."""

    train: TrainConfig = field(default_factory=TrainConfig)
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    output_dir: str = "runs/default"
    use_global: bool = True
    use_local: bool = True
    enable_s1: bool = True
    enable_s2: bool = True
    mfa_only: bool = False
    train_rearrangement: Optional[bool] = None

    def validate(self) -> None:
        self.train.validate()
        if not (self.use_global or self.use_local):
            raise ConfigError("use_global and use_local cannot both be false")
        if self.enable_s1 and not self.use_local:
            raise ConfigError("enable_s1 compares region features and needs use_local")
        if self.mfa_only and self.train_rearrangement:
            raise ConfigError("mfa_only uses uniform pooling; train_rearrangement must not be true")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self.train.margin, enable_s1=self.enable_s1, enable_s2=self.enable_s2,
            reduction=self.train.reduction,
        )

    def ablation(self) -> dict:
        return {"use_global": self.use_global, "use_local": self.use_local, "mfa_only": self.mfa_only}

    def to_dict(self) -> dict:
        doc = asdict(self.train)
        doc.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base: Optional[Path] = None) -> "RunConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        run_keys = {f.name for f in fields(cls)} - {"train"}
        unknown = set(doc) - train_keys - run_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            train=TrainConfig(**{k: v for k, v in doc.items() if k in train_keys}),
            **{k: v for k, v in doc.items() if k in run_keys},
        )
        if base is not None:
            for key in ("train_manifest", "val_manifest", "test_manifest", "output_dir"):
                value = getattr(cfg, key)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, key, str(base / value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Optional[list[str]] = None) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise FormatError("config file not found", path=path) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise UsageError(f"override {item!r} is not key=value")
            try:
                doc[key] = json.loads(raw)
            except json.JSONDecodeError:
                doc[key] = raw
        return cls.from_dict(doc, base=path.parent)


# commands ---------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        n_groups=args.groups, m=args.m, k=args.k, l=args.l, D0=args.d0, D1=args.d1, seed=args.seed,
        noise=args.noise, group_size=args.group_size, ragged=args.ragged, split=args.split,
    )
    manifest = generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.samples)} captions in {len(manifest.samples) // cfg.group_size} groups to {args.out}")
    return EXIT_OK


def _load_run(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_run(args)
    if cfg.train_manifest is None:
        raise UsageError("config has no train_manifest")
    data = load_dataset(cfg.train_manifest)
    val = load_dataset(cfg.val_manifest) if cfg.val_manifest else None
    out = Path(args.out or cfg.output_dir)
    result = train(data, cfg.train, cfg.loss_config(), val, out, cfg.to_dict(), **cfg.ablation())
    msg = f"trained {len(result.losses)} steps, final loss {result.losses[-1]:.4f}"
    if result.epoch_rsum:
        msg += f", last Rsum {result.epoch_rsum[-1]:.2f}"
    print(msg)
    return EXIT_OK


def _model_and_data(args):
    from .train import load_checkpoint

    model, _, header = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(header["run"]) if args.config is None else _load_run(args)
    manifest = args.manifest or cfg.test_manifest or cfg.val_manifest or cfg.train_manifest
    if manifest is None:
        raise UsageError("no manifest given and none in the config")
    return model, load_dataset(manifest), cfg


def cmd_eval(args) -> int:
    from .evalkit import evaluate

    model, data, cfg = _model_and_data(args)
    ablate = {s.strip().lower() for s in (args.ablate or "").split(",") if s.strip()}
    if ablate - {"s1", "s2"}:
        raise UsageError(f"--ablate accepts s1,s2; got {sorted(ablate)}")
    if not model.cfg.use_local:
        ablate.add("s1")
    loss_cfg = LossConfig(margin=cfg.train.margin, enable_s1="s1" not in ablate, enable_s2="s2" not in ablate)
    folds = data.manifest.folds if args.folds else None
    if args.folds and not folds:
        raise FormatError("--folds requested but the manifest declares no folds")
    report = evaluate(model, data, loss_cfg, folds)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    print(" ".join(f"{k}={v:.2f}" for k, v in report.metrics().items()))
    print(f"Rsum {report.rsum:.2f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(tol=args.tol, seed=args.seed)
    for name, report in reports.items():
        print(f"{name:28s} {report}")
    ok = all(r.passed for r in reports.values())
    print("grad-check", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_embed(args) -> int:
    from .evalkit import embed_dataset

    model, data, cfg = _model_and_data(args)
    img, txt = embed_dataset(model, data)
    out = Path(args.out or Path(cfg.output_dir) / "embeddings")
    out.mkdir(parents=True, exist_ok=True)
    write_blob(out / "images_V.hgt", img["pooled"])
    write_blob(out / "captions_T.hgt", txt["pooled"])
    (out / "index.json").write_text(json.dumps(
        {"images": data.group_ids, "captions": data.caption_ids, "caption_image": data.caption_image.tolist()},
        indent=2,
    ) + "\n")
    print(f"wrote {img['pooled'].shape[0]} image and {txt['pooled'].shape[0]} caption vectors to {out}")
    return EXIT_OK


def cmd_word_sim(args) -> int:
    from .evalkit import word_similarity, word_similarity_csv

    model, data, cfg = _model_and_data(args)
    if not 0 <= args.caption < data.n_captions:
        raise UsageError(f"--caption must lie in [0, {data.n_captions})")
    s = data.sample(args.caption)
    weights = word_similarity(model, s.global_grid, s.regions, s.tokens)
    labels = args.tokens.split(",") if args.tokens else None
    if labels is not None and len(labels) != len(weights):
        raise UsageError(f"--tokens has {len(labels)} labels for {len(weights)} tokens")
    text = word_similarity_csv(weights, labels)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic feature dataset")
    p.add_argument("--groups", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--l", type=int, default=8)
    p.add_argument("--d0", type=int, default=48)
    p.add_argument("--d1", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--group-size", type=int, default=5)
    p.add_argument("--ragged", action="store_true", help="vary m, k, l per sample")
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "Recall@K report for a checkpoint"),
        ("embed", cmd_embed, "dump pooled image/caption vectors as blobs"),
        ("word-sim", cmd_word_sim, "image-word similarity CSV for one caption"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--manifest")
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--ablate", help="comma list of similarity levels to drop: s1,s2")
            p.add_argument("--folds", action="store_true", help="average over the manifest's folds")
        if name == "word-sim":
            p.add_argument("--caption", type=int, default=0, help="caption index in the manifest")
            p.add_argument("--tokens", help="comma-separated token labels")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="finite-difference check of every backward rule")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"hgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"hgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
