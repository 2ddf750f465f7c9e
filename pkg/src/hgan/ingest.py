"""Precomputed-feature files: blob codec, dataset manifests, synthetic generator.

Blob layout (little-endian)::

    magic   4 bytes   b"HGT1" (float32 payload) or b"HGD1" (float64 payload)
    rank    u8
    dims    rank x u32
    payload prod(dims) floats, row-major

Feature files use HGT1. HGD1 exists so checkpoints can store parameters
without losing their 64-bit values.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC_F32 = b"HGT1"
MAGIC_F64 = b"HGD1"
_PAYLOAD = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed blob or manifest. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


def encode_blob(array: np.ndarray, precision: int = 32) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds u8")
    magic = MAGIC_F32 if precision == 32 else MAGIC_F64
    header = magic + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_PAYLOAD[magic]).tobytes()


def decode_blob(data: bytes, path=None) -> np.ndarray:
    if len(data) < 5:
        raise FormatError("truncated header", len(data), path)
    magic = bytes(data[:4])
    if magic not in _PAYLOAD:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    rank = data[4]
    dims_end = 5 + 4 * rank
    if len(data) < dims_end:
        raise FormatError(f"truncated dims for rank {rank}", len(data), path)
    dims = struct.unpack(f"<{rank}I", data[5:dims_end])
    dtype = _PAYLOAD[magic]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - dims_end != expected:
        raise FormatError(
            f"payload length {len(data) - dims_end} != expected {expected} for dims {dims}", dims_end, path
        )
    arr = np.frombuffer(data, dtype=dtype, offset=dims_end).reshape(dims).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite entry", dims_end + int(bad[0]) * dtype.itemsize, path)
    return arr


def write_blob(path, array: np.ndarray, precision: int = 32) -> None:
    Path(path).write_bytes(encode_blob(array, precision))


def read_blob(path) -> np.ndarray:
    """Read a blob and return it as a float64 array."""
    return decode_blob(Path(path).read_bytes(), path)


def read_feature(path, width: int, what: str) -> np.ndarray:
    """Read a rows x width feature matrix, enforcing rows >= 1."""
    arr = read_blob(path)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != width:
        raise FormatError(f"{what} blob has shape {arr.shape}, expected (>=1, {width})", 5, path)
    return arr


# manifests ------------------------------------------------------------------------------

@dataclass
class SampleEntry:
    sample_id: str
    caption_group_id: str
    global_path: str
    regions_path: str
    tokens_path: str


@dataclass
class DatasetManifest:
    name: str
    D0: int
    D1: int
    split: str
    samples: list[SampleEntry]
    group_size: int = 5
    folds: Optional[list[list[str]]] = None
    root: Path = field(default=Path("."), compare=False)

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "D0": self.D0,
            "D1": self.D1,
            "split": self.split,
            "group_size": self.group_size,
            "samples": [vars(s) for s in self.samples],
        }
        if self.folds is not None:
            doc["folds"] = self.folds
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json())
        self.root = path.parent

    @classmethod
    def load(cls, path, validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            samples = [SampleEntry(**s) for s in doc["samples"]]
            manifest = cls(
                name=doc["name"],
                D0=int(doc["D0"]),
                D1=int(doc["D1"]),
                split=doc["split"],
                samples=samples,
                group_size=int(doc.get("group_size", 5)),
                folds=doc.get("folds"),
                root=path.parent,
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"invalid manifest: {exc}", path=path) from exc
        if manifest.split not in ("train", "val", "test"):
            raise FormatError(f"unknown split {manifest.split!r}", path=path)
        if validate:
            manifest.validate()
        return manifest

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def validate(self) -> None:
        """Check blob headers against D0/D1 and the caption-group sizes."""
        seen: dict[str, int] = {}
        checked: set[str] = set()
        for s in self.samples:
            seen[s.caption_group_id] = seen.get(s.caption_group_id, 0) + 1
            for rel, width in ((s.global_path, self.D0), (s.regions_path, self.D0), (s.tokens_path, self.D1)):
                if rel in checked:
                    continue
                checked.add(rel)
                dims = _peek_dims(self.resolve(rel))
                if len(dims) != 2 or dims[0] < 1 or dims[1] != width:
                    raise FormatError(f"blob {rel} has dims {dims}, expected (>=1, {width})", 5, self.resolve(rel))
        for gid, n in seen.items():
            if n != self.group_size:
                raise FormatError(f"caption group {gid!r} has {n} captions, expected {self.group_size}")
        if self.folds is not None:
            known = set(seen)
            for fold in self.folds:
                missing = set(fold) - known
                if missing:
                    raise FormatError(f"fold references unknown groups {sorted(missing)[:3]}")


def _peek_dims(path: Path) -> tuple[int, ...]:
    if not path.exists():
        raise FormatError("referenced blob does not exist", path=path)
    with open(path, "rb") as fh:
        head = fh.read(5)
        if len(head) < 5 or head[:4] not in _PAYLOAD:
            raise FormatError("bad blob header", 0, path)
        rank = head[4]
        raw = fh.read(4 * rank)
        if len(raw) != 4 * rank:
            raise FormatError("truncated dims", 5 + len(raw), path)
        return struct.unpack(f"<{rank}I", raw)


@dataclass
class RawFeatureSet:
    """Precomputed features for one (image, caption) sample."""

    global_grid: np.ndarray  # m x D0
    regions: np.ndarray  # k x D0
    tokens: np.ndarray  # l x D1
    sample_id: str = ""
    caption_group_id: str = ""


@dataclass
class Dataset:
    """A manifest loaded into memory: unique images and all captions.

    ``caption_image[c]`` is the index into ``images`` of caption ``c``'s group.
    """

    manifest: DatasetManifest
    group_ids: list[str]
    global_grids: list[np.ndarray]
    regions: list[np.ndarray]
    tokens: list[np.ndarray]
    caption_ids: list[str]
    caption_image: np.ndarray

    @property
    def n_images(self) -> int:
        return len(self.group_ids)

    @property
    def n_captions(self) -> int:
        return len(self.tokens)

    def captions_of(self, image: int) -> np.ndarray:
        return np.flatnonzero(self.caption_image == image)

    def sample(self, caption: int) -> RawFeatureSet:
        img = int(self.caption_image[caption])
        return RawFeatureSet(
            self.global_grids[img], self.regions[img], self.tokens[caption],
            self.caption_ids[caption], self.group_ids[img],
        )

    def subset_groups(self, groups: list[str]) -> "Dataset":
        """Restrict to the given caption groups (used for fold evaluation)."""
        keep = [self.group_ids.index(g) for g in groups]
        remap = {old: new for new, old in enumerate(keep)}
        caps = [c for c in range(self.n_captions) if int(self.caption_image[c]) in remap]
        return Dataset(
            self.manifest,
            [self.group_ids[i] for i in keep],
            [self.global_grids[i] for i in keep],
            [self.regions[i] for i in keep],
            [self.tokens[c] for c in caps],
            [self.caption_ids[c] for c in caps],
            np.array([remap[int(self.caption_image[c])] for c in caps], dtype=np.int64),
        )


def load_dataset(manifest: DatasetManifest | str | os.PathLike) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    cache: dict[str, np.ndarray] = {}

    def get(rel: str, width: int, what: str) -> np.ndarray:
        if rel not in cache:
            cache[rel] = read_feature(manifest.resolve(rel), width, what)
        return cache[rel]

    group_index: dict[str, int] = {}
    grids, regions, tokens, cap_ids, cap_img = [], [], [], [], []
    for s in manifest.samples:
        if s.caption_group_id not in group_index:
            group_index[s.caption_group_id] = len(grids)
            grids.append(get(s.global_path, manifest.D0, "global"))
            regions.append(get(s.regions_path, manifest.D0, "regions"))
        tokens.append(get(s.tokens_path, manifest.D1, "tokens"))
        cap_ids.append(s.sample_id)
        cap_img.append(group_index[s.caption_group_id])
    return Dataset(manifest, list(group_index), grids, regions, tokens, cap_ids, np.array(cap_img, dtype=np.int64))


# synthetic data -------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_groups: int = 32
    m: int = 4
    k: int = 6
    l: int = 8  # noqa: E741
    D0: int = 48
    D1: int = 40
    seed: int = 0
    noise: float = 0.1
    group_size: int = 5
    n_concepts: int = 4
    latent_dim: int = 16
    ragged: bool = False
    split: str = "train"
    name: str = "synthetic"

    def validate(self) -> None:
        for key in ("n_groups", "m", "k", "l", "D0", "D1", "group_size", "n_concepts", "latent_dim"):
            if getattr(self, key) < 1:
                raise ValueError(f"synthetic config: {key} must be >= 1")
        if self.noise < 0:
            raise ValueError("synthetic config: noise must be >= 0")


def generate_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write a seeded synthetic dataset and its manifest under ``out_dir``.

    Every group owns a small set of latent concept vectors. Image grid cells
    are random mixtures of the concepts, regions and tokens each pick one
    concept; all three are pushed through fixed random affine maps (one per
    feature type) and perturbed by Gaussian noise of scale ``noise``. The
    token-to-concept assignment is fixed per group, so with zero noise the
    captions of a group are identical.
    """
    config.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "captions").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    rng = np.random.default_rng(config.seed)
    r = config.latent_dim
    maps = {
        name: (rng.normal(0, 1 / np.sqrt(r), (r, width)), rng.normal(0, 0.1, width))
        for name, width in (("global", config.D0), ("regions", config.D0), ("tokens", config.D1))
    }

    def project(kind: str, latent: np.ndarray) -> np.ndarray:
        A, b = maps[kind]
        clean = latent @ A + b
        return clean + config.noise * rng.standard_normal(clean.shape)

    def count(limit: int, low: int) -> int:
        return int(rng.integers(min(low, limit), limit + 1)) if config.ragged else limit

    samples = []
    for g in range(config.n_groups):
        gid = f"g{g:04d}"
        concepts = rng.standard_normal((config.n_concepts, r))
        m, k, l = count(config.m, 1), count(config.k, 1), count(config.l, 2)
        mix = rng.dirichlet(np.ones(config.n_concepts), size=m)
        grid = project("global", mix @ concepts)
        regions = project("regions", concepts[rng.integers(0, config.n_concepts, k)])
        token_concepts = concepts[rng.integers(0, config.n_concepts, l)]
        g_rel, l_rel = f"images/{gid}_global.hgt", f"images/{gid}_regions.hgt"
        write_blob(out / g_rel, grid)
        write_blob(out / l_rel, regions)
        for c in range(config.group_size):
            sid = f"{gid}_c{c}"
            t_rel = f"captions/{sid}.hgt"
            write_blob(out / t_rel, project("tokens", token_concepts))
            samples.append(SampleEntry(sid, gid, g_rel, l_rel, t_rel))

    manifest = DatasetManifest(
        name=config.name, D0=config.D0, D1=config.D1, split=config.split,
        samples=samples, group_size=config.group_size,
    )
    manifest.save(out / "manifest.json")
    return manifest
