"""Generated omnimodal embedding datasets with planted cross-modal semantics.

Each instance draws a latent vector near one of ``C`` class centroids. Every
modality sees that latent through its own fixed linear view (a shared
embedding of the latent coordinates plus a modality-specific distortion),
adds its own noise, and is unit-normalized. The class structure, views and
centroids are drawn from ``seed``; instances are drawn from a per-split
stream so train and test share one world.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer, atomic_write, read_bytes

MAGIC = b"OMDS"
VERSION = 1
UNLABELED = 0xFFFFFFFF

_SPLIT_STREAM = {"train": 1, "test": 2}


@dataclass(frozen=True)
class GeneratorConfig:
    N: int = 2000
    d_in: tuple = (48, 32, 40)
    latent_dim: int = 16
    num_classes: int = 20
    within_class_spread: float = 0.6
    modality_noise: tuple = (0.3, 0.3, 0.3)
    view_distortion: float = 0.5
    names: tuple = ("video", "audio", "text")
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.d_in)

    def validate(self):
        if self.k < 2:
            raise ValueError("need at least two modalities")
        if len(self.modality_noise) != self.k or len(self.names) != self.k:
            raise ValueError("modality_noise and names need one entry per modality")
        if self.latent_dim > min(self.d_in):
            raise ValueError("latent_dim must not exceed the smallest input dimension")
        if not 1 <= self.num_classes <= self.N:
            raise ValueError("num_classes must lie in [1, N]")
        if self.latent_dim < 1 or self.N < 1:
            raise ValueError("dimensions must be positive")


@dataclass
class OmniDataset:
    X: list
    labels: np.ndarray
    names: tuple
    split: str = "train"

    def __post_init__(self):
        self.X = [np.asarray(x, dtype=np.float64) for x in self.X]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = {x.shape[0] for x in self.X}
        if len(n) != 1 or self.labels.shape[0] not in n:
            raise ValueError("all modalities and labels must share N and row order")
        self.names = tuple(self.names)

    @property
    def N(self) -> int:
        return self.X[0].shape[0]

    @property
    def k(self) -> int:
        return len(self.X)

    @property
    def d_in(self) -> tuple:
        return tuple(x.shape[1] for x in self.X)

    def subset(self, idx) -> "OmniDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return OmniDataset([x[idx] for x in self.X], self.labels[idx], self.names, self.split)

    def equals(self, other: "OmniDataset") -> bool:
        return (
            self.names == other.names
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(a, b) for a, b in zip(self.X, other.X))
            and self.k == other.k
        )

    def digest(self) -> str:
        return hashlib.sha256(encode_dataset(self)).hexdigest()[:16]


def _world(cfg: GeneratorConfig):
    rng = np.random.default_rng([cfg.seed, 0])
    centroids = rng.standard_normal((cfg.num_classes, cfg.latent_dim))
    views = []
    for din in cfg.d_in:
        base = np.zeros((din, cfg.latent_dim))
        base[: cfg.latent_dim, : cfg.latent_dim] = np.eye(cfg.latent_dim)
        distortion = rng.standard_normal((din, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
        views.append(base + cfg.view_distortion * distortion)
    return centroids, views


def generate(cfg: GeneratorConfig = GeneratorConfig(), split: str = "train", n: int | None = None) -> OmniDataset:
    cfg.validate()
    n = cfg.N if n is None else n
    centroids, views = _world(cfg)
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM.get(split, 3)])
    labels = rng.permutation(np.arange(n) % cfg.num_classes)
    latent = centroids[labels] + cfg.within_class_spread * rng.standard_normal((n, cfg.latent_dim))
    X = []
    for view, noise, din in zip(views, cfg.modality_noise, cfg.d_in):
        x = latent @ view.T + noise * rng.standard_normal((n, din))
        X.append(x / np.linalg.norm(x, axis=1, keepdims=True))
    return OmniDataset(X, labels, cfg.names, split)


def generate_splits(cfg: GeneratorConfig, n_test: int):
    return generate(cfg, "train"), generate(cfg, "test", n_test)


def sample_real_subset(ds: OmniDataset, n: int, seed: int) -> OmniDataset:
    """Uniform sample without replacement, aligned across modalities."""
    if n > ds.N or n < 0:
        raise ValueError(f"cannot sample {n} instances from {ds.N}")
    idx = np.sort(np.random.default_rng(seed).choice(ds.N, size=n, replace=False))
    return ds.subset(idx)


def encode_dataset(ds: OmniDataset) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.u64(ds.N)
    w.u32(ds.k)
    for name, din in zip(ds.names, ds.d_in):
        w.text(name)
        w.u64(din)
    for x in ds.X:
        w.matrix(x, with_dims=False)
    labels = np.where(ds.labels < 0, UNLABELED, ds.labels).astype("<u4")
    w.checked(labels.tobytes())
    return w.getvalue()


def decode_dataset(data: bytes, split: str = "train") -> OmniDataset:
    r = Reader(data, "dataset")
    r.magic(MAGIC)
    r.version(VERSION)
    n = r.u64()
    k = r.u32()
    names, dims = [], []
    for _ in range(k):
        names.append(r.text())
        dims.append(r.u64())
    X = [r.matrix(f"modality {names[m]}", (n, dims[m])) for m in range(k)]
    raw = np.frombuffer(r.checked(4 * n, "labels"), dtype="<u4").astype(np.int64)
    labels = np.where(raw == UNLABELED, -1, raw)
    r.finish()
    return OmniDataset(X, labels, tuple(names), split)


def write_dataset(ds: OmniDataset, path):
    atomic_write(path, encode_dataset(ds))


def read_dataset(path, split: str | None = None) -> OmniDataset:
    if split is None:
        split = "test" if "test" in str(path).rsplit("/", 1)[-1] else "train"
    return decode_dataset(read_bytes(path), split)


def planted_margin(ds: OmniDataset) -> float:
    """Within-class minus between-class mean cross-modal cosine (diagnostic)."""
    within, between = [], []
    same = ds.labels[:, None] == ds.labels[None, :]
    for a in range(ds.k):
        for b in range(a + 1, ds.k):
            if ds.d_in[a] != ds.d_in[b]:
                m = min(ds.d_in[a], ds.d_in[b])
                xa, xb = ds.X[a][:, :m], ds.X[b][:, :m]
            else:
                xa, xb = ds.X[a], ds.X[b]
            s = xa @ xb.T
            within.append(s[same].mean())
            between.append(s[~same].mean())
    return float(np.mean(within) - np.mean(between))
