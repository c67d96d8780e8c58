"""Bilevel trajectory-matching distillation of synthetic embeddings.

One outer iteration samples a teacher segment from the expert buffer, unrolls
``syn_steps`` student SGD steps on the synthetic set from the segment start
(autograd keeps the whole rollout as its tape), scores the endpoint with the
branch-wise normalized matching loss and pushes that loss back to the
synthetic embeddings, the low-rank similarity factors and the log step size.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import autodiff as AD
from .binio import Reader, Writer, atomic_write, read_bytes
from .buffer import sample_segment
from .datagen import sample_real_subset
from .model import ProjectionHeads
from .objectives import TARGET_EPS, LossConfig

log = logging.getLogger(__name__)

MAGIC = b"OMSS"
VERSION = 1
MIN_TEACHER_MOTION = 1e-16
MAX_SEGMENT_ATTEMPTS = 10

METHODS = ("hopa", "3pair", "tbind", "vbind", "rank2", "no_LM", "no_wBCE", "no_mining")


class DegenerateSegment(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    n: int = 50
    iterations: int = 500
    syn_steps: int = 16
    expert_epochs: int = 2
    max_start_epoch: int = 5
    mini_batch_size: int = 25
    lr_data: float = 0.1
    lr_lr: float = 1e-4
    lr_sim: float = 0.1
    momentum: float = 0.5
    sim_rank: int = 10
    sim_alpha: float = 1.0
    lr_teacher: float = 0.1
    tau: float = 0.1
    tau_prime: float = 0.2
    beta: float = 0.5
    method: str = "hopa"
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_data, self.lr_lr, self.lr_sim) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.syn_steps < 1:
            raise ValueError("syn_steps must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.tau_prime, self.beta)

    @property
    def objective(self) -> str:
        return "hopa" if self.method == "no_mining" else self.method

    @property
    def learns_similarity(self) -> bool:
        return self.method not in ("no_mining", "no_wBCE")


@dataclass
class SyntheticSet:
    X: list
    A: np.ndarray
    B: np.ndarray
    sim_scale: float
    eta: float
    names: tuple = ("video", "audio", "text")

    def __post_init__(self):
        self.X = [np.asarray(x, dtype=np.float64) for x in self.X]
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if len({x.shape[0] for x in self.X}) != 1:
            raise ValueError("synthetic modalities must share n")
        if self.A.shape != self.B.shape or self.A.shape[0] != self.n or self.A.shape[1] > self.n:
            raise ValueError("similarity factors must be n x r with r <= n")

    @property
    def n(self) -> int:
        return self.X[0].shape[0]

    @property
    def k(self) -> int:
        return len(self.X)

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> tuple:
        return tuple(x.shape[1] for x in self.X)

    @property
    def log_eta(self) -> float:
        # the step size is learned through this positive reparameterization
        return float(np.log(self.eta))

    def targets(self) -> np.ndarray:
        """Soft correspondence labels ``clamp(I + A B^T)``."""
        return np.clip(np.eye(self.n) + self.A @ self.B.T, TARGET_EPS, 1.0 - TARGET_EPS)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet([x.copy() for x in self.X], self.A.copy(), self.B.copy(), self.sim_scale, self.eta, self.names)

    def equals(self, other: "SyntheticSet") -> bool:
        return (
            len(self.X) == len(other.X)
            and all(np.array_equal(a, b) for a, b in zip(self.X, other.X))
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.B, other.B)
            and self.sim_scale == other.sim_scale
            and self.eta == other.eta
        )


@dataclass
class RolloutTape:
    start: ProjectionHeads
    batches: list
    eta: float
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    components: dict = field(default_factory=dict)


def init_synthetic(ds, n: int, cfg: DistillConfig, seed: int) -> SyntheticSet:
    """Copy a seeded real subset and draw small similarity factors."""
    if n > ds.N:
        raise ValueError(f"cannot initialize {n} synthetic instances from {ds.N} real ones")
    sub = sample_real_subset(ds, n, seed)
    r = min(cfg.sim_rank, n)
    rng = np.random.default_rng([seed, 7])
    scale = cfg.sim_alpha / np.sqrt(r)
    A = rng.uniform(-1.0, 1.0, (n, r)) * scale
    B = rng.uniform(-1.0, 1.0, (n, r)) * scale
    return SyntheticSet([x.copy() for x in sub.X], A, B, cfg.sim_alpha, float(cfg.lr_teacher), ds.names)


def _draw_batches(n, size, steps, rng):
    size = min(size, n)
    return [np.sort(rng.choice(n, size=size, replace=False)) for _ in range(steps)]


def _rollout(start: ProjectionHeads, X, A, B, log_eta, batches, cfg: DistillConfig, names, create_graph):
    eta = torch.exp(log_eta)
    W = [AD.as_tensor(w, requires_grad=True) for w in start.weights]
    S = AD.similarity_targets(A, B)
    states = []
    comps = {}
    for idx in batches:
        it = torch.as_tensor(idx)
        raw = [x[it] for x in X]
        z = AD.encode(W, raw)
        loss, parts = AD.inner_loss(z, S[it][:, it], cfg.loss, cfg.objective, names)
        for key, val in parts.items():
            comps.setdefault(key, []).append(float(val.detach()))
        grads = torch.autograd.grad(loss, W, create_graph=create_graph)
        W = [w - eta * g for w, g in zip(W, grads)]
        if not create_graph:
            W = [w.detach().requires_grad_(True) for w in W]
        states.append([w.detach().numpy().copy() for w in W])
    return W, states, comps


def _leaves(syn: SyntheticSet, requires_grad=True):
    X = [AD.as_tensor(x, requires_grad) for x in syn.X]
    A = AD.as_tensor(syn.A, requires_grad)
    B = AD.as_tensor(syn.B, requires_grad)
    log_eta = AD.as_tensor(syn.log_eta, requires_grad)
    return X, A, B, log_eta


def student_rollout(start: ProjectionHeads, syn: SyntheticSet, cfg: DistillConfig, rng):
    """Unroll ``syn_steps`` student steps; returns ``(endpoint_heads, tape)``."""
    batches = _draw_batches(syn.n, cfg.mini_batch_size, cfg.syn_steps, rng)
    X, A, B, log_eta = _leaves(syn, requires_grad=False)
    W, states, comps = _rollout(start, X, A, B, log_eta, batches, cfg, syn.names, create_graph=False)
    endpoint = start.replace(states[-1])
    tape = RolloutTape(start, batches, syn.eta, states, [x.copy() for x in syn.X], syn.A.copy(), syn.B.copy(), comps)
    return endpoint, tape


def replay(tape: RolloutTape, cfg: DistillConfig, names=("video", "audio", "text")) -> ProjectionHeads:
    """Re-run the recorded rollout forward from the tape."""
    X = [AD.as_tensor(x) for x in tape.inputs]
    A, B = AD.as_tensor(tape.A), AD.as_tensor(tape.B)
    log_eta = AD.as_tensor(np.log(tape.eta))
    _, states, _ = _rollout(tape.start, X, A, B, log_eta, tape.batches, cfg, names, create_graph=False)
    return tape.start.replace(states[-1])


def matching_loss(endpoint: ProjectionHeads, segment):
    """Sum over branches of ``||theta_e - theta_T||^2 / ||theta_0 - theta_T||^2``."""
    terms = []
    for we, w0, wt in zip(endpoint.weights, segment.start.weights, segment.target.weights):
        den = float(np.sum((w0 - wt) ** 2))
        if den < MIN_TEACHER_MOTION:
            raise DegenerateSegment("teacher barely moved on a branch")
        terms.append(float(np.sum((we - wt) ** 2)) / den)
    return float(sum(terms)), terms


def _matching_torch(W, segment):
    total = 0.0
    for w, w0, wt in zip(W, segment.start.weights, segment.target.weights):
        wt = AD.as_tensor(wt)
        den = float(np.sum((w0 - wt.numpy()) ** 2))
        if den < MIN_TEACHER_MOTION:
            raise DegenerateSegment("teacher barely moved on a branch")
        total = total + torch.sum((w - wt) ** 2) / den
    return total


def meta_gradient(syn: SyntheticSet, segment, batches, cfg: DistillConfig):
    """Matching loss and exact unrolled gradients w.r.t. every synthetic parameter.

    Returns ``(loss, grads, components)`` with ``grads`` keyed ``X``, ``A``, ``B``,
    ``log_eta``.
    """
    X, A, B, log_eta = _leaves(syn)
    W, _, comps = _rollout(segment.start, X, A, B, log_eta, batches, cfg, syn.names, create_graph=True)
    loss = _matching_torch(W, segment)
    leaves = X + [A, B, log_eta]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = [np.zeros(l.shape) if g is None else g.numpy() for l, g in zip(leaves, grads)]
    k = len(X)
    out = {"X": grads[:k], "A": grads[k], "B": grads[k + 1], "log_eta": float(grads[k + 2])}
    return float(loss.detach()), out, comps


class OuterOptimizer:
    """Momentum SGD over the synthetic parameters with per-group learning rates."""

    def __init__(self, cfg: DistillConfig):
        self.cfg = cfg
        self.velocity = None

    def step(self, syn: SyntheticSet, grads) -> SyntheticSet:
        cfg = self.cfg
        sim_lr = cfg.lr_sim if cfg.learns_similarity else 0.0
        groups = [("X", cfg.lr_data), ("A", sim_lr), ("B", sim_lr), ("log_eta", cfg.lr_lr)]
        if self.velocity is None:
            self.velocity = {
                "X": [np.zeros_like(x) for x in syn.X],
                "A": np.zeros_like(syn.A),
                "B": np.zeros_like(syn.B),
                "log_eta": 0.0,
            }
        v = self.velocity
        mu = cfg.momentum
        out = syn.copy()
        for name, lr in groups:
            if lr == 0.0:
                continue
            if name == "X":
                v["X"] = [mu * vx + g for vx, g in zip(v["X"], grads["X"])]
                out.X = [x - lr * vx for x, vx in zip(syn.X, v["X"])]
            elif name == "log_eta":
                v["log_eta"] = mu * v["log_eta"] + grads["log_eta"]
                out.eta = float(np.exp(syn.log_eta - lr * v["log_eta"]))
            else:
                v[name] = mu * v[name] + grads[name]
                setattr(out, name, getattr(syn, name) - lr * v[name])
        return out


def _finite(grads) -> bool:
    parts = list(grads["X"]) + [grads["A"], grads["B"], np.asarray(grads["log_eta"])]
    return all(np.all(np.isfinite(p)) for p in parts)


def outer_step(syn: SyntheticSet, tape: RolloutTape, segment, cfg: DistillConfig, optimizer=None):
    """Back-propagate the matching loss through the taped rollout and update."""
    optimizer = optimizer or OuterOptimizer(cfg)
    loss, grads, _ = meta_gradient(syn, segment, tape.batches, cfg)
    if not (np.isfinite(loss) and _finite(grads)):
        log.warning("non-finite meta-gradient; outer step skipped")
        return syn, loss, False
    return optimizer.step(syn, grads), loss, True


@dataclass
class IterationLog:
    method: str
    rows: list = field(default_factory=list)

    COLUMNS = ("iter", "matching_loss", "eta", "segment_traj", "segment_start", "skipped")

    @property
    def skipped(self) -> int:
        return sum(r["skipped"] for r in self.rows)

    def losses(self) -> np.ndarray:
        return np.array([r["matching_loss"] for r in self.rows])

    def to_csv(self) -> str:
        extra = sorted({key for r in self.rows for key in r} - set(self.COLUMNS))
        buf = io.StringIO()
        buf.write(f"# method={self.method}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.COLUMNS) + extra)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in list(self.COLUMNS) + extra])
        return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def distill(ds, buffer, cfg: DistillConfig, syn: SyntheticSet | None = None):
    """Full outer loop; returns ``(synthetic_set, iteration_log)``."""
    if syn is None:
        syn = init_synthetic(ds, cfg.n, cfg, cfg.seed)
    seg_rng = np.random.default_rng([cfg.seed, 11])
    batch_rng = np.random.default_rng([cfg.seed, 13])
    opt = OuterOptimizer(cfg)
    logbook = IterationLog(cfg.method)
    for it in range(cfg.iterations):
        for _ in range(MAX_SEGMENT_ATTEMPTS):
            segment = sample_segment(buffer, cfg.max_start_epoch, cfg.expert_epochs, seg_rng)
            try:
                matching_loss(segment.start, segment)
                break
            except DegenerateSegment:
                continue
        else:
            raise DegenerateSegment(f"no usable teacher segment after {MAX_SEGMENT_ATTEMPTS} draws")
        batches = _draw_batches(syn.n, cfg.mini_batch_size, cfg.syn_steps, batch_rng)
        eta = syn.eta
        try:
            loss, grads, comps = meta_gradient(syn, segment, batches, cfg)
            ok = np.isfinite(loss) and _finite(grads)
        except (RuntimeError, FloatingPointError) as exc:  # eigh failure inside the rollout
            log.warning("iteration %d failed: %s", it, exc)
            loss, comps, ok = float("nan"), {}, False
        if ok:
            syn = opt.step(syn, grads)
        else:
            log.warning("iteration %d skipped (non-finite meta-gradient)", it)
        row = {
            "iter": it,
            "matching_loss": loss,
            "eta": eta,
            "segment_traj": segment.trajectory,
            "segment_start": segment.start_epoch,
            "skipped": int(not ok),
        }
        for key, vals in comps.items():
            row[f"inner_{key}"] = float(np.mean(vals))
        logbook.rows.append(row)
        if it % 50 == 0:
            log.info("iter %d matching %.4f eta %.5f", it, loss, eta)
    return syn, logbook


def distill_baseline(variant: str, ds, buffer, cfg: DistillConfig):
    """Same pipeline with the inner objective swapped for ``variant``."""
    return distill(ds, buffer, replace(cfg, method=variant))


# -- file format --------------------------------------------------------------


def encode_synthetic(syn: SyntheticSet) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.u64(syn.n)
    w.u32(syn.k)
    w.u32(syn.r)
    for x in syn.X:
        w.matrix(x)
    w.matrix(syn.A)
    w.matrix(syn.B)
    scalars = Writer()
    scalars.f64(syn.sim_scale)
    scalars.f64(syn.eta)
    w.checked(scalars.getvalue())
    return w.getvalue()


def decode_synthetic(data: bytes, names=("video", "audio", "text")) -> SyntheticSet:
    r = Reader(data, "synthetic set")
    r.magic(MAGIC)
    r.version(VERSION)
    n = r.u64()
    k = r.u32()
    rank = r.u32()
    X = [r.matrix(f"modality {m}") for m in range(k)]
    A = r.matrix("factor A")
    B = r.matrix("factor B")
    if A.shape != (n, rank) or B.shape != (n, rank) or any(x.shape[0] != n for x in X):
        raise ValueError("synthetic set section shapes disagree with the header")
    sr = Reader(r.checked(16, "scalars"), "scalars")
    sim_scale, eta = sr.f64(), sr.f64()
    r.finish()
    names = tuple(names) if len(names) == k else tuple(f"m{i}" for i in range(k))
    return SyntheticSet(X, A, B, sim_scale, eta, names)


def save_synthetic(syn: SyntheticSet, path):
    atomic_write(path, encode_synthetic(syn))


def load_synthetic(path, names=("video", "audio", "text")) -> SyntheticSet:
    return decode_synthetic(read_bytes(path), names)
