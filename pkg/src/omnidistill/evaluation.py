"""Train-from-scratch evaluation and cross-modal retrieval recall."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import model
from .datagen import OmniDataset, sample_real_subset
from .objectives import LossConfig
from .training import train_heads

KS = (1, 5, 10)


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 10
    batch_size: int = 25
    lr_teacher: float = 0.1
    d: int = 16
    tau: float = 0.1
    tau_prime: float = 0.2
    objective: str = "hopa"
    ks: tuple = KS

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.tau_prime)


@dataclass
class RetrievalReport:
    """Recall@K in percent per directed modality pair ``(a, b)``."""

    recalls: dict
    n_queries: int
    ks: tuple = KS

    def average(self) -> dict:
        return {K: float(np.mean([r[K] for r in self.recalls.values()])) for K in self.ks}


@dataclass
class AggregateReport:
    mean: dict
    std: dict
    avg_mean: dict
    avg_std: dict
    names: tuple
    seeds: tuple
    ks: tuple = KS
    runs: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["pair"]
        for K in self.ks:
            header += [f"R@{K}_mean", f"R@{K}_std"]
        buf.write("# modalities=" + ",".join(self.names) + "\n")
        w.writerow(header)
        for (a, b), vals in self.mean.items():
            row = [f"{self.names[a]}->{self.names[b]}"]
            for K in self.ks:
                row += [f"{vals[K]:.1f}", f"{self.std[(a, b)][K]:.1f}"]
            w.writerow(row)
        row = ["Avg"]
        for K in self.ks:
            row += [f"{self.avg_mean[K]:.1f}", f"{self.avg_std[K]:.1f}"]
        w.writerow(row)
        return buf.getvalue()


def ranks_of_truth(sims: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = sims.shape[0]
    truth = np.diag(sims)[:, None]
    better = sims > truth
    tied_before = (sims == truth) & (np.arange(n)[None, :] < np.arange(n)[:, None])
    return better.sum(axis=1) + tied_before.sum(axis=1)


def recall_from_embeddings(z: np.ndarray, ks=KS) -> RetrievalReport:
    """``z`` is ``(N, k, d)`` with rows matched across modalities by index."""
    n, k, _ = z.shape
    if n == 0:
        raise ValueError("empty test set")
    if max(ks) > n:
        raise ValueError(f"K={max(ks)} exceeds test size {n}")
    recalls = {}
    for a in range(k):
        for b in range(k):
            if a == b:
                continue
            ranks = ranks_of_truth(z[:, a] @ z[:, b].T)
            recalls[(a, b)] = {K: 100.0 * float(np.mean(ranks < K)) for K in ks}
    return RetrievalReport(recalls, n, tuple(ks))


def retrieval_recall(heads, test: OmniDataset, ks=KS) -> RetrievalReport:
    if test.N == 0 or any(x.shape[0] == 0 for x in test.X):
        raise ValueError("empty modality in test set")
    return recall_from_embeddings(model.forward(heads, test.X), ks)


def class_mrr(z_query: np.ndarray, z_cand: np.ndarray, labels: np.ndarray) -> float:
    """Mean reciprocal rank of the first other same-class candidate."""
    sims = z_query @ z_cand.T
    n = sims.shape[0]
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    hit = labels[order] == labels[:, None]
    hit[:, -1] = hit[:, -1] | ~hit.any(axis=1)  # no other same-class item: score 1/n
    first = np.argmax(hit, axis=1)
    return float(np.mean(1.0 / (first + 1)))


def _training_data(data):
    """``(X, targets, lr_override)`` for a synthetic set or a real dataset."""
    if isinstance(data, OmniDataset):
        return data.X, None, None, data.names
    return data.X, data.targets(), data.eta, data.names


def train_student(data, cfg: EvalConfig, seed: int, targets=None):
    """Fresh seeded heads trained on a coreset or synthetic set.

    Synthetic sets bring their own learned step size and similarity labels.
    Returns ``(heads, epoch_losses)``.
    """
    X, own_targets, eta, names = _training_data(data)
    if X[0].shape[0] == 0:
        raise ValueError("empty training data")
    lr = cfg.lr_teacher if eta is None else eta
    heads = model.init_heads(cfg.d, tuple(x.shape[1] for x in X), seed, names)
    heads, _, losses = train_heads(
        heads,
        X,
        own_targets if targets is None else targets,
        lr=lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        cfg=cfg.loss,
        objective=cfg.objective,
        seed=seed,
    )
    return heads, losses


def evaluate_protocol(artifact, ds_test: OmniDataset, cfg: EvalConfig, seeds) -> AggregateReport:
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    runs = []
    for seed in seeds:
        heads, _ = train_student(artifact, cfg, seed)
        runs.append(retrieval_recall(heads, ds_test, cfg.ks))
    return aggregate(runs, ds_test.names, seeds, cfg.ks)


def aggregate(runs, names, seeds, ks=KS) -> AggregateReport:
    pairs = list(runs[0].recalls)
    mean = {p: {K: float(np.mean([r.recalls[p][K] for r in runs])) for K in ks} for p in pairs}
    std = {p: {K: float(np.std([r.recalls[p][K] for r in runs])) for K in ks} for p in pairs}
    avgs = [r.average() for r in runs]
    avg_mean = {K: float(np.mean([a[K] for a in avgs])) for K in ks}
    avg_std = {K: float(np.std([a[K] for a in avgs])) for K in ks}
    return AggregateReport(mean, std, avg_mean, avg_std, tuple(names), tuple(seeds), tuple(ks), runs)


def random_coreset_eval(ds_train, ds_test, n, cfg: EvalConfig, seeds, subset_seed=0) -> AggregateReport:
    """Random real subset of size ``n`` trained with identity targets."""
    coreset = sample_real_subset(ds_train, n, subset_seed)
    return evaluate_protocol(coreset, ds_test, cfg, seeds)
