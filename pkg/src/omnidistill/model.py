"""Bias-free linear projection heads with l2-normalized outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-12


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionHeads:
    """One ``(d, d_in(m))`` weight matrix per modality, in modality order."""

    weights: tuple
    names: tuple = ()

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        for w in ws:
            w.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"m{i}" for i in range(len(ws))))
        if len(self.names) != len(ws):
            raise ValueError("one name per head required")
        if len({w.shape[0] for w in ws}) != 1:
            raise ValueError("all heads must share the output dimension")

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def shapes(self):
        return tuple(w.shape for w in self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat(self, theta: np.ndarray) -> "ProjectionHeads":
        out, i = [], 0
        for shape in self.shapes:
            size = shape[0] * shape[1]
            out.append(np.asarray(theta[i : i + size]).reshape(shape))
            i += size
        return ProjectionHeads(tuple(out), self.names)

    def replace(self, weights) -> "ProjectionHeads":
        return ProjectionHeads(tuple(weights), self.names)

    def equals(self, other: "ProjectionHeads") -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.weights, other.weights)
        )


def init_heads(d: int, d_in, seed: int, names=(), tied: bool = True) -> ProjectionHeads:
    """Seeded fan-in uniform init in ``[-1/sqrt(d_in), 1/sqrt(d_in)]``.

    With ``tied`` every head reads its leading input coordinates through one
    shared draw, so inputs that already live in a common space start out
    positively aligned, as heads bound to a joint embedding space would.
    Otherwise each head gets an independent draw.
    """
    rng = np.random.default_rng(seed)
    if tied:
        shared = rng.uniform(-1.0, 1.0, size=(d, max(d_in)))
        ws = [shared[:, :din] / np.sqrt(din) for din in d_in]
    else:
        ws = [rng.uniform(-1.0, 1.0, size=(d, din)) / np.sqrt(din) for din in d_in]
    return ProjectionHeads(tuple(ws), tuple(names))


def forward(heads: ProjectionHeads, raw) -> np.ndarray:
    """Encode per-modality inputs ``raw[m]`` of shape ``(N, d_in(m))`` to ``(N, k, d)``.

    A single instance (1-D inputs) returns ``(k, d)``.
    """
    z, _ = _forward(heads, raw)
    return z


def _forward(heads, raw):
    if len(raw) != heads.k:
        raise ValueError(f"expected {heads.k} modality inputs, got {len(raw)}")
    single = np.ndim(raw[0]) == 1
    zs, norms = [], []
    for w, x in zip(heads.weights, raw):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"input dim {x.shape[1]} does not match head input dim {w.shape[1]}")
        y = x @ w.T
        nrm = np.linalg.norm(y, axis=1)
        if np.any(nrm < NORM_FLOOR):
            raise NormalizationError("projected vector has near-zero norm")
        zs.append(y / nrm[:, None])
        norms.append(nrm)
    z = np.stack(zs, axis=1)
    return (z[0] if single else z), norms


def backward(heads: ProjectionHeads, raw, grad_z) -> tuple:
    """Gradient of a loss w.r.t. each ``W_m`` given its gradient w.r.t. ``z``.

    The normalization Jacobian ``(I - z z^T) / ||W x||`` strips the radial part.
    """
    z, norms = _forward(heads, raw)
    if z.ndim == 2:
        z = z[None]
    grad_z = np.asarray(grad_z, dtype=np.float64).reshape(z.shape)
    grads = []
    for m, x in enumerate(raw):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        zm = z[:, m]
        gm = grad_z[:, m]
        radial = np.sum(gm * zm, axis=1, keepdims=True)
        gy = (gm - radial * zm) / norms[m][:, None]
        grads.append(gy.T @ x)
    return tuple(grads)


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocity: list | None = field(default=None)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params, grads, state: SgdState):
    """One (momentum) SGD step on a sequence of arrays; returns new arrays."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient")
    if state.momentum == 0.0:
        return [p - state.learning_rate * g for p, g in zip(params, grads)]
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    state.velocity = [state.momentum * v + g for v, g in zip(state.velocity, grads)]
    return [p - state.learning_rate * v for p, v in zip(params, state.velocity)]


def step_heads(heads: ProjectionHeads, grads, state: SgdState) -> ProjectionHeads:
    return heads.replace(sgd_step(heads.weights, grads, state))


def param_distance(a: ProjectionHeads, b: ProjectionHeads):
    """Per-branch squared Euclidean distances and their total."""
    if a.shapes != b.shapes:
        raise ValueError(f"head shapes differ: {a.shapes} vs {b.shapes}")
    per = [float(np.sum((wa - wb) ** 2)) for wa, wb in zip(a.weights, b.weights)]
    return per, float(sum(per))
