"""Inner-loop objectives with analytic gradients (numpy).

``z`` batches are ``(N, k, d)`` arrays of unit-norm modality rows. The
proxy-based objectives go through :mod:`omnidistill.spectral`; the pairwise
baselines work on raw cross-modal cosines of one modality pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .spectral import GramSpectrum, SpectralError

TARGET_EPS = 1e-4

DEFAULT_MODALITIES = ("video", "audio", "text")

PAIR_SETS = {
    "3pair": (("video", "text"), ("video", "audio"), ("audio", "text")),
    "tbind": (("video", "text"), ("audio", "text")),
    "vbind": (("video", "text"), ("video", "audio")),
}

PROXY_OBJECTIVES = ("hopa", "rank2", "no_LM", "no_wBCE")
OBJECTIVES = PROXY_OBJECTIVES + tuple(PAIR_SETS)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    tau_prime: float = 0.2
    beta: float = 0.5

    def __post_init__(self):
        if not self.tau > 0 or not self.tau_prime > 0:
            raise LossError("temperatures must be positive")
        if not 0 < self.beta < 1:
            raise LossError("beta must lie in (0, 1)")


@dataclass
class BatchLossReport:
    value: float
    grad_z: np.ndarray
    grad_proxy: np.ndarray | None
    grad_targets: np.ndarray | None
    components: dict = field(default_factory=dict)
    empty_groups: tuple = ()


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def clamp_targets(s, eps: float = TARGET_EPS):
    s = np.asarray(s, dtype=np.float64)
    clamped = np.clip(s, eps, 1.0 - eps)
    return clamped, (s >= eps) & (s <= 1.0 - eps)


def identity_targets(n: int) -> np.ndarray:
    return np.eye(n)


# -- modality-level loss ----------------------------------------------------


def softmax_sigma(sigmas: np.ndarray, tau: float) -> np.ndarray:
    x = sigmas / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def modality_loss_from_sigmas(sigmas, tau: float) -> float:
    """Mean negative log-softmax of the leading singular value."""
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    x = sigmas / tau
    m = x.max(axis=-1)
    lse = m + np.log(np.exp(x - m[:, None]).sum(axis=-1))
    return float(np.mean(lse - x[:, 0]))


def modality_loss(spectra: GramSpectrum, cfg: LossConfig):
    """``L_M`` and its gradient w.r.t. every instance's ``z``.

    The gradient is ``(1/(N tau)) [(p_1 - 1) u_1 v_1^T + sum_{j>=2} p_j u_j v_j^T]``.
    """
    sig = spectra.sigmas
    modes = spectral.mode_matrices(spectra)
    single = sig.ndim == 1
    if single:
        sig, modes = sig[None], modes[None]
    if np.any(spectra.degenerate):
        raise SpectralError("modality loss needs a simple leading singular value")
    n = sig.shape[0]
    value = modality_loss_from_sigmas(sig, cfg.tau)
    if not np.isfinite(value):
        raise LossError("non-finite modality loss")
    coef = softmax_sigma(sig, cfg.tau)
    coef[:, 0] -= 1.0
    grad = np.einsum("nj,njkd->nkd", coef, modes) / (n * cfg.tau)
    return value, grad[0] if single else grad


# -- proxies ----------------------------------------------------------------


def proxies(spectra: GramSpectrum, z: np.ndarray, rank: int = 1) -> np.ndarray:
    """Unit proxy per instance.

    Rank 1 is ``v_1``. Rank ``r`` concatenates ``sigma_j v_j`` for the top ``r``
    modes and rescales to unit norm, so it collapses to ``[v_1, 0]`` when the
    trailing modes vanish.
    """
    if rank == 1:
        return spectra.proxy
    w = np.swapaxes(spectra.left_vectors[..., :, :rank], -1, -2) @ z  # (N, r, d)
    s = np.sqrt(spectra.eigenvalues[..., :rank].sum(axis=-1))
    return w.reshape(w.shape[:-2] + (-1,)) / s[..., None]


def proxy_vjp(spectra: GramSpectrum, z: np.ndarray, g: np.ndarray, rank: int = 1) -> np.ndarray:
    """Pull a gradient on the proxies back to ``z`` (first-order perturbation).

    Needs ``lambda_j != lambda_l`` for every retained mode ``j`` and ``l != j``.
    """
    z = np.asarray(z, dtype=np.float64)
    lam = spectra.eigenvalues
    u = spectra.left_vectors
    n, k, d = z.shape
    g = g.reshape(n, rank, d)
    w = np.swapaxes(u[..., :, :rank], -1, -2) @ z  # (N, r, d)
    s = np.sqrt(lam[:, :rank].sum(axis=-1))
    p = w.reshape(n, -1) / s[:, None]
    gp = np.einsum("nr,nr->n", g.reshape(n, -1), p)
    grad = np.zeros_like(z)
    for j in range(rank):
        uj = u[:, :, j]
        h = np.einsum("nkd,nd->nk", z, g[:, j])
        coef = np.einsum("nk,nkl->nl", h, u)
        gap = lam[:, j : j + 1] - lam
        gap[:, j] = 1.0
        if np.any(np.abs(gap) == 0.0):
            raise SpectralError("repeated eigenvalue in proxy chain rule")
        coef = coef / gap
        coef[:, j] = 0.0
        m = np.einsum("nkl,nl->nk", u, coef)
        zm = np.einsum("nkd,nk->nd", z, m)
        grad += (
            uj[:, :, None] * g[:, j][:, None, :]
            + m[:, :, None] * w[:, j][:, None, :]
            + uj[:, :, None] * zm[:, None, :]
        ) / s[:, None, None]
        grad -= (gp / s**2)[:, None, None] * uj[:, :, None] * w[:, j][:, None, :]
    return grad


# -- weighted BCE -------------------------------------------------------------


def wbce_from_sims(sims, targets, cfg: LossConfig):
    """Two-group weighted BCE between similarity logits and soft labels.

    Returns ``(value, grad_sims, grad_targets, empty_groups)``. The logit form
    ``softplus(x) - y x`` is finite for hard labels, so targets are used as
    given; learned similarity matrices are clamped where they are built.
    """
    sims = np.asarray(sims, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if sims.shape != targets.shape:
        raise LossError(f"similarity shape {sims.shape} != target shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets > 1) or not np.all(np.isfinite(targets)):
        raise LossError("targets must lie in [0, 1]")
    y = targets
    x = sims / cfg.tau_prime
    bce = _softplus(x) - y * x
    pos = targets > cfg.beta
    weights = np.zeros_like(y)
    empty = []
    value = 0.0
    for name, group in (("positive", pos), ("negative", ~pos)):
        count = int(group.sum())
        if count == 0:
            empty.append(name)
            continue
        weights[group] = 1.0 / count
        value += float(bce[group].sum() / count)
    resid = _sigmoid(x) - y
    grad_sims = weights * resid / cfg.tau_prime
    grad_targets = -weights * x
    return value, grad_sims, grad_targets, tuple(empty)


def wbce_loss(targets, proxy_vecs, cfg: LossConfig):
    """Proxy-similarity wBCE over all ordered pairs, self-pairs included.

    Returns ``(value, grad_proxies, grad_targets, empty_groups)``.
    """
    P = np.atleast_2d(np.asarray(proxy_vecs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape != (P.shape[0], P.shape[0]):
        raise LossError(f"targets {targets.shape} do not match {P.shape[0]} proxies")
    value, gs, gt, empty = wbce_from_sims(P @ P.T, targets, cfg)
    return value, (gs + gs.T) @ P, gt, empty


# -- combined inner objective -------------------------------------------------


def inner_loss(z, targets, cfg: LossConfig, objective: str = "hopa", modalities=DEFAULT_MODALITIES):
    """Inner training objective on one batch; gradient blocks populated."""
    if objective in PAIR_SETS:
        return composite_pairwise(objective, z, targets, cfg, modalities)
    if objective not in PROXY_OBJECTIVES:
        raise LossError(f"unknown objective {objective!r}")
    z = np.asarray(z, dtype=np.float64)
    spectra = spectral.spectrum(z, validate=False)
    if np.any(spectra.degenerate):
        raise SpectralError("degenerate leading singular value in batch; jitter and retry")
    value = 0.0
    grad_z = np.zeros_like(z)
    comps = {}
    grad_proxy = None
    grad_targets = None
    empty = ()
    if objective != "no_LM":
        lm, g = modality_loss(spectra, cfg)
        value += lm
        grad_z += g
        comps["L_M"] = lm
    if objective != "no_wBCE":
        rank = 2 if objective == "rank2" else 1
        P = proxies(spectra, z, rank)
        wb, grad_proxy, grad_targets, empty = wbce_loss(targets, P, cfg)
        value += wb
        grad_z += proxy_vjp(spectra, z, grad_proxy, rank)
        comps["L_wBCE"] = wb
    if not np.isfinite(value):
        raise LossError("non-finite inner loss")
    return BatchLossReport(value, grad_z, grad_proxy, grad_targets, comps, empty)


# -- pairwise baselines -------------------------------------------------------


def _check_pair(za, zb):
    za = np.atleast_2d(np.asarray(za, dtype=np.float64))
    zb = np.atleast_2d(np.asarray(zb, dtype=np.float64))
    if za.shape != zb.shape:
        raise LossError(f"pair batches differ in shape: {za.shape} vs {zb.shape}")
    return za, zb


def pairwise_infonce(za, zb, tau: float):
    """Symmetric InfoNCE between two modalities of the same batch.

    Returns ``(value, grad_a, grad_b)``. Per direction ``g_ml = (p_ml - [m=l]) / (N tau)``;
    the two directions are averaged.
    """
    za, zb = _check_pair(za, zb)
    n = za.shape[0]
    if n < 2:
        raise LossError("pairwise InfoNCE needs at least two instances")
    logits = za @ zb.T / tau
    value = 0.0
    g = np.zeros_like(logits)
    eye = np.eye(n)
    for axis in (1, 0):
        m = logits.max(axis=axis, keepdims=True)
        e = np.exp(logits - m)
        lse = m + np.log(e.sum(axis=axis, keepdims=True))
        value += 0.5 * float(np.mean(lse.ravel() - np.diag(logits)))
        p = e / e.sum(axis=axis, keepdims=True)
        g += 0.5 * (p - eye) / (n * tau)
    return value, g @ zb, g.T @ za


def pairwise_wbce(za, zb, targets, cfg: LossConfig):
    """wBCE on raw cross-modal cosines ``<z_a^(m), z_b^(l)>``.

    Returns ``(value, grad_a, grad_b, grad_targets, empty_groups)``.
    """
    za, zb = _check_pair(za, zb)
    value, gs, gt, empty = wbce_from_sims(za @ zb.T, targets, cfg)
    return value, gs @ zb, gs.T @ za, gt, empty


def pair_indices(variant: str, modalities=DEFAULT_MODALITIES):
    if variant not in PAIR_SETS:
        raise LossError(f"unknown pairwise variant {variant!r}")
    names = list(modalities)
    out = []
    for a, b in PAIR_SETS[variant]:
        if a not in names or b not in names:
            raise LossError(f"variant {variant} needs modality {a if a not in names else b!r}")
        out.append((names.index(a), names.index(b)))
    return out


def composite_pairwise(variant: str, z, targets, cfg: LossConfig, modalities=DEFAULT_MODALITIES):
    """Sum of pairwise wBCE terms over a variant's modality pairs."""
    z = np.asarray(z, dtype=np.float64)
    pairs = pair_indices(variant, modalities)
    grad_z = np.zeros_like(z)
    grad_t = np.zeros(np.shape(targets))
    value = 0.0
    comps = {}
    empty = set()
    for a, b in pairs:
        v, ga, gb, gt, e = pairwise_wbce(z[:, a], z[:, b], targets, cfg)
        value += v
        grad_z[:, a] += ga
        grad_z[:, b] += gb
        grad_t += gt
        comps[f"{modalities[a]}-{modalities[b]}"] = v
        empty.update(e)
    return BatchLossReport(value, grad_z, None, grad_t, comps, tuple(sorted(empty)))
