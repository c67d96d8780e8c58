"""Differentiable (torch, float64) versions of the inner objectives.

These mirror :mod:`omnidistill.objectives` op for op so that autograd can
unroll student training steps and differentiate the trajectory-matching loss
back to synthetic embeddings, the similarity factors and the step size.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .objectives import PAIR_SETS, PROXY_OBJECTIVES, TARGET_EPS, LossConfig, LossError, pair_indices

DTYPE = torch.float64
EIG_FLOOR = 1e-300


def as_tensor(x, requires_grad=False):
    t = torch.tensor(np.array(x, dtype=np.float64))
    return t.requires_grad_(requires_grad)


def encode(weights, raw):
    """Normalized head outputs stacked to ``(B, k, d)``."""
    zs = []
    for w, x in zip(weights, raw):
        y = x @ w.T
        zs.append(y / torch.linalg.vector_norm(y, dim=1, keepdim=True))
    return torch.stack(zs, dim=1)


def spectrum(z):
    """Descending eigenpairs of each Gram matrix with the sign convention applied."""
    G = z @ z.transpose(-1, -2)
    G = 0.5 * (G + G.transpose(-1, -2))
    lam, U = torch.linalg.eigh(G)
    lam = lam.flip(-1)
    U = U.flip(-1)
    with torch.no_grad():
        total = U.sum(dim=-2, keepdim=True)
        first_idx = (U.abs() > 0).to(torch.int64).argmax(dim=-2, keepdim=True)
        first = torch.gather(U, -2, first_idx)
        sign = torch.where(total > 0, 1.0, torch.where(total < 0, -1.0, torch.where(first < 0, -1.0, 1.0)))
    U = U * sign.to(DTYPE)
    return lam, U


def sigmas_from(lam):
    return torch.sqrt(torch.clamp(lam, min=EIG_FLOOR))


def proxies(z, lam, U, rank=1):
    w = U[..., :, :rank].transpose(-1, -2) @ z  # (B, r, d)
    s = torch.sqrt(lam[..., :rank].sum(dim=-1))
    return w.reshape(w.shape[0], -1) / s[:, None]


def modality_loss(lam, tau):
    logits = sigmas_from(lam) / tau
    return -(F.log_softmax(logits, dim=-1)[:, 0]).mean()


def clamp_targets(t):
    return torch.clamp(t, TARGET_EPS, 1.0 - TARGET_EPS)


def wbce_from_sims(sims, targets, cfg: LossConfig):
    y = targets
    x = sims / cfg.tau_prime
    bce = F.softplus(x) - y * x
    with torch.no_grad():
        pos = targets > cfg.beta
        weights = torch.zeros_like(y)
        for group in (pos, ~pos):
            count = int(group.sum())
            if count:
                weights[group] = 1.0 / count
    return (weights * bce).sum()


def inner_loss(z, targets, cfg: LossConfig, objective="hopa", modalities=("video", "audio", "text")):
    """Scalar inner loss and a dict of its named components."""
    comps = {}
    if objective in PAIR_SETS:
        total = z.new_zeros(())
        for a, b in pair_indices(objective, modalities):
            v = wbce_from_sims(z[:, a] @ z[:, b].T, targets, cfg)
            comps[f"{modalities[a]}-{modalities[b]}"] = v
            total = total + v
        return total, comps
    if objective not in PROXY_OBJECTIVES:
        raise LossError(f"unknown objective {objective!r}")
    lam, U = spectrum(z)
    total = z.new_zeros(())
    if objective != "no_LM":
        comps["L_M"] = modality_loss(lam, cfg.tau)
        total = total + comps["L_M"]
    if objective != "no_wBCE":
        P = proxies(z, lam, U, 2 if objective == "rank2" else 1)
        comps["L_wBCE"] = wbce_from_sims(P @ P.T, targets, cfg)
        total = total + comps["L_wBCE"]
    return total, comps


def similarity_targets(A, B):
    n = A.shape[0]
    return clamp_targets(torch.eye(n, dtype=DTYPE) + A @ B.T)
