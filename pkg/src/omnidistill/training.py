"""Plain mini-batch training of projection heads under an inner objective.

Shared by expert trajectories and the train-from-scratch evaluation.
"""

from __future__ import annotations

import numpy as np

from . import model, spectral
from .objectives import LossConfig, inner_loss


class TrainingError(RuntimeError):
    pass


def loss_and_grads(heads, raw, targets, cfg: LossConfig, objective="hopa", jitter_seed=0):
    """Inner loss on one batch and its gradient w.r.t. every head.

    A degenerate leading singular value is resolved by seeded jitter of the
    affected rows before the loss is evaluated.
    """
    z = model.forward(heads, raw)
    try:
        rep = inner_loss(z, targets, cfg, objective, heads.names)
    except spectral.SpectralError:
        z, _ = spectral.robust_spectrum(z, seed=jitter_seed)
        rep = inner_loss(z, targets, cfg, objective, heads.names)
    return rep, model.backward(heads, raw, rep.grad_z)


def batch_order(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def shuffle_stream(seed: int) -> np.random.Generator:
    """Counter-based stream so a run's batching depends only on its seed."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def train_heads(
    heads,
    X,
    targets,
    *,
    lr,
    epochs,
    batch_size,
    cfg: LossConfig,
    objective="hopa",
    seed=0,
    snapshots=False,
):
    """Run ``epochs`` of momentum-free SGD.

    ``targets`` is an ``n x n`` similarity matrix or ``None`` for identity.
    Returns ``(final_heads, checkpoints, epoch_losses)`` where ``epoch_losses[0]``
    is the loss of the initial heads over the first epoch's batches and
    ``epoch_losses[e]`` the mean batch loss seen during epoch ``e``.
    """
    n = X[0].shape[0]
    if n == 0:
        raise TrainingError("empty training set")
    rng = shuffle_stream(seed)
    state = model.SgdState(lr, 0.0)
    checkpoints = [heads] if snapshots else []
    losses = []
    step = 0
    for epoch in range(epochs):
        batches = batch_order(n, batch_size, rng)
        if epoch == 0:
            losses.append(_mean_loss(heads, X, targets, batches, cfg, objective))
        seen = []
        for idx in batches:
            raw = [x[idx] for x in X]
            t = np.eye(len(idx)) if targets is None else targets[np.ix_(idx, idx)]
            rep, grads = loss_and_grads(heads, raw, t, cfg, objective, jitter_seed=step)
            if not np.isfinite(rep.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            seen.append(rep.value)
            if lr != 0.0:
                heads = model.step_heads(heads, grads, state)
            step += 1
        losses.append(float(np.mean(seen)))
        if snapshots:
            checkpoints.append(heads)
    return heads, checkpoints, losses


def _mean_loss(heads, X, targets, batches, cfg, objective):
    vals = []
    for idx in batches:
        raw = [x[idx] for x in X]
        t = np.eye(len(idx)) if targets is None else targets[np.ix_(idx, idx)]
        z = model.forward(heads, raw)
        try:
            vals.append(inner_loss(z, t, cfg, objective, heads.names).value)
        except spectral.SpectralError:
            z, _ = spectral.robust_spectrum(z)
            vals.append(inner_loss(z, t, cfg, objective, heads.names).value)
    return float(np.mean(vals))
