"""Gram-matrix spectra of stacked modality embeddings and the rank-1 proxy.

An instance is a ``(k, d)`` matrix ``z`` whose rows are unit-norm modality
embeddings. Everything here also accepts a batch ``(N, k, d)``; leading axes
are carried through unchanged.

The spectrum is taken from the tiny ``k x k`` Gram matrix with a cyclic
Jacobi solver, and right singular vectors are recovered by duality,
``sigma_j v_j = z^T u_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAP_TOL = 1e-6
JITTER = 1e-7
NEG_EIG_TOL = 1e-10
UNIT_NORM_TOL = 1e-9


class SpectralError(ValueError):
    """Invalid or degenerate input to a spectral routine."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GramSpectrum:
    """Eigen-structure of ``G = z z^T`` for one instance or a batch.

    ``left_vectors[..., :, j]`` is ``u_j``; ``right_vectors[..., j, :]`` is
    ``v_j`` (zero where ``sigma_j == 0``). Eigenvalues are sorted descending.
    """

    eigenvalues: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    sigmas: np.ndarray
    degenerate: np.ndarray
    sweeps: int = 0

    @property
    def sigma1(self) -> np.ndarray:
        return self.sigmas[..., 0]

    @property
    def u1(self) -> np.ndarray:
        return self.left_vectors[..., :, 0]

    @property
    def proxy(self) -> np.ndarray:
        return self.right_vectors[..., 0, :]

    @property
    def degenerate_flag(self):
        flag = self.degenerate
        return bool(flag) if np.ndim(flag) == 0 else flag

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[-1]


@dataclass(frozen=True)
class Rank1Approx:
    matrix: np.ndarray
    frobenius_error: float


def check_embeddings(z: np.ndarray, tol: float = UNIT_NORM_TOL) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise SpectralError(f"expected (k, d) or (N, k, d) embeddings, got shape {z.shape}")
    k, d = z.shape[-2:]
    if k < 2:
        raise SpectralError(f"need at least 2 modalities, got k={k}")
    if d < k:
        raise SpectralError(f"embedding dim d={d} smaller than modality count k={k}")
    norms = np.linalg.norm(z, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise SpectralError(f"rows must be unit-norm (max deviation {worst:.3e})")
    return z


def gram(z) -> np.ndarray:
    """Pairwise inner products of the modality rows, ``z z^T``."""
    if isinstance(z, (list, tuple)):
        dims = {len(row) for row in z}
        if len(dims) != 1:
            raise SpectralError(f"rows have mismatched dimensions {sorted(dims)}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise SpectralError(f"expected at least 2-D input, got shape {z.shape}")
    g = z @ np.swapaxes(z, -1, -2)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Cyclic Jacobi eigensolver for a batch of small symmetric matrices.

    Returns ``(eigenvalues, eigenvectors, sweeps)`` with eigenvalues in
    descending order and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape(-1, n, n)
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    scale = np.maximum(np.linalg.norm(a, axis=(1, 2)), np.finfo(float).tiny)
    pairs = [(p, q) for p in range(n - 1) for q in range(p + 1, n)]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        off = np.sqrt(sum(2.0 * a[:, p, q] ** 2 for p, q in pairs))
        if np.all(off <= tol * scale):
            sweeps -= 1
            break
        for p, q in pairs:
            apq = a[:, p, q]
            active = np.abs(apq) > tol * scale * 1e-3
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(1.0 + theta**2))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = t * c
            # A <- J^T A J with J the (p, q) Givens rotation
            ap = a[:, :, p].copy()
            aq = a[:, :, q].copy()
            a[:, :, p] = c[:, None] * ap - s[:, None] * aq
            a[:, :, q] = s[:, None] * ap + c[:, None] * aq
            ap = a[:, p, :].copy()
            aq = a[:, q, :].copy()
            a[:, p, :] = c[:, None] * ap - s[:, None] * aq
            a[:, q, :] = s[:, None] * ap + c[:, None] * aq
            vp = v[:, :, p].copy()
            vq = v[:, :, q].copy()
            v[:, :, p] = c[:, None] * vp - s[:, None] * vq
            v[:, :, q] = s[:, None] * vp + c[:, None] * vq
    else:
        off = np.sqrt(sum(2.0 * a[:, p, q] ** 2 for p, q in pairs))
        if not np.all(off <= tol * scale * 10):
            raise ConvergenceError(f"Jacobi eigensolver did not converge after {max_sweeps} sweeps")
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    w = w.reshape(batch_shape + (n,))
    v = v.reshape(batch_shape + (n, n))
    if squeeze:
        w, v = w[0], v[0]
    return w, v, sweeps


def orient(u: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so each has a non-negative entry sum.

    Exact zero sums are resolved by making the first nonzero entry positive.
    """
    total = u.sum(axis=-2, keepdims=True)
    idx = np.argmax(np.abs(u) > 0, axis=-2)[..., None, :]
    first = np.take_along_axis(u, idx, axis=-2)
    sign = np.where(total > 0, 1.0, np.where(total < 0, -1.0, np.where(first < 0, -1.0, 1.0)))
    return u * sign


def spectrum(z, gap_tol: float = GAP_TOL, validate: bool = True) -> GramSpectrum:
    """Full spectrum of the Gram matrix plus right vectors by duality.

    ``validate=False`` skips the unit-norm row check (finite-difference probes
    step off the sphere).
    """
    if gap_tol <= 0:
        raise SpectralError("gap_tol must be positive")
    z = check_embeddings(z) if validate else np.asarray(z, dtype=np.float64)
    lam, u, sweeps = jacobi_eigh(gram(z))
    if np.any(lam < -NEG_EIG_TOL):
        raise SpectralError(f"Gram matrix not PSD: eigenvalue {float(lam.min()):.3e}")
    lam = np.clip(lam, 0.0, None)
    sig = np.sqrt(lam)
    if np.any(sig[..., 0] == 0.0):
        raise SpectralError("leading singular value is zero (all-zero representation)")
    u = orient(u)
    w = np.swapaxes(u, -1, -2) @ z  # row j is z^T u_j = sigma_j v_j
    safe = np.where(sig > 0, sig, 1.0)
    v = np.where(sig[..., None] > 0, w / safe[..., None], 0.0)
    degenerate = (lam[..., 0] - lam[..., 1]) < gap_tol
    return GramSpectrum(lam, u, v, sig, np.asarray(degenerate), sweeps)


def rank1_approx(s: GramSpectrum, G: np.ndarray) -> Rank1Approx:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (s.k, s.k):
        raise SpectralError(f"Gram shape {G.shape} does not match spectrum k={s.k}")
    u1 = s.u1
    a = s.eigenvalues[0] * np.outer(u1, u1)
    return Rank1Approx(a, float(np.linalg.norm(G - a)))


def proxy_similarity(v1_i, v1_j) -> float:
    return float(np.dot(np.asarray(v1_i, dtype=np.float64), np.asarray(v1_j, dtype=np.float64)))


def _mode_gaps_ok(lam: np.ndarray, j: int, gap_tol: float) -> np.ndarray:
    ok = np.ones(lam.shape[:-1], dtype=bool)
    if j > 0:
        ok &= (lam[..., j - 1] - lam[..., j]) >= gap_tol
    if j + 1 < lam.shape[-1]:
        ok &= (lam[..., j] - lam[..., j + 1]) >= gap_tol
    return ok


def sigma_gradient(z, j: int = 1, gap_tol: float = GAP_TOL) -> np.ndarray:
    """Gradient of the j-th singular value (1-based) w.r.t. ``z``: ``u_j v_j^T``."""
    s = spectrum(z, gap_tol, validate=False)
    idx = j - 1
    if not 0 <= idx < s.k:
        raise SpectralError(f"mode index {j} outside 1..{s.k}")
    if not np.all(_mode_gaps_ok(s.eigenvalues, idx, gap_tol)) or np.any(s.sigmas[..., idx] == 0):
        raise SpectralError(
            f"singular value {j} is repeated or zero; jitter z (see jitter()) and retry"
        )
    u = s.left_vectors[..., :, idx]
    v = s.right_vectors[..., idx, :]
    return u[..., :, None] * v[..., None, :]


def mode_matrices(s: GramSpectrum) -> np.ndarray:
    """Rank-1 modes ``u_j v_j^T`` stacked on axis -3: shape ``(..., k, k, d)``."""
    u = np.moveaxis(s.left_vectors, -1, -2)  # (..., j, k)
    return u[..., :, :, None] * s.right_vectors[..., :, None, :]


def jitter(z: np.ndarray, seed: int, scale: float = JITTER) -> np.ndarray:
    """Deterministic small perturbation of the rows, renormalized."""
    rng = np.random.default_rng(seed)
    z = np.asarray(z, dtype=np.float64) + scale * rng.standard_normal(np.shape(z))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def robust_spectrum(z, seed: int = 0, gap_tol: float = GAP_TOL, attempts: int = 5):
    """Spectrum with seeded jitter retries on degenerate leading gaps.

    The jitter starts at ``JITTER`` and grows tenfold per retry, since a
    perturbation of size ``e`` only opens a gap of order ``e``.
    Returns ``(z_used, spectrum)``.
    """
    s = spectrum(z, gap_tol)
    tries = 0
    while np.any(s.degenerate) and tries < attempts:
        bad = np.asarray(s.degenerate)
        z = np.array(z, dtype=np.float64)
        if z.ndim == 2:
            z = jitter(z, seed + tries, JITTER * 10**tries)
        else:
            z[bad] = jitter(z[bad], seed + tries, JITTER * 10**tries)
        s = spectrum(z, gap_tol)
        tries += 1
    if np.any(s.degenerate):
        raise SpectralError("leading singular value stays degenerate after jitter")
    return z, s
