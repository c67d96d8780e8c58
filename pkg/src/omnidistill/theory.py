"""Numerical checks of the trajectory-bound theory on desk-scale problems.

Four pieces:

* the endpoint bound ``||theta_n^S - theta_n^T|| <= eta sum_r (1 + eta L)^(n-1-r) Delta_r``
  for plain gradient descent on real versus synthetic data,
* the spectral mismatch model ``Delta_r <= C sum_j |alpha_j| eps_j`` under a
  shared Jacobian and shared sensitivities,
* mode projections ``beta_j = u_j^T (dL/dz) v_j`` separating single-mode from
  full-spectrum objectives,
* the certified-bound comparison ``U_A <= U_B``.

``L`` and ``C`` are empirical (probe maxima times a 1.5 safety factor), so the
checks are conservative-empirical rather than worst-case certificates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import model, objectives, spectral
from .datagen import GeneratorConfig, generate
from .objectives import LossConfig
from .training import loss_and_grads

SAFETY = 1.5
SLACK = 1e-10
STRICT_TAIL = 1e-9
BOUND_TOL = 1e-12
FD_FLOOR = 1e-5
TRIAL_NAMES = ("video", "audio", "text")


# -- gradient fields ------------------------------------------------------------


def gradient_field(template: model.ProjectionHeads, X, targets, cfg: LossConfig, objective="hopa"):
    """Flat full-batch gradient ``theta -> g(theta)`` of the inner loss on ``X``."""
    X = [np.asarray(x, dtype=np.float64) for x in X]
    targets = np.asarray(targets, dtype=np.float64)

    def g(theta):
        heads = template.with_flat(theta)
        _, grads = loss_and_grads(heads, X, targets, cfg, objective)
        return np.concatenate([w.ravel() for w in grads])

    return g


def descend(field_fn, theta0, n: int, eta: float):
    """``n`` steps of ``theta <- theta - eta g(theta)``; returns ``n + 1`` states."""
    states = [np.asarray(theta0, dtype=np.float64)]
    for _ in range(n):
        states.append(states[-1] - eta * field_fn(states[-1]))
    return states


# -- Lipschitz estimate -----------------------------------------------------------


def estimate_lipschitz(
    field_fn,
    states,
    probes=(),
    *,
    n_random: int = 2,
    radius: float = 1e-2,
    seed: int = 0,
    safety: float = SAFETY,
) -> float:
    """``safety`` times the largest observed ``||g(a) - g(b)|| / ||a - b||``.

    Candidates are every pair of recorded ``states`` (coincident pairs are
    skipped), each explicit ``(a, b)`` in ``probes`` and ``n_random`` seeded
    perturbations of relative size ``radius`` around every state. Adding
    probes can only raise the estimate.
    """
    states = [np.asarray(s, dtype=np.float64) for s in states]
    if len(states) < 2:
        raise ValueError("need at least two states")
    grads = [field_fn(s) for s in states]
    best = 0.0
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            dist = np.linalg.norm(states[i] - states[j])
            if dist > 0.0:
                best = max(best, np.linalg.norm(grads[i] - grads[j]) / dist)
    for a, b in probes:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        dist = np.linalg.norm(a - b)
        if dist == 0.0:
            raise ValueError("zero-displacement probe")
        best = max(best, np.linalg.norm(field_fn(a) - field_fn(b)) / dist)
    rng = np.random.default_rng(seed)
    for s, gs in zip(states, grads):
        for _ in range(n_random):
            step = rng.standard_normal(s.shape)
            step *= radius * max(np.linalg.norm(s), 1.0) / np.linalg.norm(step)
            best = max(best, np.linalg.norm(field_fn(s + step) - gs) / np.linalg.norm(step))
    return float(safety * best)


# -- endpoint bound ---------------------------------------------------------------


@dataclass
class BoundReport:
    deltas: np.ndarray
    L: float
    eta: float
    n: int
    bound: float
    gap: float
    satisfied: bool
    student_states: list = field(default_factory=list, repr=False)
    teacher_states: list = field(default_factory=list, repr=False)


def endpoint_bound(deltas, L: float, eta: float) -> float:
    n = len(deltas)
    weights = (1.0 + eta * L) ** np.arange(n - 1, -1, -1)
    return float(eta * np.dot(weights, deltas))


def verify_endpoint_bound(
    real_X,
    syn_X,
    start: model.ProjectionHeads,
    n: int,
    eta: float,
    *,
    cfg: LossConfig = LossConfig(),
    real_targets=None,
    syn_targets=None,
    objective: str = "hopa",
    seed: int = 0,
) -> BoundReport:
    """Teacher descends on ``real_X``, student on ``syn_X``, both from ``start``.

    ``Delta_r`` compares both gradient fields at the student's ``r``-th state.
    ``L`` is estimated on the teacher field with the matched state pairs
    ``(theta_r^S, theta_r^T)`` among the probes.
    """
    if n < 1:
        raise ValueError("rollout length must be >= 1")
    real_targets = np.eye(real_X[0].shape[0]) if real_targets is None else real_targets
    syn_targets = np.eye(syn_X[0].shape[0]) if syn_targets is None else syn_targets
    g_T = gradient_field(start, real_X, real_targets, cfg, objective)
    g_S = gradient_field(start, syn_X, syn_targets, cfg, objective)
    theta0 = start.flat()
    student = descend(g_S, theta0, n, eta)
    teacher = descend(g_T, theta0, n, eta)
    deltas = np.array([np.linalg.norm(g_S(s) - g_T(s)) for s in student[:-1]])
    pairs = [(s, t) for s, t in zip(student[:-1], teacher[:-1]) if np.linalg.norm(s - t) > 0.0]
    L = estimate_lipschitz(g_T, student[:-1] + teacher[:-1] if n > 1 else [theta0, student[1]], pairs, seed=seed)
    bound = endpoint_bound(deltas, L, eta)
    gap = float(np.linalg.norm(student[-1] - teacher[-1]))
    return BoundReport(deltas, L, eta, n, bound, gap, gap <= bound + SLACK, student, teacher)


# -- mode projections ---------------------------------------------------------------


MODE_OBJECTIVES = ("sigma1", "principal", "L_M", "infonce", "pair_wbce")


def objective_gradient(name: str, z: np.ndarray, cfg: LossConfig = LossConfig(), modalities=TRIAL_NAMES):
    """Gradient of a named objective w.r.t. a batch ``z`` of shape ``(N, k, d)``.

    ``sigma1`` is ``sum_i sigma_1``; ``principal`` is the mode-1 part of
    ``L_M`` (``-mean_i sigma_1 / tau``); ``infonce`` sums symmetric InfoNCE
    over all modality pairs; ``pair_wbce`` is the 3-pair wBCE composite.
    """
    z = np.asarray(z, dtype=np.float64)
    n, k, _ = z.shape
    s = spectral.spectrum(z, validate=False)
    if name == "sigma1":
        return spectral.mode_matrices(s)[:, 0]
    if name == "principal":
        return -spectral.mode_matrices(s)[:, 0] / (n * cfg.tau)
    if name == "L_M":
        return objectives.modality_loss(s, cfg)[1]
    if name == "infonce":
        grad = np.zeros_like(z)
        for a in range(k):
            for b in range(a + 1, k):
                _, ga, gb = objectives.pairwise_infonce(z[:, a], z[:, b], cfg.tau)
                grad[:, a] += ga
                grad[:, b] += gb
        return grad
    if name == "pair_wbce":
        names = tuple(modalities[:k])
        return objectives.composite_pairwise("3pair", z, np.eye(n), cfg, names).grad_z
    raise ValueError(f"unknown objective {name!r}; choose from {', '.join(MODE_OBJECTIVES)}")


def mode_projection(grad_z: np.ndarray, spec: spectral.GramSpectrum) -> np.ndarray:
    """``beta_j = u_j^T grad v_j`` per instance; shape ``(..., k)``."""
    modes = spectral.mode_matrices(spec)
    return np.einsum("...jkd,...kd->...j", modes, grad_z)


def mode_projections(name: str, z: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    s = spectral.spectrum(z, validate=False)
    if np.any(s.degenerate):
        raise spectral.SpectralError("mode projections need a simple leading singular value")
    return mode_projection(objective_gradient(name, z, cfg), s)


def random_unit_batch(rng, n=8, k=3, d=8) -> np.ndarray:
    z = rng.standard_normal((n, k, d))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


# -- spectral mismatch model ---------------------------------------------------------


def head_jvp(heads: model.ProjectionHeads, raw, tangent) -> np.ndarray:
    """Directional derivative of ``forward`` along parameter direction ``tangent``."""
    out = []
    for w, v, x in zip(heads.weights, tangent, raw):
        y = w @ x
        norm = np.linalg.norm(y)
        zm = y / norm
        dy = v @ x
        out.append((dy - zm * (zm @ dy)) / norm)
    return np.stack(out)


def jacobian_norm(heads: model.ProjectionHeads, raw, iters: int = 200, seed: int = 0, tol: float = 1e-13) -> float:
    """Operator norm of ``d vec(z) / d theta`` for one instance by power iteration."""
    rng = np.random.default_rng(seed)
    v = [rng.standard_normal(w.shape) for w in heads.weights]
    est = 0.0
    for _ in range(iters):
        nv = np.sqrt(sum(np.sum(a * a) for a in v))
        v = [a / nv for a in v]
        jtj = model.backward(heads, raw, head_jvp(heads, raw, v))
        new = np.sqrt(np.sqrt(sum(np.sum(a * a) for a in jtj)))
        v = list(jtj)
        if abs(new - est) <= tol * max(new, 1.0):
            est = new
            break
        est = new
    return float(est)


def sensitivities(name: str, sigmas: np.ndarray, tau: float) -> np.ndarray:
    """``alpha_j = df/dsigma_j`` for a single-instance spectral objective."""
    k = sigmas.shape[-1]
    if name == "principal":
        alpha = np.zeros(k)
        alpha[0] = -1.0 / tau
        return alpha
    if name == "L_M":
        alpha = objectives.softmax_sigma(sigmas[None], tau)[0]
        alpha[0] -= 1.0
        return alpha / tau
    if name == "nuclear":
        return np.full(k, -1.0 / tau)
    raise ValueError(f"unknown spectral objective {name!r}")


def mode_errors(s_S: spectral.GramSpectrum, s_T: spectral.GramSpectrum) -> np.ndarray:
    """``eps_j = ||u_j^S v_j^S^T - u_j^T v_j^T^T||_F`` for one instance pair."""
    diff = spectral.mode_matrices(s_S) - spectral.mode_matrices(s_T)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


@dataclass
class SpectralSensitivity:
    alpha: np.ndarray  # (steps, pairs, k)
    eps: np.ndarray  # (steps, pairs, k)
    C: np.ndarray  # (steps,)


@dataclass
class MismatchReport:
    lhs: np.ndarray  # shared-Jacobian mismatch per (step, pair)
    rhs: np.ndarray
    actual: np.ndarray  # true per-instance gradient mismatch, for reference
    rep_gap: np.ndarray  # ||z^S - z^T||_F
    small_gap: np.ndarray  # |lambda_1 - lambda_2| small: sign-flip risk
    sensitivity: SpectralSensitivity
    violations: list

    @property
    def satisfied(self) -> bool:
        return not self.violations

    @property
    def max_ratio(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.rhs > 0, self.lhs / self.rhs, np.where(self.lhs > SLACK, np.inf, 0.0))
        return float(np.max(r)) if r.size else 0.0


def spectral_mismatch_check(
    states,
    template: model.ProjectionHeads,
    student_X,
    teacher_X,
    *,
    objective: str = "L_M",
    tau: float = 0.1,
    flip_gap: float = 1e-3,
) -> MismatchReport:
    """Per step and instance pair, ``||J_T^T vec(sum_j alpha_j dM_j)|| <= C sum_j |alpha_j| eps_j``.

    ``alpha`` is evaluated at the teacher representation and shared, ``J_T``
    is the teacher instance's encoder Jacobian and ``C`` is 1.5 times the
    largest power-iteration norm of ``J_T`` at that step.
    """
    m = min(student_X[0].shape[0], teacher_X[0].shape[0])
    R = len(states)
    k = template.k
    alpha = np.zeros((R, m, k))
    eps = np.zeros((R, m, k))
    C = np.zeros(R)
    lhs = np.zeros((R, m))
    rhs = np.zeros((R, m))
    actual = np.zeros((R, m))
    gap = np.zeros((R, m))
    risky = np.zeros((R, m), dtype=bool)
    violations = []
    for r, theta in enumerate(states):
        heads = template.with_flat(theta)
        jn = []
        for i in range(m):
            xs = [x[i] for x in student_X]
            xt = [x[i] for x in teacher_X]
            zs, zt = model.forward(heads, xs), model.forward(heads, xt)
            ss = spectral.spectrum(zs, validate=False)
            st = spectral.spectrum(zt, validate=False)
            a = sensitivities(objective, st.sigmas, tau)
            e = mode_errors(ss, st)
            dM = spectral.mode_matrices(ss) - spectral.mode_matrices(st)
            shared = np.einsum("j,jkd->kd", a, dM)
            lhs[r, i] = np.sqrt(sum(np.sum(g * g) for g in model.backward(heads, xt, shared)))
            grad_s = np.einsum("j,jkd->kd", sensitivities(objective, ss.sigmas, tau), spectral.mode_matrices(ss))
            grad_t = np.einsum("j,jkd->kd", a, spectral.mode_matrices(st))
            diff = [p - q for p, q in zip(model.backward(heads, xs, grad_s), model.backward(heads, xt, grad_t))]
            actual[r, i] = np.sqrt(sum(np.sum(g * g) for g in diff))
            gap[r, i] = np.linalg.norm(zs - zt)
            lam = np.concatenate([ss.eigenvalues[:2], st.eigenvalues[:2]])
            risky[r, i] = min(lam[0] - lam[1], lam[2] - lam[3]) < flip_gap
            alpha[r, i], eps[r, i] = a, e
            jn.append(jacobian_norm(heads, xt, seed=r * m + i))
        C[r] = SAFETY * max(jn)
        rhs[r] = C[r] * np.sum(np.abs(alpha[r]) * eps[r], axis=1)
        for i in range(m):
            if lhs[r, i] > rhs[r, i] + SLACK:
                violations.append((r, i, lhs[r, i], rhs[r, i], alpha[r, i].tolist(), eps[r, i].tolist()))
    return MismatchReport(lhs, rhs, actual, gap, risky, SpectralSensitivity(alpha, eps, C), violations)


# -- bound comparison -------------------------------------------------------------------


def compare_bounds(alpha_A, alpha_B, eps, C: float, L: float, eta: float, n: int | None = None):
    """Certified bounds ``(U_A, U_B)`` from per-step sensitivities and mode errors.

    Arrays have shape ``(steps, k)`` or ``(steps, pairs, k)``. Requires
    ``alpha_A[..., 0] == alpha_B[..., 0]`` and ``alpha_A[..., 1:] == 0``.
    """
    alpha_A, alpha_B, eps = (np.asarray(a, dtype=np.float64) for a in (alpha_A, alpha_B, eps))
    if alpha_A.ndim == 2:
        alpha_A, alpha_B, eps = alpha_A[:, None], alpha_B[:, None], eps[:, None]
    if not (alpha_A.shape == alpha_B.shape == eps.shape):
        raise ValueError("alpha_A, alpha_B and eps must share a shape")
    if not np.array_equal(alpha_A[..., 0], alpha_B[..., 0]):
        raise ValueError("mode-1 sensitivities must match")
    if np.any(alpha_A[..., 1:] != 0.0):
        raise ValueError("single-mode sensitivities must vanish beyond mode 1")
    n = alpha_A.shape[0] if n is None else n
    w = eta * C * (1.0 + eta * L) ** np.arange(n - 1, -1, -1)
    per_A = np.sum(np.abs(alpha_A) * eps, axis=(1, 2))
    per_B = np.sum(np.abs(alpha_B) * eps, axis=(1, 2))
    return float(np.dot(w, per_A)), float(np.dot(w, per_B))


def matched_full_spectrum(alpha_A1: float, beta: np.ndarray, tiny: float = 1e-12):
    """Rescale projections ``beta`` so mode 1 equals ``alpha_A1``.

    Returns ``(alpha_B, scale, replaced)``; when ``beta_1`` is ~0 the mode-1
    entry is replaced outright and ``scale`` is 1.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if abs(beta[0]) > tiny:
        scale = alpha_A1 / beta[0]
        out = scale * beta
        replaced = False
    else:
        scale, out, replaced = 1.0, beta.copy(), True
    out[0] = alpha_A1
    return out, float(scale), replaced


# -- trials ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    seed: int
    n: int
    eta: float
    n_real: int = 24
    n_syn: int = 8
    d_in: tuple = (6, 5, 7)
    d: int = 4
    syn_noise: float = 0.3

    @staticmethod
    def random(seed: int, max_steps: int = 16) -> "TrialConfig":
        rng = np.random.default_rng([seed, 101])
        return TrialConfig(seed, int(rng.integers(1, max_steps + 1)), float(10 ** rng.uniform(-2.0, -0.5)))


@dataclass
class TrialResult:
    trial: int
    n: int
    eta: float
    L: float
    C: float
    bound: float
    gap: float
    satisfied: bool
    U_A: float
    U_B: float
    max_beta_tail: float
    tail_mass: float
    strict_ok: bool
    mismatch_ok: bool
    rescale: list = field(default_factory=list, repr=False)
    replaced: int = 0

    @property
    def theorem_ok(self) -> bool:
        return self.U_A <= self.U_B + BOUND_TOL and self.strict_ok

    @property
    def ok(self) -> bool:
        return self.satisfied and self.theorem_ok and self.mismatch_ok


def trial_data(cfg: TrialConfig):
    """Real instances, their noisy synthetic copies and soft synthetic targets."""
    gen = GeneratorConfig(
        N=cfg.n_real, d_in=cfg.d_in, latent_dim=3, num_classes=3, modality_noise=(0.2,) * 3, names=TRIAL_NAMES, seed=cfg.seed
    )
    real = generate(gen, "train")
    rng = np.random.default_rng([cfg.seed, 202])
    idx = np.sort(rng.choice(cfg.n_real, cfg.n_syn, replace=False))
    syn = []
    for x in real.X:
        y = x[idx] + cfg.syn_noise * rng.standard_normal((cfg.n_syn, x.shape[1]))
        syn.append(y / np.linalg.norm(y, axis=1, keepdims=True))
    a = rng.uniform(-0.5, 0.5, (cfg.n_syn, 2))
    b = rng.uniform(-0.5, 0.5, (cfg.n_syn, 2))
    targets = objectives.clamp_targets(np.eye(cfg.n_syn) + a @ b.T)[0]
    paired_real = [x[idx] for x in real.X]
    return real, syn, targets, paired_real


def lemma1_trial(cfg: TrialConfig, loss: LossConfig = LossConfig()):
    """Endpoint-bound check for one trial; returns ``(report, start, syn, paired_real)``."""
    real, syn, targets, paired_real = trial_data(cfg)
    start = model.init_heads(cfg.d, cfg.d_in, cfg.seed, TRIAL_NAMES)
    rep = verify_endpoint_bound(real.X, syn, start, cfg.n, cfg.eta, cfg=loss, syn_targets=targets, seed=cfg.seed)
    return rep, start, syn, paired_real


def run_trial(cfg: TrialConfig, loss: LossConfig = LossConfig()) -> TrialResult:
    """Endpoint bound, spectral mismatch model and bound comparison on one trial."""
    rep, start, syn, paired_real = lemma1_trial(cfg, loss)
    states = rep.student_states[:-1]
    mm = spectral_mismatch_check(states, start, syn, paired_real, objective="L_M", tau=loss.tau)
    C = float(np.max(mm.sensitivity.C))

    R, m, k = mm.sensitivity.alpha.shape
    alpha_A = np.zeros((R, m, k))
    alpha_B = np.zeros((R, m, k))
    beta_tail = 0.0
    scales, replaced = [], 0
    for r, theta in enumerate(states):
        heads = start.with_flat(theta)
        zt = model.forward(heads, paired_real)
        beta = mode_projection(objective_gradient("infonce", zt, loss), spectral.spectrum(zt, validate=False))
        beta_tail = max(beta_tail, float(np.max(np.abs(beta[:, 1:]))))
        for i in range(m):
            a1 = mm.sensitivity.alpha[r, i, 0]
            alpha_A[r, i, 0] = a1
            alpha_B[r, i], s, rep_flag = matched_full_spectrum(a1, beta[i])
            scales.append(s)
            replaced += rep_flag
    U_A, U_B = compare_bounds(alpha_A, alpha_B, mm.sensitivity.eps, C, rep.L, cfg.eta, cfg.n)
    w = cfg.eta * C * (1.0 + cfg.eta * rep.L) ** np.arange(cfg.n - 1, -1, -1)
    tail = float(np.dot(w, np.sum(np.abs(alpha_B[..., 1:]) * mm.sensitivity.eps[..., 1:], axis=(1, 2))))
    strict_ok = tail <= STRICT_TAIL or U_A < U_B
    return TrialResult(
        cfg.seed, cfg.n, cfg.eta, rep.L, C, rep.bound, rep.gap, rep.satisfied,
        U_A, U_B, beta_tail, tail, strict_ok, mm.satisfied, scales, replaced,
    )  # fmt: skip


def run_trials(count: int = 100, seed: int = 0, max_steps: int = 16):
    return [run_trial(TrialConfig.random(seed + t, max_steps)) for t in range(count)]


VERIFY_COLUMNS = ("trial", "n", "eta", "L", "C", "bound", "gap", "satisfied", "U_A", "U_B", "max_beta_tail")


def trials_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VERIFY_COLUMNS)
    for r in results:
        vals = [getattr(r, c) for c in VERIFY_COLUMNS]
        w.writerow([int(v) if isinstance(v, (bool, np.bool_)) else repr(float(v)) if isinstance(v, float) else v for v in vals])
    return buf.getvalue()


# -- spectral correctness and selectivity suites ------------------------------------------


@dataclass
class SpectralCheck:
    duality: float
    trace_error: float
    eckart_young_violations: int


def spectral_correctness(z: np.ndarray, rng, candidates: int = 1000) -> SpectralCheck:
    """Duality residual, eigenvalue sum and an Eckart-Young probe for one instance."""
    s = spectral.spectrum(z)
    k = z.shape[0]
    U, V, sig = s.left_vectors, s.right_vectors, s.sigmas
    res = 0.0
    for j in range(k):
        if sig[j] > 0:
            res = max(res, np.linalg.norm(z @ V[j] - sig[j] * U[:, j]), np.linalg.norm(z.T @ U[:, j] - sig[j] * V[j]))
    G = spectral.gram(z)
    best = np.linalg.norm(G - s.eigenvalues[0] * np.outer(U[:, 0], U[:, 0]))
    a = rng.standard_normal((candidates, k))
    a[: candidates // 2] = U[:, 0] + 0.05 * a[: candidates // 2]  # near-optimal candidates
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    lam = np.einsum("ck,kl,cl->c", a, G, a)
    errs = np.linalg.norm(G[None] - lam[:, None, None] * a[:, :, None] * a[:, None, :], axis=(1, 2))
    return SpectralCheck(float(res), float(abs(s.eigenvalues.sum() - k)), int(np.sum(errs < best - 1e-12)))


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a, b = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


GRADIENT_CHECKS = ("sigma1", "L_M", "L_wBCE", "infonce", "pair_wbce", "head_backward")


def gradient_case(name: str, seed: int, cfg: LossConfig = LossConfig()) -> float:
    """Relative error between an analytic gradient and central differences."""
    rng = np.random.default_rng([seed, 303])
    z = random_unit_batch(rng, n=4, k=3, d=8)
    if name == "sigma1":
        z1 = z[0]
        return rel_error(spectral.sigma_gradient(z1, 1), fd_gradient(lambda y: spectral.spectrum(y, validate=False).sigmas[0], z1))
    if name == "L_M":
        f = lambda y: objectives.modality_loss(spectral.spectrum(y, validate=False), cfg)[0]
        return rel_error(objectives.modality_loss(spectral.spectrum(z, validate=False), cfg)[1], fd_gradient(f, z))
    if name == "L_wBCE":
        p = rng.standard_normal((4, 8))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        t = objectives.clamp_targets(rng.uniform(0, 1, (4, 4)))[0]
        return rel_error(objectives.wbce_loss(t, p, cfg)[1], fd_gradient(lambda q: objectives.wbce_loss(t, q, cfg)[0], p))
    if name == "infonce":
        za, zb = z[:, 0], z[:, 1]
        _, ga, gb = objectives.pairwise_infonce(za, zb, cfg.tau)
        fa = fd_gradient(lambda y: objectives.pairwise_infonce(y, zb, cfg.tau)[0], za)
        fb = fd_gradient(lambda y: objectives.pairwise_infonce(za, y, cfg.tau)[0], zb)
        return max(rel_error(ga, fa), rel_error(gb, fb))
    if name == "pair_wbce":
        t = objectives.clamp_targets(rng.uniform(0, 1, (4, 4)))[0]
        za, zb = z[:, 0], z[:, 2]
        _, ga, gb, _, _ = objectives.pairwise_wbce(za, zb, t, cfg)
        fa = fd_gradient(lambda y: objectives.pairwise_wbce(y, zb, t, cfg)[0], za)
        fb = fd_gradient(lambda y: objectives.pairwise_wbce(za, y, t, cfg)[0], zb)
        return max(rel_error(ga, fa), rel_error(gb, fb))
    if name == "head_backward":
        heads = model.init_heads(5, (6, 4, 7), seed, TRIAL_NAMES, tied=False)
        raw = [rng.standard_normal((3, w.shape[1])) for w in heads.weights]
        up = rng.standard_normal((3, 3, 5))
        an = model.backward(heads, raw, up)
        errs = []
        for m in range(3):
            def f(w, m=m):
                ws = list(heads.weights)
                ws[m] = w
                return float(np.sum(model.forward(heads.replace(ws), raw) * up))
            errs.append(rel_error(an[m], fd_gradient(f, heads.weights[m])))
        return max(errs)
    raise ValueError(f"unknown gradient check {name!r}")


def gradient_suite(instances: int = 100, seed: int = 0):
    """``{name: [rel_error per instance]}`` for every analytic gradient."""
    return {name: [gradient_case(name, seed + i) for i in range(instances)] for name in GRADIENT_CHECKS}


# -- meta-gradient through the unrolled student ---------------------------------------------


@dataclass
class MetaGradientCheck:
    steps: int
    coords: list  # (group, index)
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        # coordinates where both values sit at finite-difference noise level count as zero
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), FD_FLOOR)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_error(self) -> float:
        return float(np.max(self.errors))


def _aligned(heads, X, floor=0.5) -> bool:
    z = model.forward(heads, X)
    return bool(np.min(np.sum(z[:, 0] * z[:, 1], axis=1)) > floor)


def _tiny_problem(seed: int, steps: int, eta: float = 0.02):
    from .buffer import TeacherSegment
    from .distill import DistillConfig, SyntheticSet, student_rollout

    rng = np.random.default_rng([seed, 404])
    names = ("video", "audio")
    start = model.init_heads(2, (3, 3), seed, names)
    cfg = DistillConfig(n=2, syn_steps=steps, mini_batch_size=2, sim_rank=2)
    # the proxy sign convention makes the loss jump where two modalities turn
    # orthogonal, so draws whose rollout leaves the aligned region are rejected
    while True:
        base = rng.standard_normal((2, 3))
        X = [base + 0.3 * rng.standard_normal((2, 3)) for _ in names]
        A = rng.uniform(-0.3, 0.3, (2, 2))
        B = rng.uniform(-0.3, 0.3, (2, 2))
        syn = SyntheticSet(X, A, B, 1.0, eta, names)
        if not _aligned(start, X):
            continue
        _, tape = student_rollout(start, syn, cfg, np.random.default_rng(0))
        if all(_aligned(start.replace(w), X) for w in tape.states):
            break
    target = start.replace([w + 0.2 * rng.standard_normal(w.shape) for w in start.weights])
    return syn, TeacherSegment(start, target, 0, 1), [np.arange(2)] * steps, cfg


def metagradient_check(seed: int, steps: int, h: float = 1e-5) -> MetaGradientCheck:
    """Unrolled outer gradient versus central differences on all 21 parameters.

    Tiny problem: 2 instances, 2 modalities, raw width 3, embedding width 2,
    rank-2 similarity factors and the log step size.
    """
    from .distill import meta_gradient

    syn, segment, batches, cfg = _tiny_problem(seed, steps)
    _, grads, _ = meta_gradient(syn, segment, batches, cfg)

    def loss_at(s):
        return meta_gradient(s, segment, batches, cfg)[0]

    coords, analytic, numeric = [], [], []
    groups = [("X", m) for m in range(len(syn.X))] + [("A", None), ("B", None)]
    for name, m in groups:
        base = syn.X[m] if name == "X" else getattr(syn, name)
        g = grads["X"][m] if name == "X" else grads[name]
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                s = syn.copy()
                arr = s.X[m] if name == "X" else getattr(s, name)
                arr[idx] += sign * h
                vals.append(loss_at(s))
            coords.append((f"X{m}" if name == "X" else name, idx))
            analytic.append(g[idx])
            numeric.append((vals[0] - vals[1]) / (2 * h))
    vals = []
    for sign in (1.0, -1.0):
        s = syn.copy()
        s.eta = float(np.exp(syn.log_eta + sign * h))
        vals.append(loss_at(s))
    coords.append(("log_eta", ()))
    analytic.append(grads["log_eta"])
    numeric.append((vals[0] - vals[1]) / (2 * h))
    return MetaGradientCheck(steps, coords, np.array(analytic), np.array(numeric))


# -- mode selectivity over random batches ------------------------------------------------------


@dataclass
class SelectivityReport:
    """Per-batch ``max_{j>=2} |beta_j|`` for several objectives."""

    tails: dict  # objective -> (instances,)
    lm_formula_error: np.ndarray  # |beta(L_M) - (p - e_1) / (N tau)| per batch

    def count_below(self, name: str, tol: float) -> int:
        return int(np.sum(self.tails[name] <= tol))

    def count_above(self, name: str, tol: float) -> int:
        return int(np.sum(self.tails[name] > tol))


def selectivity_suite(instances: int = 100, seed: int = 0, cfg: LossConfig = LossConfig(), n: int = 8) -> SelectivityReport:
    rng = np.random.default_rng([seed, 505])
    names = ("sigma1", "principal", "L_M", "infonce")
    tails = {name: [] for name in names}
    formula = []
    for _ in range(instances):
        z = random_unit_batch(rng, n=n)
        s = spectral.spectrum(z, validate=False)
        while np.any(s.degenerate):
            z = random_unit_batch(rng, n=n)
            s = spectral.spectrum(z, validate=False)
        for name in names:
            beta = mode_projection(objective_gradient(name, z, cfg), s)
            tails[name].append(float(np.max(np.abs(beta[:, 1:]))))
            if name == "L_M":
                expected = objectives.softmax_sigma(s.sigmas, cfg.tau)
                expected[:, 0] -= 1.0
                formula.append(float(np.max(np.abs(beta - expected / (n * cfg.tau)))))
    return SelectivityReport({k: np.array(v) for k, v in tails.items()}, np.array(formula))
