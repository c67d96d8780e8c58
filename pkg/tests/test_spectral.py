import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omnidistill import spectral as S

from conftest import fd, rel, unit_rows

E = np.eye(4)


def test_gram_examples():
    assert np.allclose(S.gram(np.stack([E[0]] * 3)), np.ones((3, 3)))
    assert np.allclose(S.gram(E[:3]), np.eye(3))
    assert np.allclose(S.gram(np.stack([E[0], E[0], E[1]])), [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_gram_rejects_ragged_rows():
    with pytest.raises(S.SpectralError):
        S.gram([[1.0, 0.0], [1.0, 0.0, 0.0]])


def test_spectrum_identical_rows():
    s = S.spectrum(np.stack([E[0]] * 3))
    assert np.allclose(s.eigenvalues, [3, 0, 0])
    assert np.isclose(s.sigma1, np.sqrt(3))
    assert np.allclose(s.u1, np.ones(3) / np.sqrt(3))
    assert np.allclose(s.proxy, E[0])
    assert not s.degenerate_flag


def test_spectrum_isotropic_is_degenerate():
    s = S.spectrum(E[:3])
    assert np.allclose(s.eigenvalues, 1.0)
    assert s.degenerate_flag


def test_spectrum_block_case_matches_reference_solver():
    z = np.stack([E[0], E[0], E[1]])
    s = S.spectrum(z)
    lam, _ = np.linalg.eigh(S.gram(z))
    assert np.allclose(s.eigenvalues, lam[::-1], atol=1e-12)
    assert np.allclose(s.eigenvalues, [2, 1, 0], atol=1e-12)
    assert np.allclose(s.u1, [1 / np.sqrt(2), 1 / np.sqrt(2), 0])
    assert np.allclose(s.proxy, E[0])


def test_spectrum_errors():
    with pytest.raises(S.SpectralError):
        S.spectrum(np.zeros((3, 4)), validate=False)
    with pytest.raises(S.SpectralError):
        S.spectrum(2 * E[:3])
    with pytest.raises(S.SpectralError):
        S.spectrum(E[:3], gap_tol=0)


def test_jacobi_reports_nonconvergence():
    a = np.array([[1.0, 0.5, 0.3], [0.5, 2.0, 0.1], [0.3, 0.1, 3.0]])
    with pytest.raises(S.ConvergenceError, match="1 sweeps"):
        S.jacobi_eigh(a, max_sweeps=1)


def test_rank1_examples():
    s = S.spectrum(np.stack([E[0]] * 3))
    assert S.rank1_approx(s, S.gram(np.stack([E[0]] * 3))).frobenius_error == pytest.approx(0, abs=1e-12)
    z = np.stack([E[0], E[0], E[1]])
    assert S.rank1_approx(S.spectrum(z), S.gram(z)).frobenius_error == pytest.approx(1.0)
    assert S.rank1_approx(S.spectrum(E[:3]), np.eye(3)).frobenius_error == pytest.approx(np.sqrt(2))


def test_proxy_similarity(rng):
    assert S.proxy_similarity(E[0], E[0]) == 1.0
    assert S.proxy_similarity(E[0], E[1]) == 0.0
    a, b = unit_rows(rng, 2, 8)
    exact = sum(float(x) * float(y) for x, y in zip(a.astype(np.longdouble), b.astype(np.longdouble)))
    assert S.proxy_similarity(a, b) == pytest.approx(exact, abs=1e-15)


def test_sigma_gradient_examples(rng):
    g = S.sigma_gradient(np.stack([E[0]] * 3))
    assert np.allclose(g, np.stack([E[0] / np.sqrt(3)] * 3))
    with pytest.raises(S.SpectralError, match="jitter"):
        S.sigma_gradient(E[:3])
    for _ in range(100):
        z = unit_rows(rng, 3, 8)
        f = lambda y: S.spectrum(y, validate=False).sigmas[0]
        assert rel(S.sigma_gradient(z), fd(f, z)) <= 1e-5
        assert np.linalg.norm(S.sigma_gradient(z)) == pytest.approx(1.0)


@st.composite
def embeddings(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    k = draw(st.integers(2, 5))
    d = draw(st.integers(k, 10))
    return unit_rows(np.random.default_rng(seed), k, d)


@given(embeddings())
def test_spectrum_invariants(z):
    s = S.spectrum(z)
    k = z.shape[0]
    assert abs(s.eigenvalues.sum() - k) <= 1e-8
    assert np.all(s.eigenvalues >= 0)
    assert np.allclose(s.left_vectors.T @ s.left_vectors, np.eye(k), atol=1e-9)
    assert s.u1.sum() >= 0
    assert np.linalg.norm(s.sigma1 * s.proxy - z.T @ s.u1) <= 1e-8


@given(embeddings(), st.integers(0, 2**32 - 1))
def test_eckart_young_probe(z, seed):
    rng = np.random.default_rng(seed)
    s = S.spectrum(z)
    G = S.gram(z)
    best = S.rank1_approx(s, G).frobenius_error
    a = unit_rows(rng, 1000, z.shape[0])
    scale = rng.uniform(0, 2 * z.shape[0], 1000)
    errs = np.linalg.norm(G[None] - scale[:, None, None] * a[:, :, None] * a[:, None, :], axis=(1, 2))
    assert np.all(best <= errs + 1e-10)


@given(embeddings(), st.integers(0, 2**32 - 1))
def test_sign_stability(z, seed):
    s = S.spectrum(z)
    if abs(s.u1.sum()) <= 1e-4 or s.degenerate_flag:
        return
    zp = z + 1e-8 * np.random.default_rng(seed).uniform(-1, 1, z.shape)
    sp = S.spectrum(zp, validate=False)
    assert np.sign(sp.u1 @ s.u1) > 0


def test_batched_matches_single(rng):
    z = unit_rows(rng, 5, 3, 6)
    sb = S.spectrum(z)
    for i in range(5):
        si = S.spectrum(z[i])
        assert np.allclose(sb.eigenvalues[i], si.eigenvalues)
        assert np.allclose(sb.right_vectors[i], si.right_vectors)


def test_jitter_resolves_degeneracy():
    z, s = S.robust_spectrum(E[:3][None], seed=3)
    assert not np.any(s.degenerate)
    assert np.allclose(np.linalg.norm(z, axis=-1), 1.0)
