import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omnidistill import model as M

from conftest import fd, rel, unit_rows


def test_identity_and_scaled_heads(rng):
    x = unit_rows(rng, 3, 4)
    eye = M.ProjectionHeads((np.eye(4), np.eye(4), np.eye(4)))
    assert np.allclose(M.forward(eye, list(x)), x)
    twice = M.ProjectionHeads((2 * np.eye(4),) * 3)
    assert np.allclose(M.forward(twice, list(x)), x, atol=1e-15)


def test_forward_unit_norm_and_errors(rng):
    h = M.init_heads(5, (6, 4, 7), 0)
    raw = [rng.standard_normal((10, w.shape[1])) for w in h.weights]
    z = M.forward(h, raw)
    assert z.shape == (10, 3, 5)
    assert np.max(np.abs(np.linalg.norm(z, axis=-1) - 1)) <= 1e-12
    with pytest.raises(M.NormalizationError):
        M.forward(h, [np.zeros(6), raw[1][0], raw[2][0]])
    with pytest.raises(ValueError):
        M.forward(h, [raw[1], raw[1], raw[2]])


def test_init_heads_is_fan_in_uniform():
    h = M.init_heads(16, (48, 32, 40), 3)
    for w, din in zip(h.weights, (48, 32, 40)):
        assert np.all(np.abs(w) <= 1 / np.sqrt(din))
    assert M.init_heads(16, (48, 32, 40), 3).equals(h)
    assert not M.init_heads(16, (48, 32, 40), 4).equals(h)
    loose = M.init_heads(16, (48, 32, 40), 3, tied=False)
    assert not np.allclose(loose.weights[0][:, :32] * np.sqrt(48), loose.weights[1] * np.sqrt(32))
    assert np.allclose(h.weights[0][:, :32] * np.sqrt(48), h.weights[1] * np.sqrt(32))


def test_backward_examples(rng):
    h = M.init_heads(5, (6, 4), 1, tied=False)
    raw = [rng.standard_normal((3, 6)), rng.standard_normal((3, 4))]
    z = M.forward(h, raw)
    for g in M.backward(h, raw, 2.5 * z):
        assert np.allclose(g, 0, atol=1e-14)
    for g in M.backward(h, raw, np.zeros_like(z)):
        assert np.all(g == 0)
    up = rng.standard_normal(z.shape)
    grads = M.backward(h, raw, up)
    for m in range(2):
        def f(w, m=m):
            ws = list(h.weights)
            ws[m] = w
            return float(np.sum(M.forward(h.replace(ws), raw) * up))
        assert rel(grads[m], fd(f, h.weights[m])) <= 1e-5


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_forward_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    h = M.init_heads(4, (5, 3), seed % 1000)
    raw = [rng.standard_normal((4, 5)), rng.standard_normal((4, 3))]
    scaled = h.replace([c * h.weights[0], h.weights[1]])
    assert np.max(np.abs(M.forward(h, raw) - M.forward(scaled, raw))) <= 1e-12


def test_sgd_examples():
    assert M.sgd_step([np.ones(2)], [np.zeros(2)], M.SgdState(0.1))[0].tolist() == [1, 1]
    assert M.sgd_step([np.array(1.0)], [np.array(1.0)], M.SgdState(0.01))[0] == pytest.approx(0.99)
    st_ = M.SgdState(0.01, 0.5)
    p = [np.array(1.0)]
    p1 = M.sgd_step(p, [np.array(1.0)], st_)
    p2 = M.sgd_step(p1, [np.array(1.0)], st_)
    assert 1.0 - p1[0] == pytest.approx(0.01)
    assert p1[0] - p2[0] == pytest.approx(0.015)
    with pytest.raises(FloatingPointError):
        M.sgd_step([np.ones(1)], [np.array([np.nan])], M.SgdState(0.1))
    with pytest.raises(ValueError):
        M.SgdState(0.1, 1.0)
    with pytest.raises(ValueError):
        M.sgd_step([np.ones(2)], [np.ones(3)], M.SgdState(0.1))


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_sgd_affine_in_gradient(seed, a, b):
    rng = np.random.default_rng(seed)
    th, g1, g2 = rng.standard_normal((3, 4))
    got = M.sgd_step([th], [a * g1 + b * g2], M.SgdState(0.05))[0]
    assert np.allclose(got, th - 0.05 * (a * g1 + b * g2))


def test_param_distance(rng):
    h = M.init_heads(3, (4, 5), 0)
    assert M.param_distance(h, h) == ([0.0, 0.0], 0.0)
    a = M.ProjectionHeads((np.array([[1.0]]),))
    b = M.ProjectionHeads((np.array([[3.0]]),))
    assert M.param_distance(a, b)[1] == 4.0
    g = h.replace([w + rng.standard_normal(w.shape) for w in h.weights])
    per, total = M.param_distance(h, g)
    assert per == [float(np.sum((x - y) ** 2)) for x, y in zip(h.weights, g.weights)]
    assert total == sum(per)
    with pytest.raises(ValueError):
        M.param_distance(h, M.init_heads(3, (4, 6), 0))


def test_flat_round_trip():
    h = M.init_heads(3, (4, 5), 0)
    assert h.with_flat(h.flat()).equals(h)
    with pytest.raises(ValueError):
        h.weights[0][0, 0] = 1.0
