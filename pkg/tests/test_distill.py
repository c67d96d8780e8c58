from dataclasses import replace

import numpy as np
import pytest

from omnidistill import buffer as B
from omnidistill import datagen as D
from omnidistill import distill as X
from omnidistill import model as M
from omnidistill import theory
from omnidistill.binio import IntegrityError
from omnidistill.objectives import LossConfig
from omnidistill.training import loss_and_grads

DATA = D.generate(D.GeneratorConfig(N=120, d_in=(12, 10, 11), latent_dim=6, num_classes=6))
SMALL = X.DistillConfig(n=12, iterations=6, syn_steps=3, mini_batch_size=6, sim_rank=4)


@pytest.fixture(scope="module")
def buf():
    return B.build_buffer(DATA, B.BufferConfig(num_experts=2, batch_size=32, d=6))


def test_config_validation():
    with pytest.raises(ValueError):
        X.DistillConfig(lr_data=-1)
    with pytest.raises(ValueError):
        X.DistillConfig(syn_steps=0)
    with pytest.raises(ValueError):
        X.DistillConfig(method="bogus")


def test_init_synthetic():
    syn = X.init_synthetic(DATA, 12, replace(SMALL, sim_alpha=0.0), 3)
    assert np.array_equal(syn.targets(), np.clip(np.eye(12), 1e-4, 1 - 1e-4))
    a, b = X.init_synthetic(DATA, 12, SMALL, 3), X.init_synthetic(DATA, 12, SMALL, 3)
    assert a.equals(b)
    assert a.eta == SMALL.lr_teacher
    for x, real in zip(a.X, DATA.X):
        assert all((real == row).all(axis=1).any() for row in x)
    t = a.targets()
    assert t.min() >= 1e-4 and t.max() <= 1 - 1e-4
    with pytest.raises(ValueError):
        X.init_synthetic(DATA, DATA.N + 1, SMALL, 0)


def test_rollout_zero_step_and_replay(buf):
    syn = X.init_synthetic(DATA, 12, SMALL, 0)
    start = buf[0].checkpoints[0]
    frozen = syn.copy()
    frozen.eta = 0.0
    with np.errstate(divide="ignore"):
        end, _ = X.student_rollout(start, frozen, SMALL, np.random.default_rng(0))
    assert end.equals(start)
    end, tape = X.student_rollout(start, syn, replace(SMALL, syn_steps=16), np.random.default_rng(0))
    assert not end.equals(start)
    assert X.replay(tape, replace(SMALL, syn_steps=16), syn.names).equals(end)


def test_single_step_closed_form():
    syn = X.init_synthetic(DATA, 1, replace(SMALL, sim_rank=1), 5)
    start = M.init_heads(6, DATA.d_in, 2, DATA.names)
    cfg = replace(SMALL, syn_steps=1, mini_batch_size=1, sim_rank=1)
    end, _ = X.student_rollout(start, syn, cfg, np.random.default_rng(0))
    _, grads = loss_and_grads(start, syn.X, syn.targets(), cfg.loss)
    for w_end, w0, g in zip(end.weights, start.weights, grads):
        assert np.max(np.abs(w_end - (w0 - syn.eta * g))) <= 1e-12


def test_matching_loss(buf, rng):
    seg = B.sample_segment(buf, 5, 2, np.random.default_rng(0))
    assert X.matching_loss(seg.target, seg)[0] == 0.0
    assert X.matching_loss(seg.start, seg)[0] == 3.0
    other = seg.start.replace([w + rng.standard_normal(w.shape) for w in seg.start.weights])
    expected = sum(
        float(np.sum((e - t) ** 2)) / float(np.sum((s - t) ** 2))
        for e, s, t in zip(other.weights, seg.start.weights, seg.target.weights)
    )
    assert X.matching_loss(other, seg)[0] == pytest.approx(expected, rel=1e-14)
    still = B.TeacherSegment(seg.start, seg.start, 0, 2)
    with pytest.raises(X.DegenerateSegment):
        X.matching_loss(seg.start, still)


def test_zero_outer_rates_leave_set_unchanged(buf):
    cfg = replace(SMALL, lr_data=0.0, lr_sim=0.0, lr_lr=0.0)
    syn0 = X.init_synthetic(DATA, 12, cfg, 0)
    syn, _ = X.distill(DATA, buf, cfg)
    assert syn.equals(syn0)


def test_similarity_and_eta_frozen_without_their_rates(buf):
    cfg = replace(SMALL, lr_sim=0.0, lr_lr=0.0)
    syn0 = X.init_synthetic(DATA, 12, cfg, 0)
    syn, _ = X.distill(DATA, buf, cfg)
    assert np.array_equal(syn.A, syn0.A) and np.array_equal(syn.B, syn0.B) and syn.eta == syn0.eta
    assert not all(np.array_equal(a, b) for a, b in zip(syn.X, syn0.X))


@pytest.mark.parametrize("steps", [1, 2])
def test_meta_gradient_matches_finite_differences(steps):
    for seed in range(3):
        chk = theory.metagradient_check(seed, steps)
        assert len(chk.coords) == 21
        assert chk.max_error <= 1e-4


def test_distill_determinism_and_log(buf):
    a, log_a = X.distill(DATA, buf, SMALL)
    b, log_b = X.distill(DATA, buf, SMALL)
    assert a.equals(b) and log_a.to_csv() == log_b.to_csv()
    header = log_a.to_csv().splitlines()[1].split(",")
    assert header[:6] == list(X.IterationLog.COLUMNS)
    assert len(log_a.rows) == SMALL.iterations
    assert a.eta > 0
    init, log0 = X.distill(DATA, buf, replace(SMALL, iterations=0))
    assert init.equals(X.init_synthetic(DATA, 12, SMALL, SMALL.seed)) and not log0.rows


def test_baselines(buf):
    syn, log = X.distill_baseline("3pair", DATA, buf, SMALL)
    assert {"inner_video-text", "inner_video-audio", "inner_audio-text"} <= set(log.rows[0])
    assert log.to_csv().startswith("# method=3pair")
    r2, log2 = X.distill_baseline("rank2", DATA, buf, SMALL)
    assert [x.shape for x in r2.X] == [x.shape for x in syn.X]
    assert log2.to_csv().startswith("# method=rank2")
    nolm, _ = X.distill_baseline("no_LM", DATA, buf, replace(SMALL, lr_sim=0.0))
    assert np.array_equal(nolm.A, X.init_synthetic(DATA, 12, SMALL, 0).A)
    nomine, _ = X.distill_baseline("no_mining", DATA, buf, SMALL)
    assert np.array_equal(nomine.A, X.init_synthetic(DATA, 12, SMALL, 0).A)


def test_synthetic_round_trip(tmp_path):
    syn = X.init_synthetic(DATA, 12, SMALL, 0)
    path = tmp_path / "s.omss"
    X.save_synthetic(syn, path)
    assert X.load_synthetic(path).equals(syn)
    raw = bytearray(path.read_bytes())
    raw[-6] ^= 1
    with pytest.raises(IntegrityError):
        X.decode_synthetic(bytes(raw))


def test_eta_stays_positive_under_large_eta_rate(buf):
    syn, _ = X.distill(DATA, buf, replace(SMALL, lr_lr=10.0))
    assert syn.eta > 0 and np.isfinite(syn.eta)


@pytest.mark.slow
def test_default_distillation_reduces_matching_loss():
    ds = D.generate(D.GeneratorConfig())
    buffer = B.build_buffer(ds, B.BufferConfig(num_experts=5))
    _, log = X.distill(ds, buffer, X.DistillConfig())
    losses = log.losses()
    assert np.median(losses[-50:]) < np.median(losses[:50])
