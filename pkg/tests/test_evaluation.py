from dataclasses import replace
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omnidistill import datagen as D
from omnidistill import distill as X
from omnidistill import evaluation as E
from omnidistill import model as M
from omnidistill.training import train_heads

from conftest import unit_rows

DATA = D.generate(D.GeneratorConfig(N=120, d_in=(12, 10, 11), latent_dim=6, num_classes=6))
TEST = D.generate(D.GeneratorConfig(N=120, d_in=(12, 10, 11), latent_dim=6, num_classes=6), "test", 40)
CFG = E.EvalConfig(epochs=3, d=6)


def brute_force_ranks(sims):
    """Rank of the truth by explicit pairwise comparison with index tie-breaks."""
    n = sims.shape[0]
    out = []
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-sims[i, j], j))
        out.append(order.index(i))
    return np.array(out)


def test_perfect_and_adversarial_recall():
    z = np.stack([np.eye(10)] * 3, axis=1)
    rep = E.recall_from_embeddings(z)
    assert all(r == {1: 100.0, 5: 100.0, 10: 100.0} for r in rep.recalls.values())
    assert len(rep.recalls) == 6 and rep.n_queries == 10
    sims = np.tile(np.arange(10.0), (10, 1))
    sims[np.arange(10), np.arange(10)] = -1.0
    ranks = E.ranks_of_truth(sims)
    assert np.all(ranks == 9)
    assert [100.0 * np.mean(ranks < K) for K in (1, 5, 10)] == [0.0, 0.0, 100.0]


def test_four_instance_hand_case():
    sims = np.array([[0.9, 0.1, 0.3, 0.2], [0.8, 0.5, 0.1, 0.0], [0.2, 0.2, 0.2, 0.1], [0.0, 0.4, 0.4, 0.4]])
    assert E.ranks_of_truth(sims).tolist() == [0, 1, 2, 2]
    assert E.ranks_of_truth(sims).tolist() == brute_force_ranks(sims).tolist()


@given(st.integers(0, 2**32 - 1), st.integers(2, 16))
def test_fast_ranks_equal_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    sims = np.round(rng.uniform(-1, 1, (n, n)), 1)  # coarse values force ties
    assert np.array_equal(E.ranks_of_truth(sims), brute_force_ranks(sims))


@given(st.integers(0, 2**32 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, 12, 3, 5)
    rep = E.recall_from_embeddings(z)
    for r in rep.recalls.values():
        assert 0 <= r[1] <= r[5] <= r[10] <= 100
    perm = rng.permutation(12)
    assert E.recall_from_embeddings(z[perm]).recalls == rep.recalls


def test_scale_invariance():
    h = M.init_heads(6, TEST.d_in, 0, TEST.names)
    scaled = h.replace([3.0 * h.weights[0], h.weights[1], 0.5 * h.weights[2]])
    assert E.retrieval_recall(h, TEST).recalls == E.retrieval_recall(scaled, TEST).recalls


def test_recall_errors():
    with pytest.raises(ValueError):
        E.recall_from_embeddings(np.zeros((0, 3, 4)))
    with pytest.raises(ValueError):
        E.recall_from_embeddings(unit_rows(np.random.default_rng(0), 5, 3, 4))


def test_train_student_contracts():
    heads, losses = E.train_student(DATA, replace(CFG, epochs=0), 4)
    assert heads.equals(M.init_heads(CFG.d, DATA.d_in, 4, DATA.names)) and losses == []
    heads, losses = E.train_student(DATA, CFG, 4)
    assert losses[-1] < losses[0]
    syn = X.init_synthetic(DATA, 20, X.DistillConfig(sim_rank=4), 0)
    syn.eta = 0.037
    trained, _ = E.train_student(syn, CFG, 1)
    start = M.init_heads(CFG.d, DATA.d_in, 1, DATA.names)
    manual, _, _ = train_heads(start, syn.X, syn.targets(), lr=0.037, epochs=CFG.epochs, batch_size=CFG.batch_size,
                               cfg=CFG.loss, objective=CFG.objective, seed=1)  # fmt: skip
    assert trained.equals(manual)
    with pytest.raises(ValueError):
        E.train_student(DATA.subset([]), CFG, 0)


def test_protocol_aggregation():
    one = E.evaluate_protocol(DATA, TEST, CFG, [3])
    assert all(v == 0.0 for s in one.std.values() for v in s.values())
    twin = E.evaluate_protocol(DATA, TEST, CFG, [3, 3])
    assert twin.mean == one.mean
    assert E.evaluate_protocol(DATA, TEST, CFG, [3]).to_csv() == one.to_csv()
    with pytest.raises(ValueError):
        E.evaluate_protocol(DATA, TEST, CFG, [])


def test_report_csv_layout():
    rep = E.evaluate_protocol(DATA, TEST, CFG, [0, 1])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "# modalities=video,audio,text"
    assert lines[1] == "pair,R@1_mean,R@1_std,R@5_mean,R@5_std,R@10_mean,R@10_std"
    assert lines[2].startswith("video->audio,") and lines[-1].startswith("Avg,")
    assert len(lines) == 2 + 6 + 1


def test_random_coreset():
    full = E.random_coreset_eval(DATA, TEST, DATA.N, CFG, [0])
    assert full.mean == E.evaluate_protocol(DATA, TEST, CFG, [0]).mean
    a = E.random_coreset_eval(DATA, TEST, 30, CFG, [1], subset_seed=2)
    b = E.random_coreset_eval(DATA, TEST, 30, CFG, [1], subset_seed=2)
    assert a.mean == b.mean


def test_random_coreset_default_data_beats_chance():
    train, test = D.generate_splits(D.GeneratorConfig(), 500)
    rep = E.random_coreset_eval(train, test, 50, E.EvalConfig(), [0])
    chance = 100.0 / test.N
    assert rep.avg_mean[1] > 5 * chance


def test_class_mrr_perfect_clusters():
    z = np.repeat(np.eye(3), 2, axis=0)
    labels = np.repeat(np.arange(3), 2)
    assert E.class_mrr(z, z, labels) == 1.0
