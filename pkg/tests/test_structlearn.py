import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asgn import autodiff as ad
from asgn.config import TrainConfig
from asgn.model import init_params
from asgn.structlearn import (ZeroNoise, build_adaptive_adjacency, clamp_degree, estimate_degree,
                              gumbel_softmax_sample, rank_candidates, round_half_away, score_edges)

probs_st = st.lists(st.floats(0.01, 0.99), min_size=2, max_size=8)


def score_params(hidden=16, zero=False):
    p = init_params(TrainConfig(hidden=6, score_hidden=hidden), ["x"], seed=1).arrays()
    p = {k: v for k, v in p.items() if k.startswith("score.")}
    if zero:
        p = {k: np.zeros_like(v) for k, v in p.items()}
    return {k: ad.Tensor(v) for k, v in p.items()}


@settings(max_examples=50, deadline=None)
@given(probs_st, st.floats(0.05, 5.0), st.integers(0, 2**31))
def test_gumbel_rows_on_simplex(p, tau, seed):
    g = np.random.default_rng(seed).gumbel(size=len(p))
    e = gumbel_softmax_sample(ad.Tensor(np.array(p)), tau, g).data
    assert np.all(e >= 0) and abs(e.sum() - 1) < 1e-12


@settings(max_examples=30, deadline=None)
@given(probs_st, st.integers(0, 2**31))
def test_lower_temperature_sharpens(p, seed):
    g = np.random.default_rng(seed).gumbel(size=len(p))
    x = ad.Tensor(np.array(p))
    maxes = [gumbel_softmax_sample(x, t, g).data.max() for t in (2.0, 1.0, 0.5, 0.1)]
    assert all(a <= b + 1e-12 for a, b in zip(maxes, maxes[1:]))


@settings(max_examples=30, deadline=None)
@given(probs_st, st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_argmax_invariant_to_scaling_p(p, c, seed):
    p = np.array(p)
    g = np.random.default_rng(seed).gumbel(size=len(p))
    a = gumbel_softmax_sample(ad.Tensor(p), 0.5, g).data
    b = gumbel_softmax_sample(ad.Tensor(p * c), 0.5, g).data
    assert np.argmax(a) == np.argmax(b)
    assert np.allclose(a, b, atol=1e-12)


def test_equal_probabilities_without_noise_are_uniform():
    e = gumbel_softmax_sample(ad.Tensor(np.full(5, 0.3)), 0.5, ZeroNoise()).data
    assert np.allclose(e, 0.2, atol=1e-15)


def test_single_candidate_gets_all_mass():
    mask = np.array([False, True, False])
    e = gumbel_softmax_sample(ad.Tensor(np.array([0.9, 0.1, 0.5])), 0.5, np.zeros(3), mask=mask).data
    assert np.array_equal(e, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_nonpositive_temperature_rejected(tau):
    with pytest.raises(ValueError, match="temperature"):
        gumbel_softmax_sample(ad.Tensor(np.full(3, 0.5)), tau, np.zeros(3))


def test_zero_parameters_give_half():
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    dist = np.random.default_rng(1).uniform(size=(4, 4))
    p, logp = score_edges(emb, dist, score_params(zero=True))
    assert np.allclose(p.data, 0.5) and np.allclose(logp.data, np.log(0.5))


def test_tied_weights_give_symmetric_scores():
    prm = score_params()
    prm["score.Wc2"] = prm["score.Wc1"]
    prm["score.Pc2"] = prm["score.Pc1"]
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(5, 6)))
    d = np.random.default_rng(1).uniform(size=(5, 5))
    p, _ = score_edges(emb, d + d.T, prm)
    assert np.allclose(p.data, p.data.T, atol=1e-14)


def test_sparse_scoring_matches_dense():
    rng = np.random.default_rng(4)
    emb = ad.Tensor(rng.normal(size=(2, 5, 6)))
    dist = rng.uniform(size=(2, 5, 5))
    pairs = rng.random((2, 5, 5)) < 0.5
    dense, _ = score_edges(emb, dist, score_params())
    sparse, _ = score_edges(emb, dist, score_params(), pairs=pairs)
    assert np.allclose(sparse.data[pairs], dense.data[pairs], atol=1e-14)
    assert np.all(sparse.data[~pairs] == 0.5)


def test_distance_flag_removes_distance_dependence():
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(3, 6)))
    a, _ = score_edges(emb, np.zeros((3, 3)), score_params(), use_distance=False)
    b, _ = score_edges(emb, np.ones((3, 3)) * 9, score_params(), use_distance=False)
    c, _ = score_edges(emb, np.ones((3, 3)) * 9, score_params())
    assert np.array_equal(a.data, b.data) and not np.allclose(b.data, c.data)


@pytest.mark.parametrize("x,want", [(0.5, 1), (1.5, 2), (2.5, 3), (-0.5, -1), (2.49, 2), (0.0, 0)])
def test_round_half_away(x, want):
    assert round_half_away(x) == want


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 20))
def test_degree_bounds(k, n):
    K = int(clamp_degree(np.array(k), np.array(n)))
    if n == 0:
        assert K == 0
    else:
        assert 1 <= K <= n


def test_estimate_degree_shapes_and_bounds():
    cfg = TrainConfig(hidden=6, init_degree=100.0)
    prm = init_params(cfg, ["x"], seed=0)
    emb = ad.Tensor(np.random.default_rng(0).normal(size=(2, 4, 6)))
    e_hat = np.full((2, 4, 4), 0.25)
    k, K = estimate_degree(emb, e_hat, prm, ZeroNoise(), np.array([[3, 2, 1, 0], [3, 3, 3, 3]]))
    assert k.shape == (2, 4)
    assert K.tolist() == [[3, 2, 1, 0], [3, 3, 3, 3]]


def test_rank_is_descending_with_stable_ties():
    e = np.array([[0.0, 0.2, 0.5, 0.2]])
    off = np.array([[False, True, True, True]])
    assert rank_candidates(e, off).tolist() == [[0, 2, 1, 3]]


def ring_candidates(n):
    off = np.zeros((n, n), bool)
    for i in range(n):
        off[i, (i + 1) % n] = off[i, (i - 1) % n] = True
    return off


def test_full_degree_returns_candidate_graph():
    n = 6
    off = ring_candidates(n)
    e = np.random.default_rng(0).uniform(size=(n, n))
    s = build_adaptive_adjacency(ad.Tensor(e), off.sum(1), off)
    assert np.array_equal(s.hard, off.astype(float))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 9), st.booleans())
def test_adjacency_structure(seed, n, sym):
    rng = np.random.default_rng(seed)
    off = rng.random((n, n)) < 0.5
    off = off | off.T
    np.fill_diagonal(off, False)
    e = rng.uniform(size=(n, n))
    K = clamp_degree(rng.uniform(0, n, n), off.sum(1))
    s = build_adaptive_adjacency(ad.Tensor(e), K, off, symmetrize=sym)
    assert np.all(np.diag(s.hard) == 0)
    assert np.all(s.hard[~off] == 0)
    if sym:
        assert np.array_equal(s.hard, s.hard.T)
    else:
        assert np.array_equal(s.hard.sum(1), K)
    # ST forward equals the hard selection
    st_adj = build_adaptive_adjacency(ad.Tensor(e), K, off, k=ad.Tensor(K.astype(float)), symmetrize=sym)
    assert np.allclose(st_adj.adj.data, s.hard, atol=1e-12)


def test_unknown_mode_rejected():
    off = ring_candidates(3)
    with pytest.raises(ValueError, match="mode"):
        build_adaptive_adjacency(ad.Tensor(np.ones((3, 3))), np.ones(3, int), off, mode="bogus")
