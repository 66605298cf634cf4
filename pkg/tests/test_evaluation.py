import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asgn import structlearn
from asgn.config import EvalConfig
from asgn.evaluation import (GROUPS, AblationResult, metrics, persistence_predictions, report, run_ablation,
                             run_sensitivity, stratified_csv, stratified_mae, stratify_nodes, sweep_csv,
                             train_and_score, variability_index, variant_config, write_sweep_svg)

from conftest import small_train

ECFG = EvalConfig(vi_length=3)


def two_pass_r2(p, y):
    mean = sum(y) / len(y)
    ss_tot = sum((v - mean) ** 2 for v in y)
    ss_res = sum((a - b) ** 2 for a, b in zip(p, y))
    return 1 - ss_res / ss_tot


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_metrics_against_scalar_oracle(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(n, 4)) * 10 + 3
    p = y + rng.normal(size=(n, 4))
    rep = metrics(p, y)
    for c in range(4):
        col_p, col_y = p[:, c].tolist(), y[:, c].tolist()
        assert rep.r2[c] == pytest.approx(two_pass_r2(col_p, col_y), abs=1e-10)
        assert rep.mae[c] == pytest.approx(sum(abs(a - b) for a, b in zip(col_p, col_y)) / n, abs=1e-10)
        assert rep.rmse[c] == pytest.approx((sum((a - b) ** 2 for a, b in zip(col_p, col_y)) / n) ** 0.5,
                                            abs=1e-10)


def test_perfect_prediction():
    y = np.arange(8.0).reshape(4, 2)
    rep = metrics(y, y, ("a", "b"))
    assert rep.r2 == [1.0, 1.0] and rep.rmse == [0.0, 0.0]


def test_constant_truth_has_undefined_r2():
    rep = metrics(np.zeros((3, 1)), np.ones((3, 1)), ("a",))
    assert rep.r2 == [None] and np.isnan(rep.mean_r2())


def test_metrics_shape_errors():
    with pytest.raises(ValueError, match="shape"):
        metrics(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(ValueError, match="no rows"):
        metrics(np.zeros((0, 4)), np.zeros((0, 4)))


def test_variability_index_window():
    s = np.concatenate([np.full(10, 100.0), [1.0, 2.0, 3.0, 4.0]])
    assert variability_index(s, 4) == pytest.approx(np.sqrt(1.25))
    with pytest.raises(ValueError, match="needs 24"):
        variability_index(np.zeros(23))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=4, max_size=30))
def test_stratify_counts_even_with_ties(vals):
    labels = stratify_nodes(np.array(vals, float))
    q = len(vals) // 4
    assert labels.count("low") == q and labels.count("high") == q
    lo = [v for v, l in zip(vals, labels) if l == "low"]
    hi = [v for v, l in zip(vals, labels) if l == "high"]
    rest = [v for v, l in zip(vals, labels) if l == "none"]
    assert max(lo) <= min(rest + hi) and min(hi) >= max(rest + lo)


def test_stratify_needs_four_nodes():
    with pytest.raises(ValueError):
        stratify_nodes([1.0, 2.0, 3.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 25))
def test_size_weighted_groups_decompose_overall(seed, n):
    rng = np.random.default_rng(seed)
    err = rng.uniform(size=(n, 4))
    labels = stratify_nodes(rng.normal(size=n))
    g, size = stratified_mae(err, labels)
    total = sum(size[k] * g[k] for k in GROUPS if size[k])
    assert np.allclose(total / n, err.mean(0), atol=1e-12)


def test_report_and_csv(small_dataset):
    pairs, p, y = persistence_predictions(small_dataset, "test", m=3)
    rep = report(pairs, p, y, ECFG)
    assert sum(rep.group_size.values()) == len(small_dataset.grid_ids)
    assert rep.group_size["low"] == rep.group_size["high"] == len(small_dataset.grid_ids) // 4
    lines = stratified_csv(rep).splitlines()
    assert lines[0] == "group,count,U,V,T,Q" and [l.split(",")[0] for l in lines[1:]] == list(GROUPS)
    d = rep.to_dict()
    assert set(d["stratified"]) == set(GROUPS) and d["n"] == len(pairs)


def test_persistence_matches_closed_form(small_dataset):
    pairs, p, y = persistence_predictions(small_dataset, "test", m=3)
    g, lt = pairs[0]
    assert np.allclose(p[0], small_dataset.states[lt - 1, small_dataset.grid_ids.index(g)], atol=1e-5)
    assert np.allclose(y[0], small_dataset.states[lt, small_dataset.grid_ids.index(g)], atol=1e-5)


def test_variant_configs():
    base = small_train()
    assert variant_config(base, "fixed").structure == "fixed"
    assert variant_config(base, "no-dist").use_distance is False
    assert variant_config(base, "full") == base
    with pytest.raises(ValueError):
        variant_config(base, "nope")


def test_fixed_variant_never_scores_edges(small_dataset):
    before = structlearn.CALLS["score_edges"], structlearn.CALLS["gumbel_softmax_sample"]
    train_and_score(small_dataset, small_train(structure="fixed", epochs=1), ECFG)
    after = structlearn.CALLS["score_edges"], structlearn.CALLS["gumbel_softmax_sample"]
    assert before == after
    train_and_score(small_dataset, small_train(epochs=1), ECFG)
    assert structlearn.CALLS["score_edges"] > after[0]


def test_ablation_table(small_dataset):
    res = run_ablation(small_dataset, small_train(epochs=1), seeds=(0,), ecfg=ECFG)
    assert isinstance(res, AblationResult)
    lines = res.to_csv().splitlines()
    assert lines[0] == "variant,adaptive,dist,U,V,T,Q"
    assert [l.split(",")[:3] for l in lines[1:]] == [["full", "1", "1"], ["no-dist", "1", "0"], ["fixed", "0", ""]]
    assert res.mean_vi_gap("full").shape == (4,)


def test_single_seed_sweep_has_zero_std(small_dataset):
    rows = run_sensitivity(small_dataset, small_train(epochs=1), "tau", [0.3, 1.0], seeds=(0,), ecfg=ECFG)
    assert [r["value"] for r in rows] == [0.3, 1.0]
    assert all(r["std_r2"] == 0.0 for r in rows)
    assert sweep_csv(rows).splitlines()[0] == "param,value,mean_r2,std_r2"
    with pytest.raises(ValueError, match="sweep"):
        run_sensitivity(small_dataset, small_train(), "lr", [1.0])


def test_sweep_svg_is_deterministic(tmp_path):
    rows = [{"param": "tau", "value": v, "mean_r2": 0.5 + v / 10, "std_r2": 0.01} for v in (0.1, 0.5, 1.0)]
    a = write_sweep_svg(rows, tmp_path / "a.svg").read_bytes()
    b = write_sweep_svg(rows, tmp_path / "b.svg").read_bytes()
    assert a == b and a.startswith(b"<?xml")
