import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asgn.datamodel import GraphSnapshot, GridNode, LatLon, ObsNode, validate_window
from asgn.graphbuild import WindowSampler, build_radius_edges, build_windows, haversine_km, khop_subgraph
from asgn.synthgen import ConfigError, generate_dataset

from conftest import small_sim
from derived_examples import bfs_oracle, edges_match_brute_force, random_scatter


def km_north(km):
    return math.degrees(km / 6371.0)


def pair(km, obs=False):
    a = GridNode(1, LatLon(35.0, 127.0), (0.0,) * 4)
    loc = LatLon(35.0 + km_north(km), 127.0)
    b = ObsNode(2, loc, "x", (0.0,) * 4, (True,) * 4) if obs else GridNode(2, loc, (0.0,) * 4)
    return [a, b]


def test_49_km_connected_51_km_not():
    assert build_radius_edges(pair(49.0), 50.0).as_set() == {(1, 2)}
    assert len(build_radius_edges(pair(51.0), 50.0)) == 0


def test_edge_distance_matches_haversine():
    nodes = pair(30.0)
    e = build_radius_edges(nodes, 50.0)
    assert e.km[0] == pytest.approx(haversine_km(nodes[0].loc, nodes[1].loc))
    assert e.km[0] == pytest.approx(30.0, rel=1e-9)


def test_obs_obs_flag():
    a = ObsNode(1, LatLon(35.0, 127.0), "x", (0.0,) * 4, (True,) * 4)
    b = pair(10.0, obs=True)[1]
    assert len(build_radius_edges([a, b], 50.0)) == 1
    assert len(build_radius_edges([a, b], 50.0, obs_obs=False)) == 0


def test_nonpositive_radius_rejected():
    with pytest.raises(ValueError):
        build_radius_edges(pair(1.0), 0.0)


def test_edges_canonical_and_sorted():
    e = build_radius_edges(random_scatter(np.random.default_rng(3), 40), 60.0)
    assert np.all(e.pairs[:, 0] < e.pairs[:, 1])
    assert [tuple(p) for p in e.pairs] == sorted(tuple(p) for p in e.pairs)


def test_edges_near_dateline():
    a = GridNode(1, LatLon(0.0, 179.9), (0.0,) * 4)
    b = GridNode(2, LatLon(0.0, -179.9), (0.0,) * 4)
    e = build_radius_edges([a, b], 50.0)
    assert e.as_set() == {(1, 2)} and e.km[0] < 23


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60), st.floats(10.0, 120.0))
def test_radius_edges_match_brute_force(seed, n, radius):
    assert edges_match_brute_force(random_scatter(np.random.default_rng(seed), n), radius)


def chain_snapshot(n):
    grid = tuple(GridNode(i, LatLon(35.0, 127.0 + 0.1 * i), (float(i),) * 4) for i in range(n))
    return GraphSnapshot(0, grid, (), tuple((i, i + 1) for i in range(n - 1)))


def test_khop_on_chain():
    sg = khop_subgraph(chain_snapshot(10), 5, 2)
    assert list(sg.node_ids) == [5, 4, 6, 3, 7]
    assert list(sg.hops) == [0, 1, 1, 2, 2]
    # every induced chain edge is kept, in local indices
    assert len(sg.edges) == 4


def test_khop_zero_is_target_only():
    sg = khop_subgraph(chain_snapshot(4), 2, 0)
    assert list(sg.node_ids) == [2] and len(sg.edges) == 0


def test_isolated_target():
    s = GraphSnapshot(0, (GridNode(7, LatLon(0.0, 0.0), (0.0,) * 4),), (), ())
    sg = khop_subgraph(s, 7, 3)
    assert sg.n == 1 and sg.edges.shape == (0, 2)


def test_missing_target_raises():
    with pytest.raises(KeyError):
        khop_subgraph(chain_snapshot(3), 99, 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_khop_monotone_and_matches_reachability(seed, k):
    nodes = random_scatter(np.random.default_rng(seed), 40)
    e = build_radius_edges(nodes, 45.0)
    s = GraphSnapshot(0, tuple(n for n in nodes if isinstance(n, GridNode)),
                      tuple(n for n in nodes if isinstance(n, ObsNode)), tuple(map(tuple, e.pairs.tolist())))
    target = nodes[0].id
    small = set(khop_subgraph(s, target, k).node_ids.tolist())
    big = set(khop_subgraph(s, target, k + 1).node_ids.tolist())
    assert small <= big
    assert small == bfs_oracle(s, target, k)


def test_window_count_and_validity():
    ds = generate_dataset(small_sim())
    m, k = 4, 2
    targets = ds.grid_ids[:3]
    ws = list(build_windows(ds, m=m, k=k, targets=targets))
    assert len(ws) == len(targets) * (ds.n_steps - m)
    for w in ws[:6]:
        assert validate_window(w, m, k) == []
        assert w.label_t == w.snapshots[-1].t + 1


def test_window_target_is_local_zero(small_dataset):
    w = WindowSampler(small_dataset, m=3, k=2).window(small_dataset.grid_ids[4], 5)
    assert all(sg.node_ids[0] == small_dataset.grid_ids[4] for sg in w.snapshots)
    assert [sg.t for sg in w.snapshots] == [2, 3, 4]


def test_split_windows_stay_inside_split(small_dataset):
    ws = WindowSampler(small_dataset, m=2, k=1)
    for split, (a, b) in small_dataset.splits.items():
        for lt in ws.label_steps(split):
            assert a <= lt < b and lt - 2 >= 0


def test_too_few_steps_rejected(small_dataset):
    with pytest.raises(ConfigError, match="m\\+1"):
        WindowSampler(small_dataset, m=small_dataset.n_steps)


def test_pretrain_window_has_no_label(small_dataset):
    w = WindowSampler(small_dataset, m=2, k=1).window(small_dataset.grid_ids[0], 4, pretrain=True)
    assert w.target_next is None
