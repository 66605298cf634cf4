import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from asgn.datamodel import (GraphSnapshot, GridNode, LatLon, ObsNode, Violation, validate_snapshot,
                            validate_window)
from asgn.graphbuild import build_windows

from conftest import small_sim


def grid(i, lat=35.0, lon=127.0):
    return GridNode(i, LatLon(lat, lon), (0.0, 1.0, 2.0, 3.0))


def test_latlon_wraps_longitude():
    assert LatLon(10, 180).lon_deg == -180.0
    assert LatLon(10, 190).lon_deg == -170.0
    assert LatLon(10, -540).lon_deg == -180.0


def test_latlon_rejects_bad_latitude():
    import pytest

    with pytest.raises(ValueError):
        LatLon(91, 0)


@given(st.floats(-90, 90), st.floats(-1e4, 1e4))
def test_latlon_bounds_hold(lat, lon):
    p = LatLon(lat, lon)
    assert -90 <= p.lat_deg <= 90
    assert -180 <= p.lon_deg < 180


def test_dangling_edge():
    s = GraphSnapshot(0, (grid(1), grid(2)), (), ((1, 99),))
    assert validate_snapshot(s) == [Violation("dangling-edge", 99)]
    assert str(validate_snapshot(s)[0]) == "dangling-edge(99)"


def test_empty_snapshot_is_valid():
    assert validate_snapshot(GraphSnapshot(0)) == []


def test_duplicate_id():
    s = GraphSnapshot(0, (grid(1), grid(1)))
    assert [v.rule for v in validate_snapshot(s)] == ["duplicate-id"]


def test_observation_rules():
    bad_mask = ObsNode(1000, LatLon(0, 0), "x", (1.0, 2.0), (True,))
    no_valid = ObsNode(1001, LatLon(0, 0), "x", (1.0,), (False,))
    s = GraphSnapshot(0, (), (bad_mask, no_valid), ((1000, 1000), (1000, 1001), (1001, 1000)))
    rules = sorted(v.rule for v in validate_snapshot(s))
    assert rules == ["duplicate-edge", "mask-length", "no-valid-channel", "self-edge"]


def test_feature_width_checked_when_requested():
    s = GraphSnapshot(0, (GridNode(0, LatLon(0, 0), (1.0,)),))
    assert validate_snapshot(s) == []
    assert [v.rule for v in validate_snapshot(s, n_channels=4)] == ["feature-width"]


floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def snapshots(draw):
    n_grid = draw(st.integers(0, 5))
    n_obs = draw(st.integers(0, 5))
    g = tuple(GridNode(i, LatLon(draw(st.floats(-90, 90)), draw(st.floats(-180, 179.999))),
                       tuple(draw(st.lists(floats, min_size=4, max_size=4))))
              for i in range(n_grid))
    o = tuple(ObsNode(1000 + i, LatLon(draw(st.floats(-90, 90)), draw(st.floats(-180, 179.999))),
                      draw(st.sampled_from(["a", "b"])), tuple(draw(st.lists(floats, min_size=4, max_size=4))),
                      tuple(draw(st.lists(st.booleans(), min_size=4, max_size=4))))
              for i in range(n_obs))
    ids = [n.id for n in g + o]
    edges = ()
    if len(ids) > 1:
        pairs = draw(st.lists(st.tuples(st.sampled_from(ids), st.sampled_from(ids)), max_size=6))
        edges = tuple((a, b) for a, b in pairs)
    return GraphSnapshot(draw(st.integers(0, 100)), g, o, edges)


@settings(max_examples=60)
@given(snapshots())
def test_snapshot_round_trip_is_exact(s):
    back = GraphSnapshot.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back == s
    for a, b in zip(back.nodes, s.nodes):
        assert np.array_equal(np.array(a.features).view(np.uint64), np.array(b.features).view(np.uint64))


def test_local_ids_are_a_bijection(small_dataset):
    for w in build_windows(small_dataset, m=3, k=2, targets=[0, 5], split="train"):
        assert validate_window(w, 3, 2) == []
        for sg in w.snapshots:
            loc = sg.local_index
            assert len(loc) == sg.n
            assert all(int(sg.node_ids[i]) == g for g, i in loc.items())


def test_window_length_violation(small_dataset):
    w = next(build_windows(small_dataset, m=3, k=2, targets=[0]))
    assert [v.rule for v in validate_window(w, 4, 2)] == ["window-length"]
