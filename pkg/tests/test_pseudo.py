import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedklpr.pseudo import EmptyEpoch, assign_proxies, dbscan
from oracles import assert_partition_matches


def test_two_triples():
    pts = np.array([[0, 0], [0.1, 0], [0, 0.1], [5, 5], [5.1, 5], [5, 5.1]], float)
    labels = dbscan(pts, eps=0.5, min_pts=2)
    assert labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_all_noise():
    pts = np.array([[0, 0], [1, 0], [0, 1], [3, 3]], float)
    assert dbscan(pts, eps=0.5, min_pts=2).tolist() == [-1, -1, -1, -1]


def test_min_pts_one_makes_singletons():
    pts = np.array([[0, 0], [10, 0], [0.2, 0]], float)
    assert dbscan(pts, eps=0.5, min_pts=1).tolist() == [0, 1, 0]


def test_border_goes_to_first_cluster_in_scan_order():
    # point 2 is a border point reachable from both dense pairs
    pts = np.array([[0.0, 0], [-0.4, 0], [0.5, 0], [1.0, 0], [1.4, 0]])
    labels = dbscan(pts, eps=0.5, min_pts=3)
    assert labels.tolist() == [0, 0, 0, 1, 1] or labels[2] == labels[0]


@pytest.mark.parametrize("eps,min_pts", [(0, 2), (-1, 2), (0.5, 0)])
def test_invalid_parameters(eps, min_pts):
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 2)), eps, min_pts)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.floats(0.05, 1.5), st.integers(1, 6))
def test_matches_reachability_oracle(seed, n, eps, min_pts):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2)) * rng.uniform(0.2, 2.0)
    assert_partition_matches(pts, eps, min_pts)


def test_assign_proxies_enumeration():
    lab = assign_proxies([0, 0, 1], [0, 1, 1])
    assert lab.proxy.tolist() == [0, 1, 2]
    assert lab.Z == 3
    assert dict(zip(lab.cams.tolist(), lab.Z_c.tolist())) == {0: 1, 1: 2}
    assert lab.offset(1) == 1


def test_assign_proxies_outliers():
    with pytest.raises(EmptyEpoch):
        assign_proxies([-1, -1], [0, 1])
    lab = assign_proxies([0, -1], [3, 3])
    assert lab.proxy.tolist() == [0, -1]


def test_assign_proxies_singleton():
    assert assign_proxies([0], [0]).Z == 1


@given(st.lists(st.tuples(st.integers(-1, 4), st.integers(0, 3)), min_size=1, max_size=30), st.randoms())
def test_assign_proxies_permutation_equivariant(pairs, rnd):
    if all(p < 0 for p, _ in pairs):
        return
    pids, cams = map(np.array, zip(*pairs))
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a = assign_proxies(pids, cams)
    b = assign_proxies(pids[perm], cams[perm])
    assert b.proxy.tolist() == a.proxy[perm].tolist()
    assert a.Z == b.Z == int(a.Z_c.sum())
