import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reinforced_features.errors import EmptyCandidates, InvalidDistribution
from reinforced_features.model import HeatMap
from reinforced_features.rng import make_rng
from reinforced_features.sampling import (
    descriptor_distances,
    extract_keypoints_test,
    keypoint_set_from_coords,
    match_distribution,
    mutual_nn_candidates,
    sample_keypoints,
    sample_match_subset,
    subset_logp,
    subset_logp_grad_dist,
)


def _heat(p):
    return HeatMap.from_prob(np.asarray(p, dtype=np.float64))


def _within_3_sigma(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))


# ------------------------------------------------------------ keypoints


def test_point_mass_collapses():
    p = np.zeros((4, 4))
    p[2, 1] = 1.0
    ks = sample_keypoints(_heat(p), 5, make_rng(0))
    assert ks.coords.tolist() == [[1, 2]]
    assert ks.counts.tolist() == [5]
    assert ks.draw_logp.tolist() == [0.0] * 5


def test_uniform_frequencies():
    n = 100_000
    ks = sample_keypoints(_heat(np.full((8, 8), 1 / 64)), n, make_rng(1))
    assert len(ks) == 64
    assert all(_within_3_sigma(c, n, 1 / 64) for c in ks.counts)


def test_two_pixel_ratio():
    n = 10_000
    ks = sample_keypoints(_heat([[0.75, 0.25]]), n, make_rng(2))
    counts = dict(zip(map(tuple, ks.coords), ks.counts))
    assert _within_3_sigma(counts[(0, 0)], n, 0.75)
    assert counts[(0, 0)] + counts[(1, 0)] == n


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200))
def test_joint_logp_bookkeeping(seed, n):
    r = make_rng(seed)
    p = np.exp(r.normal(size=(6, 6)) * 3)
    p[r.random((6, 6)) < 0.3] = 0.0
    p[0, 0] += 1e-3
    h = _heat(p / p.sum())
    ks = sample_keypoints(h, n, r)
    assert ks.n_draws == n
    # never a zero-probability pixel
    assert (h.prob[ks.coords[:, 1], ks.coords[:, 0]] > 0).all()
    assert np.allclose(ks.logp, h.logp[ks.coords[:, 1], ks.coords[:, 0]])
    assert ks.joint_logp == pytest.approx(sum(h.logp[y, x] for x, y in np.repeat(ks.coords, ks.counts, axis=0)), abs=1e-9)
    assert ks.count_map(h.shape).sum() == n


def test_invalid_heatmap():
    with pytest.raises(InvalidDistribution):
        sample_keypoints(_heat([[0.5, 0.6]]), 3, make_rng(0))
    with pytest.raises(ValueError):
        sample_keypoints(_heat([[0.5, 0.5]]), 0, make_rng(0))


def test_keypoint_set_from_coords():
    h = _heat([[0.1, 0.2], [0.3, 0.4]])
    ks = keypoint_set_from_coords(h, [[1, 1], [0, 1]])
    assert np.allclose(np.exp(ks.logp), [0.4, 0.3])


# ------------------------------------------------------------ mutual NN


def _mnn_oracle(d):
    out = []
    for i in range(d.shape[0]):
        j = min(range(d.shape[1]), key=lambda c: (d[i, c], c))
        if min(range(d.shape[0]), key=lambda r: (d[r, j], r)) == i:
            out.append((i, j))
    return out


def test_singleton_match():
    assert mutual_nn_candidates([[1.0, 0.0]], [[0.0, 1.0]]).tolist() == [[0, 0]]


def test_asymmetric_excluded():
    a, c = [1.0, 0.0], [0.79, 0.61]
    b = [0.8, 0.6]
    # a's nearest is b, but b's nearest in the first set is c
    m = mutual_nn_candidates(np.array([a, c]), np.array([b]))
    assert m.tolist() == [[1, 0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_mutual_nn_matches_bruteforce(seed):
    r = make_rng(seed)
    d1 = r.normal(size=(4, 3))
    d2 = r.normal(size=(4, 3))
    got = mutual_nn_candidates(d1, d2).tolist()
    assert got == [list(p) for p in _mnn_oracle(descriptor_distances(d1, d2))]
    assert len({i for i, _ in got}) == len(got) == len({j for _, j in got})


def test_mutual_nn_ties_go_to_lower_index():
    d1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    d2 = np.array([[1.0, 0.0]])
    assert mutual_nn_candidates(d1, d2).tolist() == [[0, 0]]


def test_mutual_nn_empty():
    assert mutual_nn_candidates(np.zeros((0, 2)), np.ones((3, 2))).shape == (0, 2)


def test_mutual_knn_contains_k1():
    r = make_rng(3)
    d1, d2 = r.normal(size=(10, 4)), r.normal(size=(12, 4))
    k1 = set(map(tuple, mutual_nn_candidates(d1, d2)))
    k3 = set(map(tuple, mutual_nn_candidates(d1, d2, k=3)))
    assert k1 <= k3


# ------------------------------------------------------------ match distribution


def _ms(dist):
    # descriptors on a line so that distances are exactly ``dist``
    dist = np.asarray(dist, dtype=np.float64)
    n = len(dist)
    d1 = np.stack([np.zeros(n), np.arange(n) * 10.0], axis=1)
    d2 = d1 + np.stack([dist, np.zeros(n)], axis=1)
    return match_distribution(np.stack([np.arange(n), np.arange(n)], axis=1), d1, d2)


def test_equal_distances():
    assert np.allclose(_ms([0.3, 0.3]).prob, [0.5, 0.5])


def test_distance_softmax():
    assert np.allclose(_ms([0.0, 1.0]).prob, [0.7311, 0.2689], atol=1e-4)


def test_single_candidate():
    assert np.allclose(_ms([0.7]).prob, [1.0])


def test_empty_candidates():
    with pytest.raises(EmptyCandidates):
        match_distribution(np.zeros((0, 2)), np.zeros((1, 2)), np.zeros((1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=12))
def test_match_logp_normalised(dist):
    ms = _ms(dist)
    assert abs(np.logaddexp.reduce(ms.logp)) < 1e-6


# ------------------------------------------------------------ subsets


def test_full_fraction_takes_all():
    sub = sample_match_subset(_ms([0.1, 0.5]), 1.0, make_rng(0))
    assert sorted(sub.order.tolist()) == [0, 1]
    assert sub.is_subsampled


def test_half_of_one_is_one():
    sub = sample_match_subset(_ms([0.4]), 0.5, make_rng(0))
    assert sub.order.tolist() == [0]
    assert sub.sequence_logp == 0.0


def test_uniform_subset_frequencies():
    ms = _ms([0.2] * 4)
    r = make_rng(5)
    hits = np.zeros(4)
    n = 10_000
    for _ in range(n):
        hits[sample_match_subset(ms, 0.5, r).order] += 1
    assert all(_within_3_sigma(h, n, 0.5) for h in hits)


def test_subset_bad_fraction():
    with pytest.raises(ValueError):
        sample_match_subset(_ms([0.1]), 0.0, make_rng(0))


def test_sequence_logp_enumerated():
    ms = _ms([0.0, 0.4, 1.3])
    # probabilities of every ordered draw of two sum to one
    total = sum(math.exp(subset_logp(ms, list(o))) for o in permutations(range(3), 2))
    assert total == pytest.approx(1.0, abs=1e-12)
    sub = sample_match_subset(ms, 0.5, make_rng(1))
    assert sub.sequence_logp == pytest.approx(subset_logp(ms, sub.order), abs=1e-12)


def test_subset_logp_gradient():
    dist = np.array([0.2, 0.9, 1.4, 0.5])
    order = [2, 0]
    g = subset_logp_grad_dist(_ms(dist), order)
    eps = 1e-6
    for k in range(4):
        up, dn = dist.copy(), dist.copy()
        up[k] += eps
        dn[k] -= eps
        num = (subset_logp(_ms(up), order) - subset_logp(_ms(dn), order)) / (2 * eps)
        assert g[k] == pytest.approx(num, abs=1e-7)


# ------------------------------------------------------------ test-time extraction


def _nms_oracle(v, max_n, r, min_value):
    H, W = v.shape
    keep = []
    for y in range(H):
        for x in range(W):
            if v[y, x] < min_value:
                continue
            ok = True
            for yy in range(max(0, y - r), min(H, y + r + 1)):
                for xx in range(max(0, x - r), min(W, x + r + 1)):
                    if (yy, xx) == (y, x):
                        continue
                    earlier = (yy, xx) < (y, x)
                    if v[yy, xx] > v[y, x] or (earlier and v[yy, xx] == v[y, x]):
                        ok = False
            if ok:
                keep.append((y, x))
    keep.sort(key=lambda p: -v[p])
    return [[x, y] for y, x in keep[:max_n]]


def test_single_peak():
    v = np.full((9, 9), 0.01)
    v[4, 6] = 0.5
    assert extract_keypoints_test(v, 10, 2, 0.1).tolist() == [[6, 4]]


def test_adjacent_tie():
    v = np.zeros((5, 5))
    v[2, 2] = v[2, 3] = 1.0
    assert extract_keypoints_test(v, 10, 1, 0.5).tolist() == [[2, 2]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 3), st.integers(1, 20))
def test_nms_matches_bruteforce(seed, r, max_n):
    # coarse values make ties common
    v = make_rng(seed).integers(0, 6, (7, 8)) / 10.0
    got = extract_keypoints_test(v, max_n, r, 0.2).tolist()
    assert got == _nms_oracle(v, max_n, r, 0.2)


def test_extract_accepts_heatmap():
    p = np.full((4, 4), 0.5 / 15)
    p[1, 1] = 0.5
    assert extract_keypoints_test(_heat(p), 5, 1, 0.4).tolist() == [[1, 1]]
