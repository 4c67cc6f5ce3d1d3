import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftseg.clustering import (METRICS, ClusterBank, DomainFeature,
                                 bhattacharyya, build_feature, build_features,
                                 ddr, feature_distance, offline_kmeans,
                                 permutation_agreement, wasserstein2)
from driftseg.errors import ConfigError, ShapeError, UndefinedMetricError
from driftseg.tensor import ChannelStats


def feat(mean_by_layer, var_by_layer=None, layers=("t0",)):
    """One-channel-per-layer feature shortcut for hand cases."""
    out = []
    for i, name in enumerate(layers):
        m = np.atleast_1d(np.asarray(mean_by_layer[i], dtype=np.float64))
        if var_by_layer is None:
            v = np.ones_like(m)
        else:
            v = np.atleast_1d(np.asarray(var_by_layer[i], dtype=np.float64))
        out.append((name, ChannelStats(m, v)))
    return DomainFeature(tuple(out))


# ---------------- scalar distances ----------------

def test_bhattacharyya_hand_values():
    assert bhattacharyya((0.0, 1.0), (1.0, 1.0)) == pytest.approx(0.125, abs=1e-12)
    assert bhattacharyya((0.0, 1.0), (0.0, 4.0)) == pytest.approx(
        0.25 * math.log(25.0 / 16.0), abs=1e-12)
    assert bhattacharyya((2.0, 3.0), (2.0, 3.0)) == pytest.approx(0.0, abs=1e-12)


def test_bhattacharyya_symmetry():
    a, b = (0.3, 2.0), (-1.2, 0.7)
    assert bhattacharyya(a, b) == pytest.approx(bhattacharyya(b, a), abs=1e-12)


def test_bhattacharyya_rejects_negative_variance():
    with pytest.raises(UndefinedMetricError):
        bhattacharyya((0.0, -1.0), (0.0, 1.0))


def test_bhattacharyya_floors_tiny_variance():
    # degenerate variances are floored rather than dividing by zero
    v = bhattacharyya((0.0, 0.0), (0.0, 0.0))
    assert math.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)


def test_wasserstein2_hand_values():
    assert wasserstein2((0.0, 1.0), (1.0, 3.0)) == pytest.approx(
        math.sqrt(5.0), abs=1e-12)
    assert wasserstein2((2.0, 1.0), (2.0, 1.0)) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein2((0.0, 1.0), (3.0, 1.0)) == pytest.approx(3.0, abs=1e-12)


# ---------------- feature distance ----------------

def test_feature_distance_is_channel_mean():
    a = feat([[0.0, 0.0]], [[1.0, 1.0]])
    b = feat([[1.0, 0.0]], [[1.0, 4.0]])
    want = 0.5 * (0.125 + 0.25 * math.log(25.0 / 16.0))
    assert feature_distance(a, b, "bhattacharyya") == pytest.approx(want, abs=1e-12)


def test_feature_distance_averages_layers():
    a = feat([0.0, 0.0], layers=("t0", "t1"))
    b = feat([1.0, 3.0], layers=("t0", "t1"))
    # unit variances make bhattacharyya depend on means only
    d0 = bhattacharyya((0.0, 1.0), (1.0, 1.0))
    d1 = bhattacharyya((0.0, 1.0), (3.0, 1.0))
    want = 0.5 * (d0 + d1)
    assert feature_distance(a, b, "bhattacharyya") == pytest.approx(want, abs=1e-12)


def test_feature_distance_metrics_disagree():
    a = feat([[0.0]], [[1.0]])
    b = feat([[1.0]], [[4.0]])
    vals = {m: feature_distance(a, b, m) for m in METRICS}
    assert len({round(v, 9) for v in vals.values()}) == len(METRICS)


def test_feature_distance_wasserstein_uses_std():
    a = feat([[0.0]], [[1.0]])
    b = feat([[1.0]], [[9.0]])
    assert feature_distance(a, b, "wasserstein2") == pytest.approx(
        math.hypot(1.0, 2.0), abs=1e-12)


def test_feature_distance_euclidean_uses_variance_plane():
    a = feat([[0.0]], [[1.0]])
    b = feat([[1.0]], [[9.0]])
    assert feature_distance(a, b, "euclidean") == pytest.approx(
        math.hypot(1.0, 8.0), abs=1e-12)


def test_feature_distance_stats_divergence():
    a = feat([[0.0]], [[1.0]])
    b = feat([[1.0]], [[9.0]])
    assert feature_distance(a, b, "stats_divergence") == pytest.approx(
        1.0 + 2.0, abs=1e-12)


def test_feature_distance_layer_mismatch():
    a = feat([0.0], layers=("t0",))
    b = feat([0.0], layers=("t1",))
    with pytest.raises(ShapeError):
        feature_distance(a, b, "bhattacharyya")


def test_feature_distance_unknown_metric():
    a = feat([0.0])
    with pytest.raises(ConfigError):
        feature_distance(a, a, "cosine")


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(-5, 5), st.floats(0.01, 5))
def test_distance_axioms(m1, v1, m2, v2):
    a = feat([[m1]], [[v1]])
    b = feat([[m2]], [[v2]])
    for metric in METRICS:
        dab = feature_distance(a, b, metric)
        assert dab >= 0
        assert feature_distance(b, a, metric) == pytest.approx(dab, rel=1e-9, abs=1e-12)
        assert feature_distance(a, a, metric) == pytest.approx(0.0, abs=1e-9)


# ---------------- online clustering ----------------

def test_seeding_assigns_in_order():
    bank = ClusterBank(3, 0.9, "bhattacharyya", ("t0",))
    f0, f1, f2 = feat([0.0]), feat([5.0]), feat([10.0])
    assert bank.assign_and_update(f0) == 0
    assert bank.assign_and_update(f1) == 1
    assert bank.assign_and_update(f2) == 2
    assert bank.initialized == 3
    np.testing.assert_array_equal(bank.counts, [1, 1, 1])


def test_assignment_after_seeding_is_nearest():
    bank = ClusterBank(2, 1.0, "bhattacharyya", ("t0",))
    bank.assign_and_update(feat([0.0]))
    bank.assign_and_update(feat([10.0]))
    # eta = 1 freezes centroids at their seeds
    assert bank.assign_and_update(feat([1.0])) == 0
    assert bank.assign_and_update(feat([9.0])) == 1


def test_ema_update_moves_centroid():
    bank = ClusterBank(1, 0.9, "euclidean", ("t0",))
    bank.assign_and_update(feat([[0.0]], [[1.0]]))
    bank.assign_and_update(feat([[10.0]], [[3.0]]))
    c = bank.centroids[0].layer("t0")
    assert c.means[0] == pytest.approx(0.9 * 0.0 + 0.1 * 10.0, abs=1e-12)
    assert c.vars[0] == pytest.approx(0.9 * 1.0 + 0.1 * 3.0, abs=1e-12)


def test_tie_breaks_to_lowest_index():
    bank = ClusterBank(2, 1.0, "euclidean", ("t0",))
    bank.assign_and_update(feat([0.0]))
    bank.assign_and_update(feat([2.0]))
    # equidistant from both centroids
    assert bank.assign_and_update(feat([1.0])) == 0


def test_assign_frozen_does_not_move_centroids():
    bank = ClusterBank(2, 0.5, "euclidean", ("t0",))
    bank.assign_and_update(feat([0.0]))
    bank.assign_and_update(feat([10.0]))
    before = [c.layer("t0").means.copy() for c in bank.centroids]
    assert bank.assign_frozen(feat([8.0])) == 1
    after = [c.layer("t0").means.copy() for c in bank.centroids]
    for b, a in zip(before, after):
        np.testing.assert_array_equal(b, a)
    np.testing.assert_array_equal(bank.counts, [1, 1])


def test_assign_frozen_requires_seeded_bank():
    bank = ClusterBank(2, 0.5, "euclidean", ("t0",))
    with pytest.raises(ConfigError):
        bank.assign_frozen(feat([0.0]))


def test_streaming_recovers_separated_blobs():
    rng = np.random.default_rng(7)
    bank = ClusterBank(3, 0.9, "bhattacharyya", ("t0",))
    centers = [0.0, 6.0, 12.0]
    truth, got = [], []
    # one clean segment per blob first, then shuffled recurrences
    order = [0, 1, 2] + list(rng.integers(0, 3, size=200))
    for d in order:
        m = centers[d] + rng.normal(0, 0.3)
        got.append(bank.assign_and_update(feat([[m]], [[1.0]])))
        truth.append(d)
    agreement = permutation_agreement(np.array(got), np.array(truth))
    assert agreement >= 0.95


def test_bank_validation():
    with pytest.raises(ConfigError):
        ClusterBank(0, 0.9, "bhattacharyya", ("t0",))
    with pytest.raises(ConfigError):
        ClusterBank(2, 1.5, "bhattacharyya", ("t0",))
    with pytest.raises(ConfigError):
        ClusterBank(2, 0.9, "nope", ("t0",))
    with pytest.raises(ConfigError):
        ClusterBank(2, 0.9, "bhattacharyya", ())


# ---------------- offline clustering oracle ----------------

def brute_force_kmeans_labels(points, k, metric_fn):
    """Exhaustive best labeling for tiny inputs: try all partitions."""
    import itertools
    n = len(points)
    best, best_cost = None, np.inf
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) < k:
            continue
        cost = 0.0
        for c in range(k):
            members = [points[i] for i in range(n) if labels[i] == c]
            center = (np.mean([m for m, _ in members]), np.mean([v for _, v in members]))
            cost += sum(metric_fn(center, p) for p in members)
        if cost < best_cost - 1e-12:
            best, best_cost = labels, cost
    return np.array(best)


def test_offline_kmeans_matches_brute_force_on_separated_data():
    rng = np.random.default_rng(3)
    pts = ([(rng.normal(0, 0.1), 1.0) for _ in range(4)]
           + [(rng.normal(8, 0.1), 1.0) for _ in range(4)])
    feats = [feat([[m]], [[v]]) for m, v in pts]
    labels, _ = offline_kmeans(feats, 2, "euclidean", seed=0)
    want = brute_force_kmeans_labels(pts, 2, lambda c, p: math.hypot(c[0] - p[0],
                                                                     c[1] - p[1]))
    assert permutation_agreement(labels, want) == 1.0


def test_offline_kmeans_deterministic():
    rng = np.random.default_rng(5)
    feats = [feat([[rng.normal(d * 5, 0.2)]], [[1.0]])
             for d in (0, 1, 2) for _ in range(6)]
    l1, _ = offline_kmeans(feats, 3, "bhattacharyya", seed=42)
    l2, _ = offline_kmeans(feats, 3, "bhattacharyya", seed=42)
    np.testing.assert_array_equal(l1, l2)


def test_offline_kmeans_needs_enough_points():
    with pytest.raises(ConfigError):
        offline_kmeans([feat([0.0])], 2, "euclidean", seed=0)


# ---------------- permutation agreement ----------------

def test_permutation_agreement_handles_relabeling():
    pred = np.array([1, 1, 0, 0, 2, 2])
    truth = np.array([0, 0, 1, 1, 2, 2])
    assert permutation_agreement(pred, truth) == 1.0


def test_permutation_agreement_partial():
    pred = np.array([0, 0, 0, 1])
    truth = np.array([0, 0, 1, 1])
    assert permutation_agreement(pred, truth) == pytest.approx(0.75)


def test_permutation_agreement_length_mismatch():
    with pytest.raises(ConfigError):
        permutation_agreement(np.array([0, 1]), np.array([0]))


# ---------------- domain distinction ratio ----------------

def test_ddr_hand_case():
    # domain A at means {0, 1}, domain B at {10, 11}: within mean distance 1,
    # cross mean distance 10; euclidean metric on unit variances
    a = [feat([[0.0]]), feat([[1.0]])]
    b = [feat([[10.0]]), feat([[11.0]])]
    val = ddr({0: a, 1: b}, "euclidean", "t0")
    assert val == pytest.approx(10.0, abs=1e-9)


def test_ddr_identical_features_convention():
    a = [feat([[0.0]]), feat([[0.0]])]
    b = [feat([[0.0]]), feat([[0.0]])]
    assert ddr({0: a, 1: b}, "euclidean", "t0") == 1.0


def test_ddr_requires_two_domains():
    a = [feat([[0.0]]), feat([[1.0]])]
    with pytest.raises(ConfigError):
        ddr({0: a}, "euclidean", "t0")


def test_ddr_requires_within_pairs():
    a = [feat([[0.0]])]
    b = [feat([[5.0]])]
    with pytest.raises(ConfigError):
        ddr({0: a, 1: b}, "euclidean", "t0")


# ---------------- feature assembly ----------------

def test_build_features_per_sample():
    taps = {"t0": [ChannelStats(np.array([1.0]), np.array([2.0])),
                   ChannelStats(np.array([3.0]), np.array([4.0]))],
            "t1": [ChannelStats(np.array([5.0]), np.array([6.0])),
                   ChannelStats(np.array([7.0]), np.array([8.0]))]}
    feats = build_features(taps, ("t0", "t1"))
    assert len(feats) == 2
    assert feats[1].layer("t0").means[0] == 3.0
    assert feats[1].layer("t1").vars[0] == 8.0
    one = build_feature(taps, 0, ("t1",))
    assert one.layer_names == ("t1",)
    assert one.layer("t1").means[0] == 5.0
