"""Domain features and their clustering.

A domain feature stacks per-channel (mean, variance) statistics from a
configured set of network taps. Distances between two features average a
per-channel scalar distance over every channel of every layer. The online
bank seeds its K centroids from the first K features, then assigns by
nearest centroid and moves only the winner by EMA; the offline Lloyd
variant exists as a reference oracle.
"""

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError
from .tensor import ChannelStats

VAR_FLOOR = 1e-8
METRICS = ("euclidean", "stats_divergence", "wasserstein2", "bhattacharyya")


@dataclass(frozen=True)
class DomainFeature:
    """(layer name, ChannelStats) pairs in a fixed layer order."""

    layers: tuple[tuple[str, ChannelStats], ...]

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.layers)

    def layer(self, name: str) -> ChannelStats:
        for n, stats in self.layers:
            if n == name:
                return stats
        raise ShapeError(f"feature has no layer {name!r}")

    def restricted(self, names: tuple[str, ...]) -> "DomainFeature":
        return DomainFeature(tuple((n, self.layer(n)) for n in names))


def build_feature(taps: dict[str, list[ChannelStats]], sample: int,
                  layer_set: tuple[str, ...]) -> DomainFeature:
    """Assemble one sample's feature from a taps map."""
    return DomainFeature(tuple((name, taps[name][sample]) for name in layer_set))


def build_features(taps: dict[str, list[ChannelStats]],
                   layer_set: tuple[str, ...]) -> list[DomainFeature]:
    n = len(taps[layer_set[0]])
    return [build_feature(taps, i, layer_set) for i in range(n)]


# ---------------- distances ----------------

def bhattacharyya(p: tuple[float, float], q: tuple[float, float]) -> float:
    """Overlap distance between 1-d Gaussians given as (mean, variance)."""
    mp, vp = float(p[0]), float(p[1])
    mq, vq = float(q[0]), float(q[1])
    if vp < 0 or vq < 0:
        raise UndefinedMetricError("variances must be non-negative")
    vp, vq = max(vp, VAR_FLOOR), max(vq, VAR_FLOOR)
    term = 0.25 * np.log(0.25 * (vp / vq + vq / vp + 2.0))
    return float(term + 0.25 * (mp - mq) ** 2 / (vp + vq))


def wasserstein2(p: tuple[float, float], q: tuple[float, float]) -> float:
    """Closed-form 2-Wasserstein between 1-d Gaussians given as (mean, std)."""
    return float(np.hypot(p[0] - q[0], p[1] - q[1]))


def _channel_distances(metric: str, mu_a, va, mu_b, vb) -> np.ndarray:
    """Vectorized per-channel scalar distance; va/vb are variances."""
    if metric == "bhattacharyya":
        va = np.maximum(va, VAR_FLOOR)
        vb = np.maximum(vb, VAR_FLOOR)
        term = 0.25 * np.log(0.25 * (va / vb + vb / va + 2.0))
        return term + 0.25 * np.square(mu_a - mu_b) / (va + vb)
    if metric == "euclidean":
        # raw (mean, variance) pair as a plane point
        return np.sqrt(np.square(mu_a - mu_b) + np.square(va - vb))
    if metric == "wasserstein2":
        return np.sqrt(np.square(mu_a - mu_b) + np.square(np.sqrt(va) - np.sqrt(vb)))
    if metric == "stats_divergence":
        return np.abs(mu_a - mu_b) + np.abs(np.sqrt(va) - np.sqrt(vb))
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def feature_distance(a: DomainFeature, b: DomainFeature, metric: str) -> float:
    """Mean per-channel distance over all channels of all layers."""
    if a.layer_names != b.layer_names:
        raise ShapeError(f"layer sets differ: {a.layer_names} vs {b.layer_names}")
    total, count = 0.0, 0
    for (_, sa), (_, sb) in zip(a.layers, b.layers):
        if sa.num_channels != sb.num_channels:
            raise ShapeError("channel counts differ within a layer")
        d = _channel_distances(metric, sa.means.astype(np.float64), sa.vars.astype(np.float64),
                               sb.means.astype(np.float64), sb.vars.astype(np.float64))
        total += float(d.sum())
        count += d.size
    return total / count


# ---------------- online bank ----------------

@dataclass
class ClusterBank:
    k: int
    eta: float
    metric: str
    layer_set: tuple[str, ...]
    centroids: list[DomainFeature | None] = field(default_factory=list)
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    initialized: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"cluster count must be >= 1, got {self.k}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        if not self.layer_set:
            raise ConfigError("layer set must not be empty")
        if not self.centroids:
            self.centroids = [None] * self.k
        if self.counts.size == 0:
            self.counts = np.zeros(self.k, dtype=np.int64)

    def _check_feature(self, feature: DomainFeature) -> None:
        if feature.layer_names != tuple(self.layer_set):
            raise ShapeError(f"feature layers {feature.layer_names} do not match "
                             f"bank layer set {tuple(self.layer_set)}")

    def _distances(self, feature: DomainFeature) -> np.ndarray:
        d = np.full(self.k, np.inf)
        for i, c in enumerate(self.centroids):
            if c is not None:
                d[i] = feature_distance(feature, c, self.metric)
        return d

    def assign_frozen(self, feature: DomainFeature) -> int:
        """Nearest seeded centroid, no state change; ties take the lowest index."""
        self._check_feature(feature)
        if self.initialized == 0:
            raise ConfigError("cannot assign with no seeded centroids")
        return int(np.argmin(self._distances(feature)))

    def assign_and_update(self, feature: DomainFeature) -> int:
        """Assign to the nearest centroid and EMA-move the winner toward the feature.

        The first K features seed the K centroids in order and receive
        their own index; competition starts once all are seeded.
        """
        self._check_feature(feature)
        if self.initialized < self.k:
            idx = self.initialized
            self.centroids[idx] = DomainFeature(tuple(
                (name, ChannelStats(stats.means.astype(np.float64),
                                    stats.vars.astype(np.float64)))
                for name, stats in feature.layers))
            self.initialized += 1
            self.counts[idx] += 1
            return idx
        idx = int(np.argmin(self._distances(feature)))
        eta = self.eta
        cur = self.centroids[idx]
        assert cur is not None
        moved = tuple(
            (name, ChannelStats(eta * cs.means + (1.0 - eta) * fs.means.astype(np.float64),
                                eta * cs.vars + (1.0 - eta) * fs.vars.astype(np.float64)))
            for (name, cs), (_, fs) in zip(cur.layers, feature.layers))
        self.centroids[idx] = DomainFeature(moved)
        self.counts[idx] += 1
        return idx


# ---------------- offline reference ----------------

def offline_kmeans(features: list[DomainFeature], k: int, metric: str,
                   seed: int = 0, max_iter: int = 100):
    """Lloyd iterations with seeded ++-style init under the given metric.

    Returns (labels, centroids). Deterministic for a fixed seed; empty
    clusters keep their previous centroid; assignment ties take the lowest
    centroid index.
    """
    if k < 1:
        raise ConfigError(f"cluster count must be >= 1, got {k}")
    if len(features) < k:
        raise ConfigError(f"need at least {k} features, got {len(features)}")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    rng = np.random.default_rng(seed)
    n = len(features)
    centroids = [features[int(rng.integers(n))]]
    d2 = np.array([feature_distance(f, centroids[0], metric) for f in features]) ** 2
    while len(centroids) < k:
        total = d2.sum()
        if total <= 0:
            probs = np.full(n, 1.0 / n)
        else:
            probs = d2 / total
        centroids.append(features[int(rng.choice(n, p=probs))])
        dn = np.array([feature_distance(f, centroids[-1], metric) for f in features]) ** 2
        d2 = np.minimum(d2, dn)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.empty((n, k))
        for j, c in enumerate(centroids):
            dist[:, j] = [feature_distance(f, c, metric) for f in features]
        new_labels = dist.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = [features[i] for i in range(n) if labels[i] == j]
            if not members:
                continue
            layer_names = members[0].layer_names
            stacked = []
            for li, name in enumerate(layer_names):
                means = np.mean([m.layers[li][1].means for m in members], axis=0)
                vars_ = np.mean([m.layers[li][1].vars for m in members], axis=0)
                stacked.append((name, ChannelStats(means, vars_)))
            centroids[j] = DomainFeature(tuple(stacked))
    return labels, centroids


def permutation_agreement(pred, truth, num_labels: int | None = None) -> float:
    """Best label-permutation agreement rate between two labelings."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ConfigError("labelings must be equal-length and non-empty")
    k = int(max(pred.max(), truth.max())) + 1 if num_labels is None else num_labels
    if k > 8:
        raise ConfigError("permutation matching supports at most 8 labels")
    best = 0
    for perm in itertools.permutations(range(k)):
        mapped = np.array(perm)[pred]
        best = max(best, int((mapped == truth).sum()))
    return best / pred.size


# ---------------- distinction rate ----------------

def ddr(features_by_domain: dict, metric: str, layer: str) -> float:
    """Cross-domain over within-domain mean pairwise distance at one layer.

    Self-pairs are excluded from the within mean; identical features
    everywhere return 1.0 by convention; the within mean is floored at
    1e-12 before dividing.
    """
    domains = sorted(features_by_domain)
    if len(domains) < 2:
        raise ConfigError("distinction rate needs at least two domains")
    per_dom = {d: [f.restricted((layer,)) for f in features_by_domain[d]] for d in domains}
    within_sum, within_n = 0.0, 0
    for d in domains:
        feats = per_dom[d]
        for i in range(len(feats)):
            for j in range(i + 1, len(feats)):
                within_sum += feature_distance(feats[i], feats[j], metric)
                within_n += 1
    cross_sum, cross_n = 0.0, 0
    for a in range(len(domains)):
        for b in range(a + 1, len(domains)):
            for fa in per_dom[domains[a]]:
                for fb in per_dom[domains[b]]:
                    cross_sum += feature_distance(fa, fb, metric)
                    cross_n += 1
    if within_n == 0:
        raise ConfigError("no within-domain pairs; every domain needs >= 2 samples")
    cross = cross_sum / cross_n
    within = within_sum / within_n
    if cross <= 1e-12 and within <= 1e-12:
        return 1.0
    return cross / max(within, 1e-12)


# ---------------- feature dump ----------------

def write_feature_csv(path, entries) -> None:
    """entries: iterable of (sample_id, true_domain, pseudo_domain, DomainFeature)."""
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["sample_id", "true_domain", "pseudo_domain", "layer",
                         "channel", "mean", "var"])
        for sample_id, true_domain, pseudo_domain, feature in entries:
            for name, stats in feature.layers:
                for ch in range(stats.num_channels):
                    writer.writerow([sample_id, true_domain, pseudo_domain, name, ch,
                                     repr(float(stats.means[ch])), repr(float(stats.vars[ch]))])
