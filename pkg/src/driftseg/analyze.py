"""Post-hoc analyses over labeled eval data.

Two questions get answered here: which taps and distance functions
separate the domains best (the DDR grid), and which per-sample signals
predict per-sample segmentation quality (Pearson correlations of the
denoise weight, mean max-probability, and mean entropy against pixel
accuracy). Both read labels, so they live on the evaluation side of the
fence, never inside the adaptation loop.
"""

import numpy as np

from .adapt import source_feature
from .clustering import METRICS, build_feature, build_features, ddr
from .data import LabeledSample
from .errors import ConfigError
from .losses import denoise_weight, entropy_loss
from .metrics import pearson, pixel_accuracy
from .network import TAPS, SegNet, forward_domain_stats, forward_with_taps

SIGNALS = ("denoise_weight", "mean_max_prob", "mean_entropy")


def domain_features(net: SegNet, samples: list[LabeledSample],
                    layer_set: tuple[str, ...] = TAPS, branch: int = 0,
                    batch_size: int = 8) -> dict[int, list]:
    """Per-domain feature lists, batched within each domain.

    Batching by domain keeps batch statistics homogeneous, so the deeper
    taps reflect the domain itself rather than batch composition.
    """
    domains = sorted({s.true_domain for s in samples})
    if any(d < 0 for d in domains):
        raise ConfigError("samples must carry non-negative domain ids")
    out: dict[int, list] = {}
    for d in domains:
        members = [s for s in samples if s.true_domain == d]
        feats = []
        for start in range(0, len(members), batch_size):
            x = np.stack([s.image for s in members[start:start + batch_size]])
            feats.extend(build_features(
                forward_domain_stats(net, x, branch, layer_set), layer_set))
        out[d] = feats
    return out


def ddr_grid(net: SegNet, samples: list[LabeledSample],
             metrics: tuple[str, ...] = METRICS,
             layers: tuple[str, ...] = TAPS, branch: int = 0,
             batch_size: int = 8) -> list[dict]:
    """Rows of (layer, metric, ddr) over every requested combination."""
    groups = domain_features(net, samples, tuple(layers), branch, batch_size)
    rows = []
    for metric in metrics:
        for layer in layers:
            rows.append({"layer": layer, "metric": metric,
                         "ddr": ddr(groups, metric, layer)})
    return rows


def sample_signals(net: SegNet, samples: list[LabeledSample],
                   denoise_layers: tuple[str, ...] = TAPS,
                   branch: int = 0) -> dict[str, np.ndarray]:
    """Per-sample diagnostic signals from single-sample forwards.

    Each sample is normalized against its own statistics (batch of one)
    so the signals are order-independent and per-sample by construction.
    """
    if not samples:
        raise ConfigError("no samples to analyze")
    src = source_feature(net, tuple(denoise_layers))
    weights, confidences, entropies, accuracies = [], [], [], []
    for s in samples:
        fwd = forward_with_taps(net, s.image[None], branch)
        feat = build_feature(fwd.taps, 0, tuple(denoise_layers))
        weights.append(denoise_weight(feat, src))
        confidences.append(float(fwd.probs.max(axis=1).mean()))
        entropies.append(float(entropy_loss(fwd.probs)[0][0]))
        pred = np.argmax(fwd.probs, axis=1)[0]
        accuracies.append(pixel_accuracy(pred, s.label))
    return {
        "denoise_weight": np.asarray(weights),
        "mean_max_prob": np.asarray(confidences),
        "mean_entropy": np.asarray(entropies),
        "accuracy": np.asarray(accuracies),
    }


def signal_correlations(signals: dict[str, np.ndarray]) -> list[dict]:
    """Rows of (signal, pearson) against per-sample pixel accuracy."""
    acc = signals["accuracy"]
    return [{"signal": name, "pearson": pearson(signals[name], acc)}
            for name in SIGNALS]
