"""Pretraining, the streaming adaptation loop, and evaluation.

One adaptation step: a statistics-only prefix forward produces per-sample
domain features; each sample gets a branch (online clustering, or true
domain in oracle mode, or branch 0 in compound mode); samples regroup by
branch; each group runs a full forward on its branch, the per-sample
unsupervised loss is similarity-weighted, and plain SGD updates only that
branch's gamma/beta. Predictions always come from the pre-update forward.

Streams expose images only; ground-truth labels and domains stay on the
metadata side channel and are touched solely by oracle-mode branch
selection, evaluation, and report bookkeeping.
"""

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .clustering import (ClusterBank, DomainFeature, build_feature,
                         build_features, permutation_agreement)
from .data import LabeledSample, Stream
from .errors import ConfigError, NumericError
from .losses import (cross_entropy_loss, denoise_weight, entropy_loss, loss_fn,
                     weighted_objective)
from .metrics import ConfusionMatrix
from .network import (TAPS, SegNet, backward_affine_only, backward_full,
                      build_segnet, forward_domain_stats, forward_with_taps,
                      reconfigure_branches, source_stats_override)
from .tensor import ChannelStats

BRANCH_MODES = ("pseudo", "oracle", "compound")


@dataclass
class AdaptConfig:
    alpha: float = 0.9
    eta: float = 0.9
    delta: float = 1.5
    k: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 4
    loss_kind: str = "entropy"
    branch_mode: str = "pseudo"
    metric: str = "bhattacharyya"
    clustering_layers: tuple[str, ...] = ("t0", "t1")
    denoise_layers: tuple[str, ...] = ("t0", "t1", "t2", "t3")
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch mode must be one of {BRANCH_MODES}, "
                              f"got {self.branch_mode!r}")
        for name, layers in (("clustering", self.clustering_layers),
                             ("denoise", self.denoise_layers)):
            if not layers or any(t not in TAPS for t in layers):
                raise ConfigError(f"{name} layers must be a non-empty subset of {TAPS}, "
                                  f"got {layers}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "eta": self.eta, "delta": self.delta, "k": self.k,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "loss_kind": self.loss_kind, "branch_mode": self.branch_mode,
            "metric": self.metric, "clustering_layers": list(self.clustering_layers),
            "denoise_layers": list(self.denoise_layers), "seed": self.seed,
        }


def source_feature(net: SegNet, layer_set: tuple[str, ...]) -> DomainFeature:
    """Frozen source running statistics packaged like a sample feature."""
    by_tap = {name: net.banks[i] for i, name in enumerate(TAPS)}
    return DomainFeature(tuple(
        (name, ChannelStats(by_tap[name].source_mean.copy().astype(np.float64),
                            by_tap[name].source_var.copy().astype(np.float64)))
        for name in layer_set))


# ---------------- pretraining ----------------

def pretrain(train_samples: list[LabeledSample], num_classes: int,
             epochs: int = 32, learning_rate: float = 0.2, batch_size: int = 4,
             seed: int = 0, bn_momentum: float = 0.1,
             val_samples: list[LabeledSample] | None = None):
    """Full-parameter supervised training of a fresh network.

    Normalization runs on pure batch statistics while running statistics
    track them with the given momentum; those become the frozen source
    statistics at adaptation time. Returns (net, history) where history
    has per-epoch mean losses and, when val_samples is given, a final
    source-statistics validation mIoU.
    """
    if not train_samples:
        raise ConfigError("no training samples")
    net = build_segnet(num_classes, k=1, alpha=0.0, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n = len(train_samples)
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = np.stack([train_samples[i].image for i in idx])
            y = np.stack([train_samples[i].label for i in idx])
            fwd = forward_with_taps(net, x, 0, train_bank_momentum=bn_momentum)
            losses, grads = cross_entropy_loss(fwd.probs, y)
            upstream = grads * grads.dtype.type(1.0 / len(idx))
            conv_grads, affine_grads = backward_full(net, upstream, fwd)
            lr = np.float32(learning_rate)
            for i in range(5):
                net.weights[i] -= lr * conv_grads[i][0]
                net.biases[i] -= lr * conv_grads[i][1]
            for i in range(4):
                net.banks[i].gammas[0] -= lr * affine_grads[i][0]
                net.banks[i].betas[0] -= lr * affine_grads[i][1]
            total += float(losses.mean())
            batches += 1
        epoch_losses.append(total / batches)
        if not np.isfinite(epoch_losses[-1]):
            raise NumericError(f"non-finite training loss {epoch_losses[-1]}")
    history = {"epoch_losses": epoch_losses}
    if val_samples:
        history["val_miou"] = evaluate_source(net, val_samples, num_classes,
                                              batch_size=batch_size)
    return net, history


def evaluate_source(net: SegNet, samples: list[LabeledSample], num_classes: int,
                    batch_size: int = 8) -> float:
    """mIoU with normalization pinned to the source running statistics."""
    override = source_stats_override(net)
    cm = ConfusionMatrix(num_classes)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = np.stack([s.image for s in chunk])
        fwd = forward_with_taps(net, x, 0, frozen_stats=override)
        pred = np.argmax(fwd.probs, axis=1)
        for s, p in zip(chunk, pred):
            cm.update(p, s.label)
    return cm.miou()


# ---------------- adaptation ----------------

@dataclass
class StepRecord:
    step: int
    sample_ids: list[int]
    true_domains: list[int]
    pseudo_domains: list[int]
    losses: list[float]
    weights: list[float]        # raw similarity w
    scales: list[float]         # clamp(w)^delta as applied
    entropies: list[float]


@dataclass
class EvalResult:
    domain_names: tuple[str, ...]
    matrix: np.ndarray            # (k branches, n domains) mIoU
    selected_per_domain: np.ndarray   # (n domains,) mIoU under the branch mode
    selected_mean: float


@dataclass
class AdaptReport:
    config: dict
    data_seed: int
    version: str
    num_samples: int
    num_steps: int
    records: list[StepRecord]
    assignments: np.ndarray
    true_domains: np.ndarray
    cluster_counts: np.ndarray
    purity: float | None
    entropy_first_fifth: float
    entropy_last_fifth: float
    eval_result: EvalResult | None
    wall_time_s: float
    features: list[DomainFeature] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)


@dataclass
class _LoopState:
    net: SegNet
    bank: ClusterBank
    cfg: AdaptConfig
    source_denoise: DomainFeature
    last_branch: int = 0


def tta_step(state: _LoopState, images: np.ndarray,
             oracle_domains: np.ndarray | None = None):
    """One batch: select branches, group, weight losses, update affines.

    Returns (pseudo_domains, losses, weights, scales, entropies,
    predictions, features); predictions come from the pre-update forward.
    """
    cfg = state.cfg
    net = state.net
    n = images.shape[0]
    feats = build_features(
        forward_domain_stats(net, images, state.last_branch, cfg.clustering_layers),
        cfg.clustering_layers)
    if cfg.branch_mode == "pseudo":
        assigned = [state.bank.assign_and_update(f) for f in feats]
    elif cfg.branch_mode == "oracle":
        if oracle_domains is None:
            raise ConfigError("oracle mode needs true domains")
        if oracle_domains.min() < 0 or oracle_domains.max() >= cfg.k:
            raise ConfigError(f"oracle domain outside [0, {cfg.k})")
        assigned = [int(d) for d in oracle_domains]
    else:
        assigned = [0] * n
    losses_out = np.zeros(n, dtype=np.float64)
    weights_out = np.zeros(n, dtype=np.float64)
    scales_out = np.zeros(n, dtype=np.float64)
    entropies_out = np.zeros(n, dtype=np.float64)
    predictions = [None] * n
    for branch in sorted(set(assigned)):
        group = [i for i in range(n) if assigned[i] == branch]
        x = images[group]
        fwd = forward_with_taps(net, x, branch)
        losses, grads = loss_fn(cfg.loss_kind)(fwd.probs)
        ws = np.asarray([
            denoise_weight(build_feature(fwd.taps, gi, cfg.denoise_layers),
                           state.source_denoise)
            for gi in range(len(group))])
        _, scales = weighted_objective(losses, ws, cfg.delta)
        factor = (scales / len(group)).astype(grads.dtype)
        upstream = grads * factor[:, None, None, None]
        affine_grads = backward_affine_only(net, upstream, fwd)
        ent = entropy_loss(fwd.probs)[0] if cfg.loss_kind != "entropy" else losses
        pred = np.argmax(fwd.probs, axis=1)
        lr = net.banks[0].gammas.dtype.type(cfg.learning_rate)
        for li in range(4):
            dgamma, dbeta = affine_grads[li]
            net.banks[li].gammas[branch] -= lr * dgamma
            net.banks[li].betas[branch] -= lr * dbeta
        for gi, i in enumerate(group):
            losses_out[i] = float(losses[gi])
            weights_out[i] = float(ws[gi])
            scales_out[i] = float(scales[gi])
            entropies_out[i] = float(ent[gi])
            predictions[i] = pred[gi]
    state.last_branch = assigned[-1]
    if not (np.isfinite(losses_out).all() and np.isfinite(entropies_out).all()):
        raise NumericError("non-finite loss or entropy in adaptation step")
    return assigned, losses_out, weights_out, scales_out, entropies_out, predictions, feats


def run_stream(pretrained: SegNet, stream: Stream, cfg: AdaptConfig,
               eval_samples: list[LabeledSample] | None = None,
               collect_predictions: bool = False):
    """Adapt over a stream; returns (adapted net, cluster bank, AdaptReport)."""
    cfg.validate()
    t0 = time.perf_counter()
    net = reconfigure_branches(pretrained, cfg.k, cfg.alpha)
    bank = ClusterBank(cfg.k, cfg.eta, cfg.metric, tuple(cfg.clustering_layers))
    state = _LoopState(net, bank, cfg, source_feature(net, tuple(cfg.denoise_layers)))
    domains_meta = stream.meta.domains
    if cfg.branch_mode == "oracle" and domains_meta.max(initial=0) >= cfg.k:
        raise ConfigError(f"oracle mode needs k >= {int(domains_meta.max()) + 1}")
    records: list[StepRecord] = []
    all_assigned: list[int] = []
    all_entropies: list[float] = []
    all_features: list[DomainFeature] = []
    predictions: list[np.ndarray] = []
    n = len(stream)
    step = 0
    for start in range(0, n, cfg.batch_size):
        ids = list(range(start, min(start + cfg.batch_size, n)))
        images = np.stack([stream.images[i] for i in ids])
        oracle = domains_meta[ids] if cfg.branch_mode == "oracle" else None
        assigned, losses, ws, scales, ents, preds, feats = tta_step(
            state, images, oracle_domains=oracle)
        records.append(StepRecord(
            step, ids, [int(domains_meta[i]) for i in ids], list(assigned),
            [float(v) for v in losses], [float(v) for v in ws],
            [float(v) for v in scales], [float(v) for v in ents]))
        all_assigned.extend(assigned)
        all_entropies.extend(float(v) for v in ents)
        all_features.extend(feats)
        if collect_predictions:
            predictions.extend(preds)
        step += 1
    assignments = np.asarray(all_assigned, dtype=np.int64)
    entropies = np.asarray(all_entropies)
    fifth = max(1, n // 5)
    first_fifth = float(entropies[:fifth].mean()) if n else 0.0
    last_fifth = float(entropies[n - fifth:].mean()) if n else 0.0
    purity = None
    if cfg.branch_mode == "pseudo" and n:
        purity = permutation_agreement(assignments, domains_meta,
                                       num_labels=max(cfg.k, int(domains_meta.max()) + 1))
    eval_result = None
    if eval_samples is not None:
        eval_result = evaluate(net, eval_samples, cfg, bank=bank)
    report = AdaptReport(
        config=cfg.to_dict(), data_seed=cfg.seed, version=__version__,
        num_samples=n, num_steps=step, records=records, assignments=assignments,
        true_domains=domains_meta.copy(), cluster_counts=bank.counts.copy(),
        purity=purity, entropy_first_fifth=first_fifth,
        entropy_last_fifth=last_fifth,
        eval_result=eval_result, wall_time_s=time.perf_counter() - t0,
        features=all_features, predictions=predictions)
    return net, bank, report


def evaluate(net: SegNet, eval_samples: list[LabeledSample], cfg: AdaptConfig,
             bank: ClusterBank | None = None) -> EvalResult:
    """Per-domain mIoU under every branch plus the branch-mode selection.

    The matrix row b gives mIoU per eval domain with branch b forced
    everywhere. The selected row picks branches the way the configured
    mode would (frozen clustering for pseudo; true domain for oracle;
    branch 0 for compound). Centroids never move here.
    """
    domains = sorted({s.true_domain for s in eval_samples})
    if any(d < 0 for d in domains):
        raise ConfigError("eval samples must carry non-negative domain ids")
    num_classes = net.num_classes
    k = net.num_branches
    by_domain = {d: [s for s in eval_samples if s.true_domain == d] for d in domains}
    matrix = np.zeros((k, len(domains)))
    for b in range(k):
        for di, d in enumerate(domains):
            cm = ConfusionMatrix(num_classes)
            samples = by_domain[d]
            for startI in range(0, len(samples), cfg.batch_size):
                chunk = samples[startI:startI + cfg.batch_size]
                x = np.stack([s.image for s in chunk])
                fwd = forward_with_taps(net, x, b)
                pred = np.argmax(fwd.probs, axis=1)
                for s, p in zip(chunk, pred):
                    cm.update(p, s.label)
            matrix[b, di] = cm.miou()
    selected = np.zeros(len(domains))
    for di, d in enumerate(domains):
        samples = by_domain[d]
        if cfg.branch_mode == "oracle":
            if d >= k:
                raise ConfigError(f"oracle mode needs k >= {d + 1}")
            branch_per_sample = [d] * len(samples)
        elif cfg.branch_mode == "pseudo":
            if bank is None:
                raise ConfigError("pseudo-mode evaluation needs the cluster bank")
            branch_per_sample = []
            for startI in range(0, len(samples), cfg.batch_size):
                chunk = samples[startI:startI + cfg.batch_size]
                x = np.stack([s.image for s in chunk])
                feats = build_features(
                    forward_domain_stats(net, x, 0, tuple(cfg.clustering_layers)),
                    tuple(cfg.clustering_layers))
                branch_per_sample.extend(bank.assign_frozen(f) for f in feats)
        else:
            branch_per_sample = [0] * len(samples)
        cm = ConfusionMatrix(num_classes)
        for b in sorted(set(branch_per_sample)):
            members = [s for s, bb in zip(samples, branch_per_sample) if bb == b]
            for startI in range(0, len(members), cfg.batch_size):
                chunk = members[startI:startI + cfg.batch_size]
                x = np.stack([s.image for s in chunk])
                fwd = forward_with_taps(net, x, b)
                pred = np.argmax(fwd.probs, axis=1)
                for s, p in zip(chunk, pred):
                    cm.update(p, s.label)
        selected[di] = cm.miou()
    names = tuple(str(d) for d in domains)
    return EvalResult(names, matrix, selected, float(selected.mean()))


# ---------------- report serialization ----------------

def report_json_dict(report: AdaptReport) -> dict:
    """Canonical report content; volatile fields (wall time) stay out."""
    out = {
        "version": report.version,
        "config": report.config,
        "num_samples": report.num_samples,
        "num_steps": report.num_steps,
        "cluster_counts": [int(c) for c in report.cluster_counts],
        "purity": report.purity,
        "entropy_first_fifth": report.entropy_first_fifth,
        "entropy_last_fifth": report.entropy_last_fifth,
    }
    if report.eval_result is not None:
        ev = report.eval_result
        out["eval"] = {
            "domains": list(ev.domain_names),
            "matrix": [[float(v) for v in row] for row in ev.matrix],
            "selected_per_domain": [float(v) for v in ev.selected_per_domain],
            "selected_mean": ev.selected_mean,
        }
    return out


def report_json_bytes(report: AdaptReport) -> bytes:
    return json.dumps(report_json_dict(report), sort_keys=True, indent=1).encode()


def records_csv_bytes(report: AdaptReport) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "sample_id", "true_domain", "pseudo_domain",
                     "loss", "weight", "scale", "entropy"])
    for rec in report.records:
        for j, sid in enumerate(rec.sample_ids):
            writer.writerow([rec.step, sid, rec.true_domains[j], rec.pseudo_domains[j],
                             repr(rec.losses[j]), repr(rec.weights[j]),
                             repr(rec.scales[j]), repr(rec.entropies[j])])
    return buf.getvalue().encode()
