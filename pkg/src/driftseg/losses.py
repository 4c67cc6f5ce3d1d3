"""Unsupervised per-sample objectives and similarity-based denoising.

Each loss maps channel-softmax probabilities (n, c, h, w) to a per-sample
loss vector and the gradient of that vector's entries w.r.t. the logits
(the softmax Jacobian is folded in analytically, which keeps the math
stable for saturated predictions). Losses are means over pixels, so
gradients carry the 1/(h*w) factor.
"""

import logging
import math

import numpy as np

from .clustering import DomainFeature
from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

LOSS_KINDS = ("entropy", "max_squares", "pseudo_label")
TOP_FRACTION = 0.33


def _check_probs(probs: np.ndarray) -> None:
    if probs.ndim != 4:
        raise ShapeError(f"probs must be (n, c, h, w), got {probs.shape}")
    drift = np.abs(probs.sum(axis=1) - 1.0).max()
    if drift > 1e-3:
        raise DataError(f"channel probabilities sum off by {drift:.2e}")


def entropy_loss(probs: np.ndarray):
    """Mean per-pixel prediction entropy, nats. One-hot pixels contribute 0."""
    _check_probs(probs)
    n, c, h, w = probs.shape
    tiny = np.finfo(probs.dtype).tiny
    logp = np.log(np.maximum(probs, tiny))
    ent = -(probs * logp).sum(axis=1)                   # (n, h, w)
    losses = ent.mean(axis=(1, 2))
    grad = -probs * (logp + ent[:, None, :, :])
    grad /= probs.dtype.type(h * w)
    return losses, grad


def max_squares_loss(probs: np.ndarray):
    """Mean per-pixel -0.5 * sum(p^2); minimizing sharpens predictions."""
    _check_probs(probs)
    n, c, h, w = probs.shape
    sq = np.square(probs).sum(axis=1)                   # (n, h, w)
    losses = (-0.5 * sq).mean(axis=(1, 2))
    grad = probs * (sq[:, None, :, :] - probs)
    grad /= probs.dtype.type(h * w)
    return losses, grad


def pseudo_label_loss(probs: np.ndarray, top_fraction: float = TOP_FRACTION):
    """Cross-entropy against argmax labels on the most confident pixels.

    Per predicted class, the top ceil(top_fraction * class pixel count)
    pixels by confidence are kept; everything else gets zero loss and zero
    gradient. Confidence ties keep the lower pixel index (stable sort).
    """
    _check_probs(probs)
    if not 0.0 < top_fraction <= 1.0:
        raise ConfigError(f"top fraction must be in (0, 1], got {top_fraction}")
    n, c, h, w = probs.shape
    p = probs.reshape(n, c, h * w)
    hard = p.argmax(axis=1)                             # (n, P), ties -> lowest class
    conf = np.take_along_axis(p, hard[:, None, :], axis=1)[:, 0, :]
    tiny = np.finfo(probs.dtype).tiny
    losses = np.zeros(n, dtype=probs.dtype)
    grad = np.zeros_like(p)
    classes = np.arange(c)
    for i in range(n):
        keep = np.zeros(h * w, dtype=bool)
        for cls in range(c):
            idx = np.nonzero(hard[i] == cls)[0]
            if idx.size == 0:
                continue
            kcount = math.ceil(top_fraction * idx.size)
            order = np.argsort(-conf[i, idx], kind="stable")
            keep[idx[order[:kcount]]] = True
        kept = int(keep.sum())
        if kept == 0:
            log.warning("sample %d kept no pixels; zero loss and gradient", i)
            continue
        losses[i] = -np.log(np.maximum(conf[i, keep], tiny)).mean()
        onehot = (classes[:, None] == hard[i][None, :])
        gi = (p[i] - onehot) / probs.dtype.type(kept)
        grad[i] = np.where(keep[None, :], gi, 0)
    return losses, grad.reshape(n, c, h, w)


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray):
    """Supervised pixel cross-entropy for pretraining."""
    _check_probs(probs)
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels must be {(n, h, w)}, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels outside [0, {c})")
    labels = labels.astype(np.int64)
    tiny = np.finfo(probs.dtype).tiny
    picked = np.take_along_axis(probs, labels[:, None, :, :], axis=1)[:, 0]
    losses = -np.log(np.maximum(picked, tiny)).mean(axis=(1, 2))
    onehot = (np.arange(c)[None, :, None, None] == labels[:, None, :, :])
    grad = (probs - onehot) / probs.dtype.type(h * w)
    return losses, grad


def loss_fn(kind: str):
    if kind == "entropy":
        return entropy_loss
    if kind == "max_squares":
        return max_squares_loss
    if kind == "pseudo_label":
        return pseudo_label_loss
    raise ConfigError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")


def denoise_weight(sample: DomainFeature, source: DomainFeature) -> float:
    """Mean over layers of cosine similarity between [means || stds] vectors.

    Compares one sample's tap statistics against the frozen source running
    statistics layer by layer. A zero-norm vector contributes similarity 0.
    """
    if sample.layer_names != source.layer_names:
        raise ShapeError(f"layer sets differ: {sample.layer_names} vs {source.layer_names}")
    sims = []
    for (_, ss), (_, rs) in zip(sample.layers, source.layers):
        a = np.concatenate([ss.means, np.sqrt(ss.vars)]).astype(np.float64)
        b = np.concatenate([rs.means, np.sqrt(rs.vars)]).astype(np.float64)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        sims.append(0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb)))
    return float(np.mean(sims))


def weighted_objective(losses: np.ndarray, weights: np.ndarray, delta: float):
    """Batch objective mean_n(clamp(w_n, 0, 1)^delta * loss_n).

    Returns (batch_loss, scales); callers scale each sample's loss gradient
    by scales[n] / n_samples. delta = 0 gives uniform scales of 1.
    """
    if delta < 0:
        raise ConfigError(f"delta must be >= 0, got {delta}")
    losses = np.asarray(losses)
    weights = np.asarray(weights)
    if losses.shape != weights.shape or losses.ndim != 1 or losses.size == 0:
        raise ShapeError("losses and weights must be equal-length non-empty vectors")
    scales = np.power(np.clip(weights.astype(np.float64), 0.0, 1.0), float(delta))
    batch_loss = float(np.mean(scales * losses.astype(np.float64)))
    return batch_loss, scales
