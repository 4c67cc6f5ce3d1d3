"""The fixed segmentation network: four conv+norm+relu blocks, a 1x1 head,
x4 bilinear upsampling, channel softmax.

Strides 1,2,1,2 shrink 64x64 inputs to 16x16 before the head; upsampling
restores full resolution, so inputs need h, w divisible by 4. Taps t0..t3
expose per-sample statistics of each normalization layer's pre-norm input.
Only bank affine parameters train during adaptation; backward_full exists
for supervised pretraining.
"""

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .bnorm import (BnBranchBank, BnContext, bn_backward, bn_forward,
                    init_branches, track_running)
from .errors import ConfigError, FormatError, ShapeError
from .tensor import (SINGLE, ChannelStats, channel_statistics, conv2d,
                     conv2d_backward, relu, relu_backward, softmax_channels,
                     upsample_bilinear, upsample_bilinear_backward)
from .tensor_io import read_tensor, write_tensor

TAPS = ("t0", "t1", "t2", "t3")
UPSAMPLE = 4
# (in, out, kernel, stride, padding) for the four blocks, then the head
BLOCKS = ((3, 16, 3, 1, 1), (16, 32, 3, 2, 1), (32, 32, 3, 1, 1), (32, 64, 3, 2, 1))
HEAD_KERNEL = 1

CHECKPOINT_MAGIC = b"CDCK"
CHECKPOINT_VERSION = 1


@dataclass
class SegNet:
    weights: list[np.ndarray]   # 5 conv weight tensors
    biases: list[np.ndarray]
    banks: list[BnBranchBank]   # 4, aligned with TAPS
    num_classes: int

    @property
    def num_branches(self) -> int:
        return self.banks[0].num_branches

    @property
    def alpha(self) -> float:
        return self.banks[0].alpha

    def copy(self) -> "SegNet":
        return SegNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      [bk.copy() for bk in self.banks], self.num_classes)

    def astype(self, dtype) -> "SegNet":
        return SegNet([w.astype(dtype) for w in self.weights],
                      [b.astype(dtype) for b in self.biases],
                      [bk.astype(dtype) for bk in self.banks], self.num_classes)


def build_segnet(num_classes: int = 5, k: int = 1, alpha: float = 0.9,
                 seed: int = 0, dtype=SINGLE) -> SegNet:
    """He-initialized network with K equal branches per normalization layer."""
    if num_classes < 2:
        raise ShapeError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    weights, biases, banks = [], [], []
    for cin, cout, kk, _, _ in BLOCKS:
        std = np.sqrt(2.0 / (cin * kk * kk))
        weights.append((rng.standard_normal((cout, cin, kk, kk)) * std).astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
        banks.append(init_branches(np.ones(cout, dtype=dtype), np.zeros(cout, dtype=dtype),
                                   np.zeros(cout, dtype=dtype), np.ones(cout, dtype=dtype),
                                   k, alpha))
    cin = BLOCKS[-1][1]
    std = np.sqrt(2.0 / cin)
    weights.append((rng.standard_normal((num_classes, cin, 1, 1)) * std).astype(dtype))
    biases.append(np.zeros(num_classes, dtype=dtype))
    return SegNet(weights, biases, banks, num_classes)


@dataclass
class ForwardPass:
    """Everything the backward passes and the adaptation loop need."""

    branch: int
    x: np.ndarray
    pre_norm: list[np.ndarray]      # conv outputs feeding each norm layer
    post_norm: list[np.ndarray]     # norm outputs feeding each relu
    activations: list[np.ndarray]   # relu outputs
    ctxs: list[BnContext]
    logits_small: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    taps: dict[str, list[ChannelStats]]
    batch_stats: dict[str, ChannelStats]
    mixed_stats: dict[str, tuple[np.ndarray, np.ndarray]]


def forward_with_taps(net: SegNet, x: np.ndarray, branch: int,
                      frozen_stats: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
                      train_bank_momentum: float | None = None) -> ForwardPass:
    """Full forward on one branch.

    frozen_stats maps tap names to explicit (mean, var) normalization
    statistics, bypassing source/batch mixing for those layers.
    train_bank_momentum, when set, folds each batch's raw statistics into
    the banks' running statistics (pretraining only).
    """
    if x.ndim != 4 or x.shape[1] != BLOCKS[0][0]:
        raise ShapeError(f"input must be (n, {BLOCKS[0][0]}, h, w), got {x.shape}")
    if x.shape[2] % UPSAMPLE or x.shape[3] % UPSAMPLE:
        raise ShapeError(f"spatial dims must be divisible by {UPSAMPLE}, got {x.shape[2:]}")
    pre_norm, post_norm, activations, ctxs = [], [], [], []
    taps: dict[str, list[ChannelStats]] = {}
    batch_stats: dict[str, ChannelStats] = {}
    mixed_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    cur = x
    for i, (name, (_, _, _, stride, pad)) in enumerate(zip(TAPS, BLOCKS)):
        z = conv2d(cur, net.weights[i], net.biases[i], stride=stride, padding=pad)
        taps[name] = channel_statistics(z, "per_sample")
        override = frozen_stats.get(name) if frozen_stats else None
        y, batch, ctx = bn_forward(z, net.banks[i], branch, stats_override=override)
        if train_bank_momentum is not None:
            track_running(net.banks[i], batch, train_bank_momentum)
        a = relu(y)
        pre_norm.append(z)
        post_norm.append(y)
        activations.append(a)
        ctxs.append(ctx)
        batch_stats[name] = batch
        mixed_stats[name] = (ctx.mean, ctx.var)
        cur = a
    logits_small = conv2d(cur, net.weights[4], net.biases[4], stride=1, padding=0)
    logits = upsample_bilinear(logits_small, UPSAMPLE)
    probs = softmax_channels(logits)
    return ForwardPass(branch, x, pre_norm, post_norm, activations, ctxs,
                       logits_small, logits, probs, taps, batch_stats, mixed_stats)


def backward_affine_only(net: SegNet, dlogits: np.ndarray, fwd: ForwardPass):
    """Gradients of a scalar objective w.r.t. each bank's (gamma, beta).

    dlogits is the objective's gradient w.r.t. the pre-softmax logits at
    full resolution (the unsupervised losses fold the softmax Jacobian in).
    Returns a list of (dgamma, dbeta), one per normalization layer.
    """
    n, c, h, w = fwd.logits_small.shape
    g = upsample_bilinear_backward(dlogits, h, w, UPSAMPLE)
    g, _, _ = conv2d_backward(g, fwd.activations[3], net.weights[4], stride=1, padding=0)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * 4  # type: ignore[list-item]
    for i in range(3, -1, -1):
        g = relu_backward(g, fwd.post_norm[i])
        g, dgamma, dbeta = bn_backward(g, fwd.ctxs[i])
        grads[i] = (dgamma, dbeta)
        if i > 0:
            stride, pad = BLOCKS[i][3], BLOCKS[i][4]
            g, _, _ = conv2d_backward(g, fwd.activations[i - 1], net.weights[i],
                                      stride=stride, padding=pad)
    return grads


def backward_full(net: SegNet, dlogits: np.ndarray, fwd: ForwardPass):
    """Gradients for conv weights/biases and bank affines (pretraining)."""
    n, c, h, w = fwd.logits_small.shape
    g = upsample_bilinear_backward(dlogits, h, w, UPSAMPLE)
    conv_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * 5  # type: ignore[list-item]
    affine_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * 4  # type: ignore[list-item]
    g, dw, db = conv2d_backward(g, fwd.activations[3], net.weights[4], stride=1, padding=0)
    conv_grads[4] = (dw, db)
    for i in range(3, -1, -1):
        g = relu_backward(g, fwd.post_norm[i])
        g, dgamma, dbeta = bn_backward(g, fwd.ctxs[i])
        affine_grads[i] = (dgamma, dbeta)
        src = fwd.activations[i - 1] if i > 0 else fwd.x
        stride, pad = BLOCKS[i][3], BLOCKS[i][4]
        g, dw, db = conv2d_backward(g, src, net.weights[i], stride=stride, padding=pad)
        conv_grads[i] = (dw, db)
    return conv_grads, affine_grads


def forward_domain_stats(net: SegNet, x: np.ndarray, branch: int,
                         layer_set: tuple[str, ...]) -> dict[str, list[ChannelStats]]:
    """Prefix forward that only extracts per-sample tap statistics.

    Runs just deep enough to cover layer_set; normalization along the way
    uses the given branch (the caller passes the last-selected one).
    """
    bad = [t for t in layer_set if t not in TAPS]
    if bad:
        raise ShapeError(f"unknown taps {bad}; valid taps are {TAPS}")
    deepest = max(TAPS.index(t) for t in layer_set)
    taps: dict[str, list[ChannelStats]] = {}
    cur = x
    for i in range(deepest + 1):
        _, _, _, stride, pad = BLOCKS[i]
        z = conv2d(cur, net.weights[i], net.biases[i], stride=stride, padding=pad)
        name = TAPS[i]
        if name in layer_set:
            taps[name] = channel_statistics(z, "per_sample")
        if i < deepest:
            y, _, _ = bn_forward(z, net.banks[i], branch)
            cur = relu(y)
    return {name: taps[name] for name in layer_set}


def source_stats_override(net: SegNet) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-tap (mean, var) overrides that pin normalization to source stats."""
    return {name: (net.banks[i].source_mean, net.banks[i].source_var)
            for i, name in enumerate(TAPS)}


def predict(net: SegNet, x: np.ndarray, branch: int,
            frozen_stats: dict[str, tuple[np.ndarray, np.ndarray]] | None = None) -> np.ndarray:
    """Per-pixel argmax labels; probability ties resolve to the lowest class."""
    fwd = forward_with_taps(net, x, branch, frozen_stats=frozen_stats)
    return np.argmax(fwd.probs, axis=1)


# ---------------- checkpoint container ----------------

def _arch_descriptor(net: SegNet) -> dict:
    return {
        "blocks": [list(b) for b in BLOCKS],
        "head_kernel": HEAD_KERNEL,
        "upsample": UPSAMPLE,
        "num_classes": net.num_classes,
        "taps": list(TAPS),
    }


def _block_items(net: SegNet):
    for i in range(5):
        yield f"conv{i}.weight", net.weights[i]
        yield f"conv{i}.bias", net.biases[i]
    for i in range(4):
        bank = net.banks[i]
        yield f"norm{i}.source_mean", bank.source_mean
        yield f"norm{i}.source_var", bank.source_var
        yield f"norm{i}.gammas", bank.gammas
        yield f"norm{i}.betas", bank.betas


def checkpoint_bytes(net: SegNet) -> bytes:
    names, blobs = [], io.BytesIO()
    for name, arr in _block_items(net):
        names.append(name)
        write_tensor(blobs, arr)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "segnet-checkpoint",
        "arch": _arch_descriptor(net),
        "alpha": float(net.banks[0].alpha),
        "eps": float(net.banks[0].eps),
        "branches": net.num_branches,
        "blocks": names,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(mbytes)))
    out.write(mbytes)
    out.write(blobs.getvalue())
    return out.getvalue()


def save_checkpoint(net: SegNet, path) -> None:
    with open(path, "wb") as fp:
        fp.write(checkpoint_bytes(net))


def load_checkpoint(path) -> SegNet:
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        head = fp.read(12)
        if len(head) != 12:
            raise FormatError("truncated checkpoint header")
        version, mlen = struct.unpack("<IQ", head)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        raw = fp.read(mlen)
        if len(raw) != mlen:
            raise FormatError("truncated checkpoint manifest")
        try:
            manifest = json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc
        arch = manifest.get("arch", {})
        if [tuple(b) for b in arch.get("blocks", [])] != list(BLOCKS):
            raise FormatError("checkpoint architecture does not match this network")
        blocks = {}
        for name in manifest["blocks"]:
            blocks[name] = read_tensor(fp)
    k = int(manifest["branches"])
    alpha = float(manifest["alpha"])
    eps = float(manifest["eps"])
    num_classes = int(arch["num_classes"])
    try:
        weights = [blocks[f"conv{i}.weight"] for i in range(5)]
        biases = [blocks[f"conv{i}.bias"] for i in range(5)]
        banks = []
        for i in range(4):
            gammas = blocks[f"norm{i}.gammas"]
            if gammas.shape[0] != k:
                raise FormatError(f"norm{i} has {gammas.shape[0]} branches, manifest says {k}")
            banks.append(BnBranchBank(blocks[f"norm{i}.source_mean"],
                                      blocks[f"norm{i}.source_var"],
                                      gammas, blocks[f"norm{i}.betas"], alpha, eps))
    except KeyError as exc:
        raise FormatError(f"checkpoint missing block {exc}") from exc
    if weights[4].shape[0] != num_classes:
        raise FormatError("head block does not match declared class count")
    return SegNet(weights, biases, banks, num_classes)


def reconfigure_branches(net: SegNet, k: int, alpha: float) -> SegNet:
    """New network whose banks hold K copies of each layer's branch-0 affine."""
    banks = [init_branches(b.gammas[0], b.betas[0], b.source_mean, b.source_var,
                           k, alpha, b.eps) for b in net.banks]
    return SegNet([w.copy() for w in net.weights], [b.copy() for b in net.biases],
                  banks, net.num_classes)


def set_alpha(net: SegNet, alpha: float) -> SegNet:
    """Copy of the network with a different mixing weight, branches intact."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    out = net.copy()
    for bank in out.banks:
        bank.alpha = float(alpha)
    return out
