"""Dense (n, c, h, w) kernels with explicit backward passes.

All arrays are numpy, row-major, float32 by default; gradient tests run the
same code in float64. Forward functions are pure; each backward recomputes
what it needs from the saved forward operands, so there is no hidden state.
Variances are population (ddof=0) everywhere.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError

SINGLE = np.float32
DOUBLE = np.float64


@dataclass
class ChannelStats:
    """Per-channel first and second central moments of one activation map."""

    means: np.ndarray  # (c,)
    vars: np.ndarray   # (c,), biased, clipped at 0

    @property
    def num_channels(self) -> int:
        return int(self.means.shape[0])

    def copy(self) -> "ChannelStats":
        return ChannelStats(self.means.copy(), self.vars.copy())


def _require_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (n, c, h, w), got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"kernel {kh}x{kw} stride {stride} padding {padding} does not fit input {h}x{w}"
        )
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    # (n, c*kh*kw, oh*ow); the reshape copies out of the strided view
    return patches.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with bias. weights (oc, ic, kh, kw), bias (oc,)."""
    _require_4d(x, "input")
    _require_4d(weights, "weights")
    oc, ic, kh, kw = weights.shape
    if x.shape[1] != ic:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {ic}")
    if bias.shape != (oc,):
        raise ShapeError(f"bias must be ({oc},), got {bias.shape}")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    wmat = weights.reshape(oc, ic * kh * kw)
    y = np.matmul(wmat[None, :, :], cols)  # (n, oc, oh*ow)
    y += bias[None, :, None]
    return y.reshape(x.shape[0], oc, oh, ow)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Gradients (dx, dweights, dbias) for conv2d at (x, weights)."""
    _require_4d(dy, "upstream")
    oc, ic, kh, kw = weights.shape
    n, c, h, w = x.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    if dy.shape != (n, oc, oh, ow):
        raise ShapeError(f"upstream shape {dy.shape} does not match output {(n, oc, oh, ow)}")
    dy2 = dy.reshape(n, oc, oh * ow)
    dw = np.einsum("nol,nkl->ok", dy2, cols, optimize=True).reshape(weights.shape)
    db = dy2.sum(axis=(0, 2))
    wmat = weights.reshape(oc, ic * kh * kw)
    dcols = np.matmul(wmat.T[None, :, :], dy2)  # (n, ic*kh*kw, oh*ow)
    dcols = dcols.reshape(n, ic, kh, kw, oh, ow)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, ic, hp, wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if padding:
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
    else:
        dx = dxp
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return dy * (x > 0)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Channel-axis softmax of a (n, c, h, w) map, c >= 2."""
    _require_4d(logits, "logits")
    if logits.shape[1] < 2:
        raise ShapeError("softmax needs at least 2 channels")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@lru_cache(maxsize=32)
def _bilinear_matrix(length: int, factor: int, dtype_name: str) -> np.ndarray:
    """Dense (length*factor, length) interpolation matrix, half-pixel centers."""
    out = np.arange(length * factor, dtype=np.float64)
    src = (out + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, length - 1)
    i1c = np.clip(i0 + 1, 0, length - 1)
    m = np.zeros((length * factor, length), dtype=np.float64)
    rows = np.arange(length * factor)
    np.add.at(m, (rows, i0c), 1.0 - frac)
    np.add.at(m, (rows, i1c), frac)
    return m.astype(np.dtype(dtype_name))


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample by an integer factor, half-pixel alignment."""
    _require_4d(x, "input")
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    n, c, h, w = x.shape
    mh = _bilinear_matrix(h, factor, x.dtype.name)
    mw = _bilinear_matrix(w, factor, x.dtype.name)
    y = np.einsum("oi,nciw->ncow", mh, x, optimize=True)
    return np.einsum("oj,nchj->ncho", mw, y, optimize=True)


def upsample_bilinear_backward(dy: np.ndarray, in_h: int, in_w: int, factor: int) -> np.ndarray:
    """Transpose of upsample_bilinear for an (in_h, in_w) input."""
    _require_4d(dy, "upstream")
    if factor == 1:
        return dy.copy()
    n, c, oh, ow = dy.shape
    if oh != in_h * factor or ow != in_w * factor:
        raise ShapeError(f"upstream {oh}x{ow} does not match {in_h}x{in_w} upsampled by {factor}")
    mh = _bilinear_matrix(in_h, factor, dy.dtype.name)
    mw = _bilinear_matrix(in_w, factor, dy.dtype.name)
    dx = np.einsum("oj,ncho->nchj", mw, dy, optimize=True)
    return np.einsum("oi,ncow->nciw", mh, dx, optimize=True)


def channel_statistics(x: np.ndarray, scope: str = "per_sample") -> list[ChannelStats]:
    """Biased per-channel mean/variance over space (per_sample) or space+batch (per_batch)."""
    _require_4d(x, "input")
    if scope == "per_sample":
        means = x.mean(axis=(2, 3))                       # (n, c)
        sq = np.square(x).mean(axis=(2, 3))
        vars_ = np.maximum(sq - np.square(means), 0)
        return [ChannelStats(means[i].copy(), vars_[i].copy()) for i in range(x.shape[0])]
    if scope == "per_batch":
        means = x.mean(axis=(0, 2, 3))                    # (c,)
        sq = np.square(x).mean(axis=(0, 2, 3))
        vars_ = np.maximum(sq - np.square(means), 0)
        return [ChannelStats(means, vars_)]
    raise ShapeError(f"unknown scope {scope!r}")
