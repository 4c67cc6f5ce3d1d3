"""Normalization with mixed source/target statistics and per-branch affine params.

One bank per normalization layer. The bank keeps frozen source running
statistics plus K (gamma, beta) branch rows; normalization statistics are
a convex mix  mu = alpha*mu_src + (1-alpha)*mu_batch  (same on variances).
Statistics are stop-gradients: the backward treats them as constants, so
only gamma/beta (and the input) receive gradients.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BranchError, ShapeError, StaleContextError
from .tensor import ChannelStats, channel_statistics

EPS = 1e-5


@dataclass
class BnBranchBank:
    source_mean: np.ndarray   # (c,)
    source_var: np.ndarray    # (c,)
    gammas: np.ndarray        # (k, c)
    betas: np.ndarray         # (k, c)
    alpha: float
    eps: float = EPS

    @property
    def num_channels(self) -> int:
        return int(self.source_mean.shape[0])

    @property
    def num_branches(self) -> int:
        return int(self.gammas.shape[0])

    def check_branch(self, branch: int) -> None:
        if not 0 <= branch < self.num_branches:
            raise BranchError(f"branch {branch} outside 0..{self.num_branches - 1}")

    def copy(self) -> "BnBranchBank":
        return BnBranchBank(self.source_mean.copy(), self.source_var.copy(),
                            self.gammas.copy(), self.betas.copy(), self.alpha, self.eps)

    def astype(self, dtype) -> "BnBranchBank":
        return BnBranchBank(self.source_mean.astype(dtype), self.source_var.astype(dtype),
                            self.gammas.astype(dtype), self.betas.astype(dtype),
                            self.alpha, self.eps)


def init_branches(gamma: np.ndarray, beta: np.ndarray,
                  running_mean: np.ndarray, running_var: np.ndarray,
                  k: int, alpha: float, eps: float = EPS) -> BnBranchBank:
    """Build a K-branch bank with every branch an elementwise copy of (gamma, beta)."""
    if k < 1:
        raise BranchError(f"branch count must be >= 1, got {k}")
    if not 0.0 <= alpha <= 1.0:
        raise ShapeError(f"alpha must be in [0, 1], got {alpha}")
    c = gamma.shape[0]
    for name, arr in (("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} must be ({c},), got {arr.shape}")
    if np.any(running_var < 0):
        raise ShapeError("running_var must be non-negative")
    gammas = np.tile(gamma[None, :], (k, 1)).copy()
    betas = np.tile(beta[None, :], (k, 1)).copy()
    return BnBranchBank(running_mean.copy(), running_var.copy(), gammas, betas, alpha, eps)


@dataclass
class BnContext:
    branch: int
    x_shape: tuple
    xhat: np.ndarray
    inv_std: np.ndarray  # (c,)
    gamma: np.ndarray    # (c,)
    mean: np.ndarray     # (c,), the statistics actually used
    var: np.ndarray      # (c,)


def bn_forward(x: np.ndarray, bank: BnBranchBank, branch: int,
               stats_override: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalize with mixed statistics, then apply the branch affine map.

    Returns (y, target_stats, ctx): target_stats are the raw per-batch
    statistics of x (the feature side-product), ctx feeds bn_backward.
    stats_override bypasses mixing with explicit (mean, var); used to hold
    statistics fixed across finite-difference probes and for pure-source
    evaluation.
    """
    bank.check_branch(branch)
    if x.ndim != 4 or x.shape[1] != bank.num_channels:
        raise ShapeError(f"input {x.shape} does not match {bank.num_channels} channels")
    batch = channel_statistics(x, "per_batch")[0]
    if stats_override is not None:
        mean, var = stats_override
    else:
        a = x.dtype.type(bank.alpha)
        one = x.dtype.type(1.0)
        mean = a * bank.source_mean + (one - a) * batch.means
        var = a * bank.source_var + (one - a) * batch.vars
    mean = np.asarray(mean, dtype=x.dtype)
    var = np.asarray(var, dtype=x.dtype)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(bank.eps))
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma = bank.gammas[branch]
    y = gamma[None, :, None, None] * xhat + bank.betas[branch][None, :, None, None]
    ctx = BnContext(branch, x.shape, xhat, inv_std.astype(x.dtype), gamma.copy(),
                    mean.copy(), var.copy())
    return y, batch, ctx


def bn_backward(dy: np.ndarray, ctx: BnContext):
    """Gradients (dx, dgamma, dbeta) with the statistics held constant."""
    if dy.shape != ctx.x_shape:
        raise StaleContextError(f"upstream {dy.shape} does not match forward {ctx.x_shape}")
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * ctx.xhat).sum(axis=(0, 2, 3))
    dx = dy * (ctx.gamma * ctx.inv_std)[None, :, None, None]
    return dx, dgamma, dbeta


def track_running(bank: BnBranchBank, batch: ChannelStats, momentum: float = 0.1) -> None:
    """Pretraining-only EMA of source running statistics."""
    m = bank.source_mean.dtype.type(momentum)
    one = bank.source_mean.dtype.type(1.0)
    bank.source_mean *= (one - m)
    bank.source_mean += m * batch.means.astype(bank.source_mean.dtype)
    bank.source_var *= (one - m)
    bank.source_var += m * batch.vars.astype(bank.source_var.dtype)
