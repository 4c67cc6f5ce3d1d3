import numpy as np
import pytest


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Dense central-difference gradient of a scalar function of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    num = np.abs(got - want)
    den = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-8)
    return float((num / den).max())


def gradient_relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """Max-norm relative error of a gradient vector.

    Per-entry ratios blow up on near-zero entries where finite
    differences only deliver absolute accuracy, so gradients are
    compared at vector scale.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    den = max(np.abs(got).max(), np.abs(want).max(), 1e-12)
    return float(np.abs(got - want).max() / den)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
