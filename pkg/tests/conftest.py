import numpy as np
import pytest

from odn.tensor import Tensor


def rel_err(a, b, clamp=1e-4):
    """Elementwise relative error with the denominator clamped from below."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), clamp)
    return np.abs(a - b) / denom


def finite_difference_grad(scalar_fn, arrays, index, eps=1e-2):
    """Central-difference gradient of scalar_fn w.r.t. arrays[index].

    scalar_fn receives the list of (mutated) float64 arrays and must return a
    python float.  Completely independent of the reverse-mode machinery.
    """
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        f_plus = scalar_fn(arrays)
        target[idx] = orig - eps
        f_minus = scalar_fn(arrays)
        target[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def t64(arr, requires_grad=False):
    """Float64 tensor (for running the same graph at oracle precision)."""
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad,
                  dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
