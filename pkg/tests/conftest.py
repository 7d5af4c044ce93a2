import numpy as np
import pytest


def fd_gradient(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` with respect to the array ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + step
        up = float(f())
        arr[i] = orig - step
        down = float(f())
        arr[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def max_rel_err(a, b, floor=1e-3):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
