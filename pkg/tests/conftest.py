"""Shared test utilities.

``fd_gradients`` is the independent central-difference oracle used by the
gradient tests; it never touches the analytic backward path it checks.
"""

import numpy as np
import pytest

from ctxmask.autodiff import ParameterStore


def fd_gradients(build_loss, store: ParameterStore, eps: float = 1e-5) -> dict:
    """Numeric d(loss)/d(param) for every parameter element, by central
    differences on the forward pass only."""
    grads = {}
    for name in store.names():
        w = store[name]
        flat = w.reshape(-1)
        g = np.empty(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build_loss(store).value)
            flat[i] = orig - eps
            f_minus = float(build_loss(store).value)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g.reshape(w.shape)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
