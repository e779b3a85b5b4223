"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest

from metainterp.model import Arch, init_params


def fd_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function at every element of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Per-tensor relative error: inf-norm of the difference over the scale."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def fd_param_gradients(loss_fn, params, h: float = 1e-6) -> dict[str, np.ndarray]:
    """Finite-difference gradient of loss_fn(params) for every named tensor.

    loss_fn takes a ModelParams value and returns a float; the oracle never
    touches the autodiff tape.
    """
    grads = {}
    for name in params.tensors:
        base = params.tensors[name]
        work = base.copy()
        g = np.zeros_like(work)
        flat = work.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn(params.replaced({**params.tensors, name: work}))
            flat[i] = keep - h
            down = loss_fn(params.replaced({**params.tensors, name: work}))
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


MICRO_ARCH = Arch(channels=1, widths=(4, 8), taps=3)


@pytest.fixture(scope="session")
def micro_params():
    return init_params(MICRO_ARCH, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
