"""Shared finite-difference gradient checking utilities."""

import numpy as np
import pytest

from sdetr import tensor as T


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def numeric_grad(fn, leaf: T.Tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central finite difference of scalar fn() w.r.t. one coordinate of leaf."""
    flat = leaf.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    up = fn()
    flat[flat_index] = orig - h
    down = fn()
    flat[flat_index] = orig
    return (up - down) / (2.0 * h)


def check_gradients(build_loss, leaves, rng, n_coords: int = 5, tol: float = 1e-5,
                    h: float = 1e-5):
    """Compare analytic grads of build_loss() against central differences.

    ``build_loss`` runs a fresh forward pass and returns a scalar Tensor;
    ``leaves`` are the float64 tensors to differentiate. A random subset of
    coordinates per leaf is probed.
    """
    with T.tape() as tp:
        loss = build_loss()
        tp.backward(loss)
    grads = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
             for leaf in leaves]
    for leaf in leaves:
        leaf.zero_grad()

    def forward_value() -> float:
        with T.no_grad():
            return build_loss().item()

    worst = 0.0
    for leaf, g in zip(leaves, grads):
        n = min(n_coords, leaf.size)
        coords = rng.choice(leaf.size, size=n, replace=False)
        for c in coords:
            num = numeric_grad(forward_value, leaf, int(c), h=h)
            ana = float(g.reshape(-1)[int(c)])
            err = rel_err(ana, num)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at coord {c} of leaf shape {leaf.shape}: "
                f"analytic {ana:.10g} vs numeric {num:.10g} (rel err {err:.3g})")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
