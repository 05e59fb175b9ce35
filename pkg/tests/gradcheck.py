"""Central finite-difference gradient oracle shared by the unit and
acceptance suites. Stays independent of the engine's backward pass: it only
re-runs forward evaluations at perturbed parameter values."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4


def central_differences(loss_fn, params, h: float = FD_STEP) -> list[np.ndarray]:
    """Numeric dLoss/dParam for every coordinate of every parameter.
    loss_fn() must rebuild the forward pass from the params' current data."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def assert_grads_match(loss_fn, params, backward_fn, tol: float = REL_TOL) -> float:
    """Runs the engine backward, then the FD oracle, and asserts agreement."""
    loss = loss_fn()
    backward_fn(loss)
    analytic = [p.grad.copy() for p in params]
    numeric = central_differences(loss_fn, params)
    err = max_rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: max rel err {err:.3e} >= {tol}"
    return err
