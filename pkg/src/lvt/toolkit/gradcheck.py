"""Central finite differences and gradient comparison."""

from __future__ import annotations

import math

import numpy as np

from lvt.tensor import NonFiniteError

REL_FLOOR = 1e-12


def finite_diff_grad(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` is called with a float64 copy of ``x`` perturbed one coordinate
    at a time: ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xx = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(xx)
    flat = xx.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(xx))
        flat[i] = orig - eps
        fm = float(f(xx))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """max |a - n| / (|a| + |n| + 1e-12), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + REL_FLOOR)))


def check_gradients(loss, x, params, dx, grads, eps: float = 1e-5) -> dict:
    """Compare analytic gradients to finite differences for x and every parameter.

    ``loss()`` evaluates the scalar objective from the current contents of
    ``x`` and the arrays in ``params``; arrays are perturbed in place and
    restored. Returns ``{name: relative error}`` with ``"x"`` for the input.
    """
    targets = {"x": (x, dx)}
    g = grads.named_arrays()
    for name, arr in params.named_arrays().items():
        targets[name] = (arr, g[name])
    out = {}
    for name, (arr, analytic) in targets.items():
        saved = arr.copy()

        def f(v, arr=arr):
            arr[...] = v
            return loss()

        numeric = finite_diff_grad(f, saved, eps)
        arr[...] = saved
        out[name] = relative_error(analytic, numeric)
    return out
