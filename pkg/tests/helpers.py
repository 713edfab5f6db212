"""Shared test oracles, independent of the library code paths they check."""

import numpy as np


def central_diff_grad(f, arrays, h=1e-5):
    """Finite-difference gradient of scalar f(list-of-arrays) w.r.t. each array."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def grad_close(analytic, numeric, rel_tol=1e-4, abs_tol=1e-6):
    """True when every component matches within rel_tol, or abs_tol near zero."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= abs_tol) | (diff <= rel_tol * scale)
    return bool(np.all(ok))


def numeric_jacobian(f, x, h=1e-6):
    """Dense Jacobian of vector-valued f at x by central differences."""
    x = np.asarray(x, dtype=float)
    y0 = np.asarray(f(x), dtype=float)
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))).reshape(-1) / (2.0 * h)
    return jac
