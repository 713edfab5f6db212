"""Feasibility-restoring projections onto the catalog constraint sets.

project(a, s, cs) returns the nearest feasible action: closed forms for
balls, annuli, halfspaces, and the box; separable-dual bisection projectors
for the weighted max/abs-sum and ellipsoid families, combined with the action
box through Dykstra's alternating scheme (which, unlike plain alternation,
converges to the true nearest point of an intersection); and a penalty
gradient-descent fallback for unrecognized families.  Projected points are
nudged a hair inside each surface so the violation signal evaluates to an
exact zero afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import constraints as cn

FEAS_TOL = 1e-6
DYKSTRA_TOL = 1e-8
DYKSTRA_MAX_SWEEPS = 500
SLACK = 1e-9  # inward nudge applied by every surface projector


@dataclass
class ProjectionResult:
    action: np.ndarray
    iterations: int
    residual_cv: float
    method: str  # closed-form | dykstra | penalty-gd


def feasible(a, s, cs: cn.ConstraintSet, eps: float = cn.EPS_DEFAULT):
    """True iff cv(a, s) = 0 under the equality margin."""
    return cn.feasible(a, s, cs, eps)


# -- surface projectors ----------------------------------------------------------


def _project_ball(a, r2):
    n2 = float(a @ a)
    if n2 <= r2:
        return a
    return a * (np.sqrt(r2 / n2) * (1.0 - 1e-12))


def _project_annulus(a, lo2, hi2):
    n2 = float(a @ a)
    if lo2 <= n2 <= hi2:
        return a
    if n2 > hi2:
        return a * (np.sqrt(hi2 / n2) * (1.0 - 1e-12))
    if n2 == 0.0:
        # center of the hole: every shell point is equidistant; break the tie
        # deterministically along +e1
        out = np.zeros_like(a)
        out[0] = np.sqrt(lo2) * (1.0 + 1e-12)
        return out
    return a * (np.sqrt(lo2 / n2) * (1.0 + 1e-12))


def _project_box(a):
    return np.clip(a, -1.0, 1.0)


def _project_halfspace(a, w, b):
    # {x : w . x <= b}
    excess = float(w @ a) - b
    if excess <= 0.0:
        return a
    return a - ((excess + SLACK) / float(w @ w)) * w


def _bisect_multiplier(g, mu_hi0=1.0, iters=200):
    """Smallest mu >= 0 with g(mu) <= 0 for non-increasing g; g(0) > 0 assumed."""
    hi = mu_hi0
    while g(hi) > 0.0:
        hi *= 2.0
        if hi > 1e18:
            raise FloatingPointError("projection bisection failed to bracket")
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return hi


def _project_maxzero_sum(a, w, bound):
    # {x : sum_i max(w_i x_i, 0) <= bound}

    def shrink(mu):
        x = a.copy()
        pos = w > 0
        neg = w < 0
        x[pos] = np.where(a[pos] - mu * w[pos] > 0.0, a[pos] - mu * w[pos],
                          np.minimum(a[pos], 0.0))
        x[neg] = np.where(a[neg] - mu * w[neg] < 0.0, a[neg] - mu * w[neg],
                          np.maximum(a[neg], 0.0))
        return x

    target = bound - SLACK

    def excess(mu):
        return float(np.sum(np.maximum(w * shrink(mu), 0.0))) - target

    if excess(0.0) <= 0.0:
        return a
    return shrink(_bisect_multiplier(excess))


def _project_weighted_l1(a, w, bound):
    # {x : sum_i |w_i x_i| <= bound}
    absw = np.abs(w)

    def shrink(mu):
        return np.sign(a) * np.maximum(np.abs(a) - mu * absw, 0.0)

    target = bound - SLACK

    def excess(mu):
        return float(np.sum(absw * np.abs(shrink(mu)))) - target

    if excess(0.0) <= 0.0:
        return a
    return shrink(_bisect_multiplier(excess))


def _project_ellipsoid(a, coeffs, bound):
    # {x : sum_i coeffs_i x_i^2 <= bound}, coeffs >= 0

    def shrink(mu):
        return a / (1.0 + 2.0 * mu * coeffs)

    target = bound - SLACK

    def excess(mu):
        x = shrink(mu)
        return float(np.sum(coeffs * x * x)) - target

    if excess(0.0) <= 0.0:
        return a
    return shrink(_bisect_multiplier(excess))


# -- composition -------------------------------------------------------------------


def _dykstra(a, projectors, tol=DYKSTRA_TOL, max_sweeps=DYKSTRA_MAX_SWEEPS):
    x = a.copy()
    corrections = [np.zeros_like(a) for _ in projectors]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        x_prev = x.copy()
        for i, proj in enumerate(projectors):
            y = proj(x + corrections[i])
            corrections[i] = x + corrections[i] - y
            x = y
        if np.max(np.abs(x - x_prev)) < tol:
            break
    return x, sweeps


def _family_projectors(cs: cn.ConstraintSet, s):
    """Component surface projectors for the convex catalog families."""
    p = cs.params
    if cs.family == "M":
        w = np.asarray(s, dtype=np.float64)
        return [lambda x: _project_maxzero_sum(x, w, p["bound"]), _project_box]
    if cs.family == "O+S":
        d = p["d"]
        sv = np.asarray(s, dtype=np.float64)
        w, theta = sv[:d], sv[d:]
        sin2 = np.sin(theta) ** 2
        return [lambda x: _project_weighted_l1(x, w, p["l1_bound"]),
                lambda x: _project_ellipsoid(x, sin2, p["ell_bound"]),
                _project_box]
    if cs.family == "HC+O":
        w = np.asarray(s, dtype=np.float64)
        return [lambda x: _project_weighted_l1(x, w, p["bound"]), _project_box]
    if cs.family == "linear-statewise":
        k, d = p["k"], p["d"]
        sv = np.asarray(s, dtype=np.float64)
        projs = []
        for i in range(k):
            c_i = float(sv[i])
            w_i = sv[k + i * d: k + (i + 1) * d].copy()
            if float(w_i @ w_i) < 1e-16:
                continue  # numerically zero row constrains nothing movable
            projs.append(lambda x, w=w_i, b=-c_i: _project_halfspace(x, w, b))
        projs.append(_project_box)
        return projs
    return None


def project(a, s, cs: cn.ConstraintSet, eps: float = cn.EPS_DEFAULT,
            tol: float = FEAS_TOL) -> ProjectionResult:
    """Nearest feasible action to a under C(s); a must lie in the box."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (cs.action_dim,):
        raise ad.ShapeError(f"action shape {a.shape} != ({cs.action_dim},)")

    start_cv = cn.cv(a, s, cs, eps)
    if cs.family == "R+L2":
        method = "closed-form"
    elif cs.family in ("R+D", "box"):
        method = "closed-form"
    elif cs.family in ("M", "O+S", "HC+O", "linear-statewise"):
        method = "dykstra"
    else:
        method = "penalty-gd"

    if start_cv == 0.0:
        return ProjectionResult(action=a.copy(), iterations=0, residual_cv=0.0,
                                method=method)

    if cs.family == "R+L2":
        out = _project_ball(a, cs.params["r2"])
        return ProjectionResult(out, 1, cn.cv(out, s, cs, eps), "closed-form")
    if cs.family == "R+D":
        out = _project_annulus(a, cs.params["lo2"], cs.params["hi2"])
        return ProjectionResult(out, 1, cn.cv(out, s, cs, eps), "closed-form")
    if cs.family == "box":
        out = _project_box(a)
        return ProjectionResult(out, 1, cn.cv(out, s, cs, eps), "closed-form")

    projectors = _family_projectors(cs, s)
    if projectors is not None:
        out, sweeps = _dykstra(a, projectors)
        return ProjectionResult(out, sweeps, cn.cv(out, s, cs, eps), "dykstra")

    return _penalty_gd(a, s, cs, eps, tol)


def _penalty_gd(a, s, cs, eps, tol, steps_per_stage=200,
                rhos=(10.0, 1e2, 1e3, 1e4, 1e5), lr=0.02):
    """Minimize |x - a|^2 + rho * cv(x, s) with a ramped exact penalty."""
    tape = ad.Tape()
    x = tape.value(a.reshape(1, -1).copy())
    anchor = tape.value(a.reshape(1, -1).copy())
    s_arr = None
    if cs.state_dim:
        s_arr = np.asarray(s, dtype=np.float64).reshape(1, -1)
    opt = ad.Adam([x], lr=lr)
    best = a.copy()
    best_cv = cn.cv(a, s, cs, eps)
    best_dist = 0.0
    iterations = 0
    for rho in rhos:
        for _ in range(steps_per_stage):
            iterations += 1
            sv = tape.value(s_arr) if s_arr is not None else None
            dist = ad.vsum(ad.square(ad.sub(x, anchor)))
            cv_scalar = ad.vsum(cn.cv(x, sv, cs, eps))
            obj = ad.add(dist, ad.scalar_mul(cv_scalar, rho))
            tape.backward(obj)
            opt.step()
            tape.clear()
            np.clip(x.data, -1.0, 1.0, out=x.data)
            cand_cv = cn.cv(x.data.reshape(-1), s, cs, eps)
            cand_dist = float(np.sum((x.data.reshape(-1) - a) ** 2))
            better_feasible = cand_cv <= tol and (best_cv > tol or cand_dist < best_dist)
            better_cv = best_cv > tol and cand_cv < best_cv
            if better_feasible or better_cv:
                best = x.data.copy()
                best_cv = cand_cv
                best_dist = cand_dist
    return ProjectionResult(best.reshape(-1), iterations, float(best_cv), "penalty-gd")
