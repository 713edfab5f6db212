"""Analytic action-constraint families and the constraint-violation signal.

A ConstraintSet bundles inequality constraints g_i(a, s) <= 0 and equality
constraints h_j(a, s) = 0 over actions a in the box [-1, 1]^d, optionally
conditioned on per-state features s.  The scalar violation signal

    cv(a, s) = sum_i max(g_i(a, s), 0) + sum_j max(|h_j(a, s)| - eps, 0)

is zero exactly on the feasible set (up to the eps margin on equalities) and
differentiable almost everywhere, so exp(-lam * cv) serves as an unnormalized
target density for flow training.  Constraint functions are written against
the autodiff kernel; the same definitions back gradient-based training,
projection search, and plain-array feasibility checks.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Value

EPS_DEFAULT = 1e-3
LAMBDA_DEFAULT = 1000.0

ACTION_LOW = -1.0
ACTION_HIGH = 1.0


@dataclass(frozen=True)
class TargetDensity:
    """Parameters of the unnormalized density exp(-lam * cv(a, s)).

    The normalizer over the action box cancels in the training loss, so only
    the rate lam and the equality margin eps are ever materialized.
    """

    lam: float = LAMBDA_DEFAULT
    eps: float = EPS_DEFAULT

    def __post_init__(self):
        # lam = 0 is allowed as a degenerate no-penalty configuration
        if self.lam < 0:
            raise ValueError(f"rate lam must be non-negative, got {self.lam}")
        if self.eps < 0:
            raise ValueError(f"margin eps must be non-negative, got {self.eps}")


class ConstraintSet:
    """Immutable bundle of constraint functions over a d-dimensional action box.

    Each inequality/equality is a callable (a, s) -> column Value of per-row
    values, with a a rank-2 Value batch (n, d) and s a rank-2 Value batch of
    conditioning features (n, state_dim), or None when state_dim == 0.
    """

    def __init__(self, inequalities, equalities, action_dim, state_dim,
                 convexity, id, family=None, params=None, feature_scale=None):
        if convexity not in ("convex", "nonconvex"):
            raise ValueError(f"convexity must be convex/nonconvex, got {convexity!r}")
        self.inequalities = tuple(inequalities)
        self.equalities = tuple(equalities)
        self.action_dim = int(action_dim)
        self.state_dim = int(state_dim)
        self.convexity = convexity
        self.id = id
        self.family = family if family is not None else id
        self.params = dict(params) if params else {}
        if feature_scale is None:
            feature_scale = np.ones(self.state_dim)
        self.feature_scale = np.asarray(feature_scale, dtype=np.float64)
        if self.feature_scale.shape != (self.state_dim,):
            raise ShapeError(
                f"feature_scale shape {self.feature_scale.shape} != ({self.state_dim},)")

    def __repr__(self):
        return (f"ConstraintSet(id={self.id!r}, d={self.action_dim}, "
                f"state_dim={self.state_dim}, {self.convexity})")


# -- violation signal --------------------------------------------------------


def _vabs(x: Value) -> Value:
    # |x| as relu(x) + relu(-x); subgradient 0 at the kink
    return ad.add(ad.relu(x), ad.relu(ad.negate(x)))


def _check_value_inputs(a: Value, s, cs: ConstraintSet):
    if a.data.ndim != 2 or a.data.shape[1] != cs.action_dim:
        raise ShapeError(
            f"action batch shape {a.data.shape} incompatible with action_dim {cs.action_dim}")
    if cs.state_dim == 0:
        return
    if s is None:
        raise ShapeError(f"constraint {cs.id!r} needs {cs.state_dim} state features, got None")
    if s.data.ndim != 2 or s.data.shape != (a.data.shape[0], cs.state_dim):
        raise ShapeError(
            f"state batch shape {s.data.shape} incompatible with "
            f"(batch={a.data.shape[0]}, state_dim={cs.state_dim})")


def _cv_value(a: Value, s, cs: ConstraintSet, eps: float) -> Value:
    _check_value_inputs(a, s, cs)
    total = None
    for g in cs.inequalities:
        term = ad.relu(g(a, s))
        total = term if total is None else ad.add(total, term)
    for h in cs.equalities:
        term = ad.relu(_add_scalar(_vabs(h(a, s)), -eps))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = a.tape.value(np.zeros((a.data.shape[0], 1)))
    return total


def _add_scalar(x: Value, c: float) -> Value:
    return x + float(c)


def _lift_action_array(a, d):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape != (d,):
            raise ShapeError(f"action shape {arr.shape} != ({d},)")
        return arr.reshape(1, d), True
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr, False
    raise ShapeError(f"action shape {arr.shape} incompatible with action_dim {d}")


def _lift_state_array(s, n, cs):
    if cs.state_dim == 0:
        return None
    if s is None:
        raise ShapeError(f"constraint {cs.id!r} needs {cs.state_dim} state features, got None")
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape != (cs.state_dim,):
            raise ShapeError(f"state shape {arr.shape} != ({cs.state_dim},)")
        arr = np.broadcast_to(arr, (n, cs.state_dim)).copy()
    if arr.shape != (n, cs.state_dim):
        raise ShapeError(
            f"state shape {arr.shape} incompatible with (batch={n}, state_dim={cs.state_dim})")
    return arr


def cv(a, s, cs: ConstraintSet, eps: float = EPS_DEFAULT):
    """Total constraint violation of action(s) a at state feature(s) s.

    Returns sum_i max(g_i, 0) + sum_j max(|h_j| - eps, 0): non-negative, zero
    exactly on the feasible set.  Accepts autodiff Values (returns a column
    Value, differentiable through a) or plain arrays (a single (d,) action
    returns a float; an (n, d) batch returns an (n,) array).
    """
    if isinstance(a, Value):
        return _cv_value(a, s, cs, eps)
    a2, single = _lift_action_array(a, cs.action_dim)
    s2 = _lift_state_array(s, a2.shape[0], cs)
    tape = ad.Tape()
    with tape.no_grad():
        av = tape.value(a2)
        sv = tape.value(s2) if s2 is not None else None
        out = _cv_value(av, sv, cs, eps).data.ravel()
    return float(out[0]) if single else out


def feasible(a, s, cs: ConstraintSet, eps: float = EPS_DEFAULT):
    """True where cv(a, s) == 0; scalar bool for a single action."""
    out = cv(a, s, cs, eps)
    if isinstance(out, float):
        return out == 0.0
    return out == 0.0


def log_unnormalized_target(a, s, cs: ConstraintSet, td: TargetDensity):
    """log p~(a|s) = -lam * cv(a, s); always <= 0, zero iff feasible."""
    out = cv(a, s, cs, td.eps)
    if isinstance(out, Value):
        return ad.scalar_mul(out, -td.lam)
    return -td.lam * out


# -- catalog ------------------------------------------------------------------

_ID_RE = re.compile(r"^(?P<name>[^()]+?)(?:\((?P<args>\d+(?:\s*,\s*\d+)*)\))?$")


def _parse_id(id: str):
    m = _ID_RE.match(id.strip())
    if not m:
        raise ValueError(f"unparseable constraint id {id!r}")
    name = m.group("name").strip()
    args = m.group("args")
    dims = tuple(int(x) for x in args.split(",")) if args else ()
    return name, dims


def _need_dims(id, dims, n):
    if len(dims) != n:
        raise ValueError(f"constraint id {id!r} needs {n} integer argument(s), got {dims}")
    if any(v <= 0 for v in dims):
        raise ValueError(f"constraint id {id!r} arguments must be positive, got {dims}")
    return dims


def _sumsq(a: Value) -> Value:
    return ad.vsum(ad.square(a), axis=-1)


def _ball_set(id):
    # a1^2 + a2^2 <= 0.05
    return ConstraintSet(
        inequalities=[lambda a, s: _sumsq(a) - 0.05],
        equalities=[], action_dim=2, state_dim=0, convexity="convex",
        id=id, family="R+L2", params={"r2": 0.05})


def _annulus_set(id):
    # 0.04 <= a1^2 + a2^2 <= 0.05
    return ConstraintSet(
        inequalities=[lambda a, s: _sumsq(a) - 0.05,
                      lambda a, s: 0.04 - _sumsq(a)],
        equalities=[], action_dim=2, state_dim=0, convexity="nonconvex",
        id=id, family="R+D", params={"lo2": 0.04, "hi2": 0.05})


def _maxzero_set(id, d):
    # sum_i max(w_i a_i, 0) <= 10, w = state features
    return ConstraintSet(
        inequalities=[lambda a, s: _add_scalar(ad.vsum(ad.relu(ad.mul(a, s)), axis=-1), -10.0)],
        equalities=[], action_dim=d, state_dim=d, convexity="convex",
        id=id, family="M", params={"d": d, "bound": 10.0},
        feature_scale=np.full(d, 10.0))


def _abs_sine_set(id, d):
    # sum |w_i a_i| <= 10  and  sum a_i^2 sin^2(theta_i) <= 0.1; s = (w, theta)
    def g_l1(a, s):
        w, _ = ad.split(s, (d, d))
        return _add_scalar(ad.vsum(_vabs(ad.mul(a, w)), axis=-1), -10.0)

    def g_ell(a, s):
        theta = s.data[:, d:]
        sin2 = a.tape.value(np.sin(theta) ** 2)
        return _add_scalar(ad.vsum(ad.mul(ad.square(a), sin2), axis=-1), -0.1)

    return ConstraintSet(
        inequalities=[g_l1, g_ell],
        equalities=[], action_dim=d, state_dim=2 * d, convexity="convex",
        id=id, family="O+S", params={"d": d, "l1_bound": 10.0, "ell_bound": 0.1},
        feature_scale=np.concatenate([np.full(d, 10.0), np.full(d, math.pi)]))


def _abs_sum_set(id, d):
    # sum |w_i a_i| <= 20, w = state features
    return ConstraintSet(
        inequalities=[lambda a, s: _add_scalar(ad.vsum(_vabs(ad.mul(a, s)), axis=-1), -20.0)],
        equalities=[], action_dim=d, state_dim=d, convexity="convex",
        id=id, family="HC+O", params={"d": d, "bound": 20.0},
        feature_scale=np.full(d, 15.0))


def _statewise_set(id, k, d):
    # k linearized constraints c_i(s) + w_i(s)^T a <= 0;
    # features are laid out [c_1..c_k, w_1 (d), ..., w_k (d)]
    sizes = (k,) + (d,) * k

    def make_g(i):
        def g(a, s):
            parts = ad.split(s, sizes)
            c_i = ad.split(parts[0], (1,) * k)[i]
            return ad.add(c_i, ad.vsum(ad.mul(a, parts[1 + i]), axis=-1))
        return g

    return ConstraintSet(
        inequalities=[make_g(i) for i in range(k)],
        equalities=[], action_dim=d, state_dim=k + k * d, convexity="convex",
        id=id, family="linear-statewise", params={"k": k, "d": d})


def _box_set(id, d):
    # |a_i| <= 1 per dimension
    def make_g(i):
        def g(a, s):
            col = ad.split(a, (1,) * d)[i]
            return _add_scalar(_vabs(col), -1.0)
        return g

    return ConstraintSet(
        inequalities=[make_g(i) for i in range(d)],
        equalities=[], action_dim=d, state_dim=0, convexity="convex",
        id=id, family="box", params={"d": d})


def catalog_lookup(id: str) -> ConstraintSet:
    """Build a catalog constraint family from its string id.

    Known ids: R+L2, R+D, M(d), O+S(d), HC+O(d), linear-statewise(k,d),
    box(d).  Parenthesized arguments set the action dimension (and for
    linear-statewise the number of constraints k).
    """
    name, dims = _parse_id(id)
    if name == "R+L2":
        _need_dims(id, dims, 0)
        return _ball_set(id)
    if name == "R+D":
        _need_dims(id, dims, 0)
        return _annulus_set(id)
    if name == "M":
        (d,) = _need_dims(id, dims, 1)
        return _maxzero_set(id, d)
    if name == "O+S":
        (d,) = _need_dims(id, dims, 1)
        return _abs_sine_set(id, d)
    if name in ("HC+O", "HC+O-style"):
        (d,) = _need_dims(id, dims, 1)
        return _abs_sum_set(id, d)
    if name == "linear-statewise":
        k, d = _need_dims(id, dims, 2)
        return _statewise_set(id, k, d)
    if name == "box":
        (d,) = _need_dims(id, dims, 1)
        return _box_set(id, d)
    raise ValueError(f"unknown constraint id {id!r}")


def state_sampler(id: str, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw conditioning features from the family's declared state distribution.

    Returns a (state_dim,) vector, or an (n, state_dim) batch when n is given.
    Families without state features return an empty vector.  linear-statewise
    has no canonical distribution (features come from fitted environment
    models); a benign synthetic fallback c ~ U[-1,0], w ~ U[-1,1] is drawn so
    standalone sampling still works.
    """
    name, dims = _parse_id(id)
    rows = 1 if n is None else int(n)

    if name in ("R+L2", "R+D"):
        out = np.zeros((rows, 0))
    elif name == "box":
        _need_dims(id, dims, 1)
        out = np.zeros((rows, 0))
    elif name == "M":
        (d,) = _need_dims(id, dims, 1)
        out = rng.uniform(-10.0, 10.0, size=(rows, d))
    elif name == "O+S":
        (d,) = _need_dims(id, dims, 1)
        w = rng.uniform(-10.0, 10.0, size=(rows, d))
        theta = rng.uniform(-math.pi, math.pi, size=(rows, d))
        out = np.concatenate([w, theta], axis=1)
    elif name in ("HC+O", "HC+O-style"):
        (d,) = _need_dims(id, dims, 1)
        out = rng.normal(0.0, 15.0, size=(rows, d))
    elif name == "linear-statewise":
        k, d = _need_dims(id, dims, 2)
        c = rng.uniform(-1.0, 0.0, size=(rows, k))
        w = rng.uniform(-1.0, 1.0, size=(rows, k * d))
        out = np.concatenate([c, w], axis=1)
    else:
        raise ValueError(f"unknown constraint id {id!r}")

    return out[0] if n is None else out


# -- declarative user constraints ---------------------------------------------

_TERM_KEYS = {"coef", "powers", "abs", "maxzero"}
_CONFIG_KEYS = {"id", "action_dim", "state_dim", "convexity", "inequalities", "equalities"}


def _validate_term(term: dict, d: int) -> str:
    unknown = set(term) - _TERM_KEYS
    if unknown:
        raise ValueError(f"unknown constraint term keys {sorted(unknown)}")
    kinds = [k for k in ("powers", "abs", "maxzero") if k in term]
    if len(kinds) != 1:
        raise ValueError(f"term must have exactly one of powers/abs/maxzero, got {term}")
    kind = kinds[0]
    if kind == "powers":
        powers = list(term["powers"])
        if len(powers) != d:
            raise ShapeError(f"powers length {len(powers)} != action_dim {d}")
        if any(int(p) != p or p < 0 for p in powers):
            raise ValueError(f"powers must be non-negative integers, got {powers}")
    elif kind == "abs":
        if not 0 <= int(term["abs"]) < d:
            raise ValueError(f"abs index {term['abs']} out of range for action_dim {d}")
    else:
        w = np.asarray(term["maxzero"], dtype=np.float64)
        if w.shape != (d,):
            raise ShapeError(f"maxzero weights shape {w.shape} != ({d},)")
    return kind


def _term_value(term: dict, a: Value, cols: list[Value]) -> Value | float:
    coef = float(term.get("coef", 1.0))
    d = a.data.shape[1]
    kind = _validate_term(term, d)

    if kind == "powers":
        powers = list(term["powers"])
        out = None
        for i, p in enumerate(int(p) for p in powers):
            for _ in range(p):
                out = cols[i] if out is None else ad.mul(out, cols[i])
        if out is None:
            return coef  # constant monomial
        return ad.scalar_mul(out, coef)

    if kind == "abs":
        return ad.scalar_mul(_vabs(cols[int(term["abs"])]), coef)

    # maxzero: coef * max(w . a, 0)
    w = np.asarray(term["maxzero"], dtype=np.float64)
    w_rows = a.tape.value(np.broadcast_to(w, a.data.shape).copy())
    dot = ad.vsum(ad.mul(a, w_rows), axis=-1)
    return ad.scalar_mul(ad.relu(dot), coef)


def _config_fn(terms: list[dict], offset: float):
    def fn(a: Value, s) -> Value:
        d = a.data.shape[1]
        cols = ad.split(a, (1,) * d)
        total = None
        const = offset
        for term in terms:
            val = _term_value(term, a, cols)
            if isinstance(val, float):
                const += val
            else:
                total = val if total is None else ad.add(total, val)
        if total is None:
            return a.tape.value(np.full((a.data.shape[0], 1), const))
        return _add_scalar(total, const)
    return fn


def constraint_from_config(cfg: dict) -> ConstraintSet:
    """Build a ConstraintSet from a declarative description.

    cfg maps: action_dim (required), state_dim (default 0, features are
    accepted but unused), convexity (default "nonconvex"), id (default
    "user"), inequalities and equalities: lists of {"terms": [...],
    "bound"/"target": float} where each term is one of
      {"coef": c, "powers": [p_1..p_d]}   c * prod_i a_i^{p_i}
      {"coef": c, "abs": i}               c * |a_i|
      {"coef": c, "maxzero": [w_1..w_d]}  c * max(w . a, 0)
    An inequality means sum(terms) <= bound; an equality means
    sum(terms) = target.
    """
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown constraint config keys {sorted(unknown)}")
    if "action_dim" not in cfg:
        raise ValueError("constraint config needs action_dim")
    d = int(cfg["action_dim"])
    state_dim = int(cfg.get("state_dim", 0))
    convexity = cfg.get("convexity", "nonconvex")

    ineqs = []
    for entry in cfg.get("inequalities", []):
        extra = set(entry) - {"terms", "bound"}
        if extra:
            raise ValueError(f"unknown inequality keys {sorted(extra)}")
        terms = list(entry["terms"])
        for term in terms:
            _validate_term(term, d)
        ineqs.append(_config_fn(terms, -float(entry.get("bound", 0.0))))
    eqs = []
    for entry in cfg.get("equalities", []):
        extra = set(entry) - {"terms", "target"}
        if extra:
            raise ValueError(f"unknown equality keys {sorted(extra)}")
        terms = list(entry["terms"])
        for term in terms:
            _validate_term(term, d)
        eqs.append(_config_fn(terms, -float(entry.get("target", 0.0))))

    return ConstraintSet(
        inequalities=ineqs, equalities=eqs, action_dim=d, state_dim=state_dim,
        convexity=convexity, id=cfg.get("id", "user"), family="user")
