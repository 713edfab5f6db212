"""Conditional invertible action maps with exact log-det Jacobians.

A FlowModel maps latent vectors to environment actions through a stack of
conditional affine coupling layers followed by an optional tanh squash into
the action box [-1, 1]^d.  Scale outputs are clamped via c*tanh(./c) so the
log-det never explodes, and the final conditioner layers start at zero so a
fresh model is the identity map (up to the squash).  One-dimensional actions
degenerate coupling, so d=1 uses a state-conditioned elementwise affine
transform instead.

Forward, inverse, and log-density passes are all built from autodiff ops, so
gradients flow through either direction of the map when training needs them.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Value

CHECKPOINT_VERSION = 1

LOG2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)


class BaseDistribution:
    """Latent base density: standard gaussian or uniform on [-1, 1]^d."""

    KINDS = ("gaussian", "uniform")

    def __init__(self, kind: str, dim: int):
        if kind not in self.KINDS:
            raise ValueError(f"base kind must be one of {self.KINDS}, got {kind!r}")
        self.kind = kind
        self.dim = int(dim)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal((n, self.dim))
        return rng.uniform(-1.0, 1.0, size=(n, self.dim))

    def log_density(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"latent batch shape {z.shape} != (n, {self.dim})")
        if self.kind == "gaussian":
            return -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(z * z, axis=1)
        inside = np.all(np.abs(z) <= 1.0, axis=1)
        out = np.full(z.shape[0], -np.inf)
        out[inside] = -self.dim * LOG2
        return out

    def log_density_value(self, z: Value, mollify: float | None = None) -> Value:
        """Differentiable log-density column; the uniform kind needs a softplus
        mollification rate since its hard density has no usable gradient."""
        if self.kind == "gaussian":
            quad = ad.scalar_mul(ad.vsum(ad.square(z), axis=-1), -0.5)
            return quad + (-0.5 * self.dim * LOG_2PI)
        if mollify is None or mollify <= 0:
            raise ValueError("uniform base needs a positive mollify rate for gradients")
        k = float(mollify)
        # soft box barrier: ~0 inside, ~k * excess outside each face
        hi = ad.softplus(ad.scalar_mul(z + (-1.0), k))
        lo = ad.softplus(ad.scalar_mul(ad.negate(z + 1.0), k))
        barrier = ad.vsum(ad.add(hi, lo), axis=-1)
        return ad.negate(barrier) + (-self.dim * LOG2)


def _squash_logdet_term(x: Value) -> Value:
    # sum_i log(1 - tanh^2(x_i)) = sum_i 2*(log 2 - x_i - softplus(-2 x_i)),
    # stable for any magnitude of x
    sp = ad.softplus(ad.scalar_mul(x, -2.0))
    inner = ad.negate(ad.add(x, sp)) + LOG2
    return ad.vsum(ad.scalar_mul(inner, 2.0), axis=-1)


def _clamped_scale(raw: Value, clamp: float) -> Value:
    return ad.scalar_mul(ad.tanh(ad.scalar_mul(raw, 1.0 / clamp)), clamp)


def _selection(d: int, idx: list[int]) -> np.ndarray:
    p = np.zeros((d, len(idx)))
    for col, i in enumerate(idx):
        p[i, col] = 1.0
    return p


class FlowModel:
    """Stack of conditional affine couplings (or a d=1 elementwise affine map)
    with optional tanh output squash."""

    def __init__(self, tape: ad.Tape, action_dim: int, state_dim: int,
                 rng: np.random.Generator, n_layers: int = 6, hidden: int = 64,
                 clamp: float = 2.0, squash: bool = True, base: str = "gaussian",
                 feature_scale=None):
        if action_dim < 1:
            raise ValueError(f"action_dim must be >= 1, got {action_dim}")
        if clamp <= 0:
            raise ValueError(f"scale clamp must be positive, got {clamp}")
        self.tape = tape
        self.action_dim = int(action_dim)
        self.state_dim = int(state_dim)
        self.n_layers = int(n_layers)
        self.hidden = int(hidden)
        self.clamp = float(clamp)
        self.squash = bool(squash)
        self.base = BaseDistribution(base, self.action_dim)
        if feature_scale is None:
            feature_scale = np.ones(self.state_dim)
        self.feature_scale = np.asarray(feature_scale, dtype=np.float64)
        if self.feature_scale.shape != (self.state_dim,):
            raise ShapeError(
                f"feature_scale shape {self.feature_scale.shape} != ({self.state_dim},)")

        self.couplings = []
        self.elementwise = None
        if self.action_dim == 1:
            # conditioner sees the state features, or a constant when stateless
            in_dim = max(self.state_dim, 1)
            self.elementwise = ad.MLP(
                tape, [in_dim, hidden, hidden, 2], rng,
                zero_init_last=True, name="flow-elem")
        else:
            d = self.action_dim
            for layer in range(self.n_layers):
                keep = [i for i in range(d) if i % 2 == layer % 2]
                tr = [i for i in range(d) if i % 2 != layer % 2]
                mlp = ad.MLP(
                    tape, [len(keep) + self.state_dim, hidden, hidden, 2 * len(tr)],
                    rng, zero_init_last=True, name=f"flow-l{layer}")
                self.couplings.append({
                    "keep": keep,
                    "tr": tr,
                    "p_keep": tape.value(_selection(d, keep)),
                    "p_tr": tape.value(_selection(d, tr)),
                    "p_keep_t": tape.value(_selection(d, keep).T.copy()),
                    "p_tr_t": tape.value(_selection(d, tr).T.copy()),
                    "mlp": mlp,
                })

    # -- plumbing -------------------------------------------------------------

    def params(self) -> list[Value]:
        if self.elementwise is not None:
            return self.elementwise.params()
        out = []
        for cp in self.couplings:
            out.extend(cp["mlp"].params())
        return out

    def _wrap_latent(self, z) -> Value:
        if isinstance(z, Value):
            v = z
        else:
            arr = np.asarray(z, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            v = self.tape.value(arr)
        if v.data.ndim != 2 or v.data.shape[1] != self.action_dim:
            raise ShapeError(f"latent batch shape {v.data.shape} != (n, {self.action_dim})")
        return v

    def _wrap_features(self, s, n: int) -> Value | None:
        if self.state_dim == 0:
            return None
        if s is None:
            raise ShapeError(f"flow conditions on {self.state_dim} features, got None")
        arr = np.asarray(s, dtype=np.float64)
        if arr.ndim == 1:
            arr = np.broadcast_to(arr, (n, arr.shape[0])).copy()
        if arr.shape != (n, self.state_dim):
            raise ShapeError(
                f"feature batch shape {arr.shape} != ({n}, {self.state_dim})")
        return self.tape.value(arr / self.feature_scale)

    def _check_finite(self, v: Value, layer: int):
        if not np.all(np.isfinite(v.data)):
            raise FloatingPointError(f"non-finite flow output at layer {layer}")

    def _cond_in(self, x_m: Value | None, feats: Value | None, n: int) -> Value:
        parts = [p for p in (x_m, feats) if p is not None]
        if not parts:
            return self.tape.value(np.ones((n, 1)))
        if len(parts) == 1:
            return parts[0]
        return ad.concat(parts)

    def _scale_shift(self, mlp: ad.MLP, cond: Value, d_tr: int,
                     layer: int) -> tuple[Value, Value]:
        raw = mlp(cond)
        self._check_finite(raw, layer)
        s_raw, t = ad.split(raw, (d_tr, d_tr))
        return _clamped_scale(s_raw, self.clamp), t

    # -- passes ---------------------------------------------------------------

    def forward(self, z, s=None) -> tuple[Value, Value]:
        """Map latent batch to actions; returns (a, logdet) column Values."""
        x = self._wrap_latent(z)
        n = x.data.shape[0]
        feats = self._wrap_features(s, n)
        logdet = self.tape.value(np.zeros((n, 1)))

        if self.elementwise is not None:
            cond = self._cond_in(None, feats, n)
            scale, shift = self._scale_shift(self.elementwise, cond, 1, 0)
            x = ad.add(ad.mul(x, ad.exp(scale)), shift)
            logdet = ad.add(logdet, scale)
            self._check_finite(x, 0)
        else:
            for i, cp in enumerate(self.couplings):
                x_m = ad.matmul(x, cp["p_keep"])
                x_u = ad.matmul(x, cp["p_tr"])
                cond = self._cond_in(x_m, feats, n)
                scale, shift = self._scale_shift(cp["mlp"], cond, len(cp["tr"]), i)
                y_u = ad.add(ad.mul(x_u, ad.exp(scale)), shift)
                x = ad.add(ad.matmul(x_m, cp["p_keep_t"]), ad.matmul(y_u, cp["p_tr_t"]))
                logdet = ad.add(logdet, ad.vsum(scale, axis=-1))
                self._check_finite(x, i)

        if self.squash:
            logdet = ad.add(logdet, _squash_logdet_term(x))
            x = ad.tanh(x)
            self._check_finite(x, self.n_layers)
        return x, logdet

    def inverse(self, a, s=None) -> tuple[Value, Value]:
        """Map action batch back to latents; returns (z, logdet_inverse) with
        logdet_inverse = -logdet(forward at z)."""
        if isinstance(a, Value):
            y = a
        else:
            arr = np.asarray(a, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            y = self.tape.value(arr)
        if y.data.ndim != 2 or y.data.shape[1] != self.action_dim:
            raise ShapeError(f"action batch shape {y.data.shape} != (n, {self.action_dim})")
        n = y.data.shape[0]
        feats = self._wrap_features(s, n)
        logdet = self.tape.value(np.zeros((n, 1)))

        if self.squash:
            if np.any(np.abs(y.data) >= 1.0 - 1e-9):
                raise DomainError("action outside the open squash range (-1, 1)")
            # atanh applies to the data itself, never to anything trainable
            pre = np.arctanh(y.data)
            y = self.tape.value(pre)
            squash_ld = 2.0 * (LOG2 - pre - np.logaddexp(0.0, -2.0 * pre))
            logdet = ad.add(logdet, self.tape.value(-squash_ld.sum(axis=1, keepdims=True)))

        if self.elementwise is not None:
            cond = self._cond_in(None, feats, n)
            scale, shift = self._scale_shift(self.elementwise, cond, 1, 0)
            y = ad.mul(ad.sub(y, shift), ad.exp(ad.negate(scale)))
            logdet = ad.add(logdet, ad.negate(scale))
            self._check_finite(y, 0)
        else:
            for i, cp in enumerate(reversed(self.couplings)):
                y_m = ad.matmul(y, cp["p_keep"])
                y_u = ad.matmul(y, cp["p_tr"])
                cond = self._cond_in(y_m, feats, n)
                scale, shift = self._scale_shift(cp["mlp"], cond, len(cp["tr"]), i)
                x_u = ad.mul(ad.sub(y_u, shift), ad.exp(ad.negate(scale)))
                y = ad.add(ad.matmul(y_m, cp["p_keep_t"]), ad.matmul(x_u, cp["p_tr_t"]))
                logdet = ad.add(logdet, ad.negate(ad.vsum(scale, axis=-1)))
                self._check_finite(y, i)
        return y, logdet

    def log_prob(self, a, s=None, *, differentiable: bool = False,
                 mollify: float | None = None):
        """log q(a|s) via the inverse pass and the base density.

        Plain mode evaluates under no_grad and returns an (n,) array; the
        differentiable mode records the graph and returns a column Value
        (the uniform base then requires a mollify rate).
        """
        if differentiable:
            z, logdet_inv = self.inverse(a, s)
            return ad.add(self.base.log_density_value(z, mollify=mollify), logdet_inv)
        with self.tape.no_grad():
            z, logdet_inv = self.inverse(a, s)
            return self.base.log_density(z.data) + logdet_inv.data.ravel()

    def sample(self, rng: np.random.Generator, s=None, n: int = 1) -> np.ndarray:
        """Draw n actions (plain arrays, no graph); s may be one feature row
        shared across the batch or a per-sample batch."""
        z = self.base.sample(rng, n)
        with self.tape.no_grad():
            a, _ = self.forward(z, s)
            return a.data.copy()


# -- checkpoints ---------------------------------------------------------------


def _arrays_payload(arrays: list[np.ndarray]) -> list[dict]:
    return [{"shape": list(a.shape), "data": a.ravel().tolist()} for a in arrays]


def _arrays_from_payload(payload: list[dict]) -> list[np.ndarray]:
    return [np.array(p["data"], dtype=np.float64).reshape(p["shape"]) for p in payload]


def save_checkpoint(model: FlowModel, path: str) -> None:
    """Write the model as versioned JSON text; floats round-trip bit-exactly."""
    if model.elementwise is not None:
        layers = [{"arrays": _arrays_payload(model.elementwise.state_arrays())}]
    else:
        layers = [{"mask_keep": cp["keep"],
                   "arrays": _arrays_payload(cp["mlp"].state_arrays())}
                  for cp in model.couplings]
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "flow",
        "action_dim": model.action_dim,
        "state_dim": model.state_dim,
        "base": model.base.kind,
        "clamp": model.clamp,
        "n_layers": model.n_layers,
        "hidden": model.hidden,
        "squash": model.squash,
        "feature_scale": model.feature_scale.tolist(),
        "layers": layers,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str, tape: ad.Tape | None = None,
                    action_dim: int | None = None,
                    state_dim: int | None = None) -> FlowModel:
    """Rebuild a FlowModel from a checkpoint file.

    Optional action_dim/state_dim assert the checkpoint matches the caller's
    run configuration.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt flow checkpoint {path!r}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "flow":
        raise ValueError(f"{path!r} is not a flow checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"flow checkpoint version {doc.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    if action_dim is not None and doc["action_dim"] != action_dim:
        raise ValueError(
            f"checkpoint action_dim {doc['action_dim']} != configured {action_dim}")
    if state_dim is not None and doc["state_dim"] != state_dim:
        raise ValueError(
            f"checkpoint state_dim {doc['state_dim']} != configured {state_dim}")

    tape = tape if tape is not None else ad.Tape()
    model = FlowModel(
        tape, doc["action_dim"], doc["state_dim"], np.random.default_rng(0),
        n_layers=doc["n_layers"], hidden=doc["hidden"], clamp=doc["clamp"],
        squash=doc["squash"], base=doc["base"],
        feature_scale=np.array(doc["feature_scale"], dtype=np.float64))
    layers = doc["layers"]
    if model.elementwise is not None:
        if len(layers) != 1:
            raise ValueError("d=1 checkpoint must hold exactly one layer")
        model.elementwise.load_arrays(_arrays_from_payload(layers[0]["arrays"]))
    else:
        if len(layers) != len(model.couplings):
            raise ValueError(
                f"checkpoint holds {len(layers)} layers, model needs {len(model.couplings)}")
        for cp, payload in zip(model.couplings, layers):
            if payload.get("mask_keep") != cp["keep"]:
                raise ValueError("checkpoint coupling masks do not match the model")
            cp["mlp"].load_arrays(_arrays_from_payload(payload["arrays"]))
    return model
