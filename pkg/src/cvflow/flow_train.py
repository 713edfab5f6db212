"""Reverse-KL pretraining of flows against the violation-penalty target.

The training signal needs no feasible-sample dataset: for latents drawn from
the base density, the loss

    J(psi) = E[ lam * cv(f_psi(z, s), s) - log|det J_{f_psi}(z; s)| ]

pushes mass off violating actions while the log-det term keeps the map from
collapsing.  States are resampled fresh each batch from the family's state
distribution (or from a supplied feature pool for fitted state-wise
constraints).  The state-wise variant first fits per-constraint sensitivity
networks w_i(s) to observed cost transitions, then trains a flow against the
linearized constraint set c_i(s) + w_i(s)^T a <= 0.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import constraints as cn
from . import flow as fl
from .envs import Environment, rollout
from .seeding import derived_rng


@dataclass
class FlowTrainConfig:
    epochs: int = 3000
    batch: int = 512
    lr: float = 1e-3
    lam: float = cn.LAMBDA_DEFAULT
    eps: float = cn.EPS_DEFAULT
    constraint: str = "R+L2"
    base: str = "gaussian"
    seed: int = 0
    n_layers: int = 6
    hidden: int = 64
    clamp: float = 2.0
    squash: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        for name in ("batch", "lr", "hidden", "n_layers", "clamp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class PretrainResult:
    model: fl.FlowModel
    log: list[dict]
    halted: bool = False
    checkpoint_path: str | None = None


def _loss_terms(model: fl.FlowModel, s_batch, z_batch, cs, td):
    """Build the loss graph; also returns plain-array cv values and logdets."""
    a, logdet = model.forward(z_batch, s_batch)
    sv = model.tape.value(np.asarray(s_batch, dtype=np.float64)) if cs.state_dim else None
    cvv = cn.cv(a, sv, cs, td.eps)
    loss = ad.mean(ad.sub(ad.scalar_mul(cvv, td.lam), logdet))
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            "non-finite flow loss: cv range "
            f"[{np.nanmin(cvv.data)}, {np.nanmax(cvv.data)}], logdet range "
            f"[{np.nanmin(logdet.data)}, {np.nanmax(logdet.data)}]")
    return loss, cvv.data.ravel().copy(), logdet.data.ravel().copy()


def flow_loss(model: fl.FlowModel, s_batch, z_batch, cs: cn.ConstraintSet,
              td: cn.TargetDensity) -> ad.Value:
    """Mean over the batch of lam * cv(f(z, s), s) - logdet(f at z); a scalar
    Value differentiable in the flow parameters."""
    loss, _, _ = _loss_terms(model, s_batch, z_batch, cs, td)
    return loss


def _sample_states(cs, pool, rng, n):
    if cs.state_dim == 0:
        return None
    if pool is not None:
        idx = rng.integers(0, pool.shape[0], size=n)
        return pool[idx]
    return cn.state_sampler(cs.id, rng, n=n)


def _write_flowlog(outdir, log):
    path = os.path.join(outdir, "flowlog.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in log:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["accuracy"])])
    return path


def pretrain(config: FlowTrainConfig, cs: cn.ConstraintSet | None = None,
             state_pool: np.ndarray | None = None,
             outdir: str | None = None, on_epoch=None) -> PretrainResult:
    """Train a fresh flow for config.epochs Adam steps of the reverse-KL loss.

    Per epoch: draw a latent batch from the base, draw a state batch (fresh
    from the family sampler, or rows of state_pool), step on flow_loss.  The
    log holds one row per epoch with the batch loss and the in-batch feasible
    fraction as an accuracy estimate.  A non-finite loss or gradient halts
    training and restores the last good parameters.  With outdir set, writes
    flowlog.csv and a flow.json checkpoint.

    on_epoch(epoch, model) fires before each epoch's update and once more
    after the loop with epoch == config.epochs, so callers can evaluate the
    model on a fixed epoch grid (index 0 sees the identity initialization).
    """
    cs = cs if cs is not None else cn.catalog_lookup(config.constraint)
    td = cn.TargetDensity(lam=config.lam, eps=config.eps)
    tape = ad.Tape()
    model = fl.FlowModel(
        tape, cs.action_dim, cs.state_dim, derived_rng(config.seed, "flow-init"),
        n_layers=config.n_layers, hidden=config.hidden, clamp=config.clamp,
        squash=config.squash, base=config.base, feature_scale=cs.feature_scale)
    rng_lat = derived_rng(config.seed, "flow-latent")
    rng_state = derived_rng(config.seed, "flow-state")
    opt = ad.Adam(model.params(), lr=config.lr)

    log: list[dict] = []
    halted = False
    last_good = [p.data.copy() for p in model.params()]
    for epoch in range(config.epochs):
        if on_epoch is not None:
            on_epoch(epoch, model)
        z = model.base.sample(rng_lat, config.batch)
        s = _sample_states(cs, state_pool, rng_state, config.batch)
        try:
            loss, cv_vals, _ = _loss_terms(model, s, z, cs, td)
            tape.backward(loss)
            opt.step()
        except FloatingPointError:
            for p, arr in zip(model.params(), last_good):
                p.data = arr
            halted = True
            tape.clear()
            break
        tape.clear()
        for p, arr in zip(model.params(), last_good):
            np.copyto(arr, p.data)
        log.append({
            "epoch": epoch,
            "loss": float(loss.data),
            "accuracy": float(np.mean(cv_vals == 0.0)),
        })
    if on_epoch is not None:
        on_epoch(config.epochs, model)

    checkpoint_path = None
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        _write_flowlog(outdir, log)
        checkpoint_path = os.path.join(outdir, "flow.json")
        fl.save_checkpoint(model, checkpoint_path)
    return PretrainResult(model=model, log=log, halted=halted,
                          checkpoint_path=checkpoint_path)


# -- state-wise constraint fitting ------------------------------------------------


class StatewiseConstraintModel:
    """Per-constraint sensitivity networks w_i(s) fitted so that
    c_i(s) + w_i(s)^T a predicts the next-state cost c_i(s')."""

    def __init__(self, env_state_dim: int, action_dim: int, n_costs: int,
                 hidden: int = 64, rng: np.random.Generator | None = None,
                 tape: ad.Tape | None = None):
        self.env_state_dim = int(env_state_dim)
        self.action_dim = int(action_dim)
        self.n_costs = int(n_costs)
        self.hidden = int(hidden)
        self.tape = tape if tape is not None else ad.Tape()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlps = [
            ad.MLP(self.tape, [env_state_dim, hidden, hidden, action_dim], rng,
                   name=f"w{i}")
            for i in range(n_costs)
        ]

    def params(self):
        out = []
        for mlp in self.mlps:
            out.extend(mlp.params())
        return out

    def coeffs(self, s_batch: np.ndarray) -> np.ndarray:
        """Fitted sensitivities, shape (n, n_costs, action_dim)."""
        s_batch = np.atleast_2d(np.asarray(s_batch, dtype=np.float64))
        with self.tape.no_grad():
            sv = self.tape.value(s_batch)
            cols = [mlp(sv).data for mlp in self.mlps]
        return np.stack(cols, axis=1)

    def features(self, env: Environment, s) -> np.ndarray:
        """Conditioning features (c_1..c_k, w_1, ..., w_k) for one state."""
        s = np.asarray(s, dtype=np.float64)
        c = env.costs(s)
        w = self.coeffs(s.reshape(1, -1))[0]
        return np.concatenate([c, w.ravel()])

    def features_batch(self, env: Environment, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        c = np.stack([env.costs(s) for s in states])
        w = self.coeffs(states)
        return np.concatenate([c, w.reshape(len(states), -1)], axis=1)

    def save(self, path: str) -> None:
        doc = {
            "version": 1,
            "kind": "statewise",
            "env_state_dim": self.env_state_dim,
            "action_dim": self.action_dim,
            "n_costs": self.n_costs,
            "hidden": self.hidden,
            "mlps": [[{"shape": list(a.shape), "data": a.ravel().tolist()}
                      for a in mlp.state_arrays()] for mlp in self.mlps],
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "StatewiseConstraintModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "statewise" or doc.get("version") != 1:
            raise ValueError(f"{path!r} is not a supported state-wise checkpoint")
        model = cls(doc["env_state_dim"], doc["action_dim"], doc["n_costs"],
                    hidden=doc["hidden"])
        for mlp, payload in zip(model.mlps, doc["mlps"]):
            mlp.load_arrays([np.array(p["data"], dtype=np.float64).reshape(p["shape"])
                             for p in payload])
        return model


@dataclass
class StatewiseFitReport:
    initial_val_mse: float
    final_val_mse: float
    transitions: int
    excitation_condition: float


def fit_statewise_model(env: Environment, transitions, rng: np.random.Generator,
                        hidden: int = 64, epochs: int = 60, batch: int = 256,
                        lr: float = 1e-3, val_frac: float = 0.2):
    """Fit w_i(s) networks by MSE between c_i(s) + w_i(s)^T a and c_i(s')."""
    n = len(transitions)
    if n < batch:
        raise ValueError(f"need at least {batch} transitions, got {n}")
    S = np.stack([t.s for t in transitions])
    A = np.stack([t.a for t in transitions])
    C = np.stack([env.costs(t.s) for t in transitions])
    C2 = np.stack([env.costs(t.s2) for t in transitions])

    # degenerate excitation (e.g. all-zero actions) makes w unidentifiable
    exc = A.T @ A / n
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(exc))
    if not np.isfinite(cond) or cond > 1e8:
        warnings.warn(
            f"action excitation matrix is ill-conditioned (cond={cond:.3g}); "
            "state-wise fit may be degenerate", RuntimeWarning)

    perm = rng.permutation(n)
    n_val = max(1, int(round(val_frac * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    model = StatewiseConstraintModel(env.state_dim, env.action_dim, env.n_costs,
                                     hidden=hidden, rng=rng)

    def val_mse():
        w = model.coeffs(S[val_idx])  # (n_val, k, d)
        pred = C[val_idx] + np.einsum("nkd,nd->nk", w, A[val_idx])
        return float(np.mean((pred - C2[val_idx]) ** 2))

    initial = val_mse()
    opt = ad.Adam(model.params(), lr=lr)
    tape = model.tape
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        for lo in range(0, len(order) - batch + 1, batch):
            idx = order[lo:lo + batch]
            sv = tape.value(S[idx])
            av = tape.value(A[idx])
            loss = None
            for i, mlp in enumerate(model.mlps):
                w_out = mlp(sv)
                pred = ad.vsum(ad.mul(w_out, av), axis=-1)
                resid = ad.add(pred, tape.value((C[idx, i] - C2[idx, i]).reshape(-1, 1)))
                term = ad.mean(ad.square(resid))
                loss = term if loss is None else ad.add(loss, term)
            tape.backward(loss)
            opt.step()
            tape.clear()

    report = StatewiseFitReport(
        initial_val_mse=initial, final_val_mse=val_mse(),
        transitions=n, excitation_condition=cond)
    return model, report


@dataclass
class StatewisePretrainResult:
    w_model: StatewiseConstraintModel
    flow_result: PretrainResult
    fit_report: StatewiseFitReport
    constraint_set: cn.ConstraintSet
    feature_pool: np.ndarray = field(repr=False, default=None)
    w_checkpoint_path: str | None = None


def pretrain_statewise(env: Environment, rollout_steps: int,
                       config: FlowTrainConfig, outdir: str | None = None,
                       fit_epochs: int = 60) -> StatewisePretrainResult:
    """Collect random-policy transitions, fit the state-wise sensitivities,
    then pretrain a flow against the induced linear constraint set."""
    rng_env = derived_rng(config.seed, "statewise-env")

    def random_policy(s, rng):
        return rng.uniform(-1.0, 1.0, size=env.action_dim)

    transitions, _ = rollout(env, random_policy, rollout_steps, rng_env)
    if len(transitions) < config.batch:
        raise ValueError(
            f"collected {len(transitions)} transitions < batch size {config.batch}")

    rng_fit = derived_rng(config.seed, "statewise-fit")
    w_model, report = fit_statewise_model(env, transitions, rng_fit,
                                          epochs=fit_epochs, batch=min(256, len(transitions)))

    k, d = env.n_costs, env.action_dim
    cs = cn.catalog_lookup(f"linear-statewise({k},{d})")
    states = np.stack([t.s for t in transitions])
    pool = w_model.features_batch(env, states)

    flow_result = pretrain(config, cs=cs, state_pool=pool, outdir=outdir)
    w_path = None
    if outdir is not None:
        w_path = os.path.join(outdir, "statewise.json")
        w_model.save(w_path)
    return StatewisePretrainResult(
        w_model=w_model, flow_result=flow_result, fit_report=report,
        constraint_set=cs, feature_pool=pool, w_checkpoint_path=w_path)
