"""Flow-quality metrics and the matched-budget standard-flow comparison.

Accuracy is the feasible fraction of flow samples.  Recall rejection-samples
feasible actions and asks whether their inverses land inside the uniform
base's support, so it is defined (and reported) only in uniform-base mode.
The comparison harness trains a violation-penalty flow and a plain
maximum-likelihood flow on feasible samples under matched budgets, logging
both arms' metrics on a shared epoch grid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import constraints as cn
from . import flow as fl
from . import flow_train as ft
from .autodiff import ShapeError
from .seeding import derived_rng

_CHUNK = 8192
REJECTION_ATTEMPT_CAP = 10_000_000

COMPARISON_COLUMNS = ("epoch", "arm", "accuracy", "recall", "f1")


@dataclass(frozen=True)
class FlowQualityReport:
    accuracy: float
    recall: float | None
    f1: float | None
    n_samples: int
    constraint_id: str
    n_states: int


def f1_score(acc: float, rec: float) -> float:
    return 2.0 * acc * rec / (acc + rec) if (acc + rec) > 0.0 else 0.0


def _conditioning_states(cs: cn.ConstraintSet, rng: np.random.Generator,
                         n_states: int, states) -> np.ndarray | None:
    if cs.state_dim == 0:
        return None
    if states is not None:
        pool = np.asarray(states, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[1] != cs.state_dim:
            raise ShapeError(
                f"state pool shape {pool.shape} != (*, {cs.state_dim})")
        return pool
    return cn.state_sampler(cs.id, rng, n_states)


def accuracy(flow: fl.FlowModel, cs: cn.ConstraintSet, n: int,
             rng: np.random.Generator, states=None, n_states: int = 32) -> float:
    """Fraction of n flow samples with zero constraint violation."""
    if n < 1:
        raise ValueError(f"accuracy needs n >= 1, got {n}")
    pool = _conditioning_states(cs, rng, n_states, states)
    hits = 0
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        z = flow.base.sample(rng, m)
        feats = None if pool is None else pool[(done + np.arange(m)) % len(pool)]
        with flow.tape.no_grad():
            a, _ = flow.forward(z, feats)
        hits += int(np.count_nonzero(cn.cv(a.data, feats, cs) == 0.0))
        done += m
    return hits / n


def _rejection_dataset(cs: cn.ConstraintSet, n: int, rng: np.random.Generator,
                       pool: np.ndarray | None,
                       max_attempts: int = REJECTION_ATTEMPT_CAP):
    """n feasible actions (with their conditioning states) by uniform
    proposals over the action box."""
    actions = np.empty((n, cs.action_dim))
    feats = None if pool is None else np.empty((n, cs.state_dim))
    got = 0
    attempts = 0
    while got < n:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"rejection sampling for {cs.id} used {attempts} proposals for "
                f"{got}/{n} feasible hits; constraint too tight")
        m = min(_CHUNK, max_attempts - attempts)
        a = rng.uniform(-1.0, 1.0, size=(m, cs.action_dim))
        f = None if pool is None else pool[rng.integers(0, len(pool), size=m)]
        keep = cn.cv(a, f, cs) == 0.0
        take = min(int(np.count_nonzero(keep)), n - got)
        if take:
            actions[got : got + take] = a[keep][:take]
            if feats is not None:
                feats[got : got + take] = f[keep][:take]
            got += take
        attempts += m
    return actions, feats


def recall(flow: fl.FlowModel, cs: cn.ConstraintSet, n: int,
           rng: np.random.Generator, states=None, n_states: int = 32,
           max_attempts: int = REJECTION_ATTEMPT_CAP) -> float:
    """Fraction of n rejection-sampled feasible actions whose flow inverse
    lands inside the uniform base box [-1, 1]^d."""
    if n < 1:
        raise ValueError(f"recall needs n >= 1, got {n}")
    if flow.base.kind != "uniform":
        raise ValueError("recall is defined for the uniform base only")
    pool = _conditioning_states(cs, rng, n_states, states)
    actions, feats = _rejection_dataset(cs, n, rng, pool, max_attempts)
    hits = 0
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        f = None if feats is None else feats[lo:hi]
        with flow.tape.no_grad():
            z, _ = flow.inverse(actions[lo:hi], f)
        hits += int(np.count_nonzero(np.all(np.abs(z.data) <= 1.0, axis=1)))
    return hits / n


def flow_quality_report(flow: fl.FlowModel, cs: cn.ConstraintSet,
                        rng: np.random.Generator, n: int = 100_000,
                        states=None, n_states: int = 32) -> FlowQualityReport:
    """Accuracy always; recall and F1 only in uniform-base mode."""
    acc = accuracy(flow, cs, n, rng, states=states, n_states=n_states)
    rec = f1 = None
    if flow.base.kind == "uniform":
        rec = recall(flow, cs, n, rng, states=states, n_states=n_states)
        f1 = f1_score(acc, rec)
    return FlowQualityReport(accuracy=acc, recall=rec, f1=f1, n_samples=n,
                             constraint_id=cs.id, n_states=n_states)


def cv_stats(cv_pre) -> tuple[float, float]:
    """(violation count %, mean violation magnitude over violating steps)."""
    arr = np.asarray(cv_pre, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("empty run log")
    viol = arr > 0.0
    pct = 100.0 * np.count_nonzero(viol) / arr.size
    mag = float(arr[viol].mean()) if viol.any() else 0.0
    return pct, mag


# -- standard-flow comparison ----------------------------------------------------


@dataclass
class ComparisonResult:
    cv_report: FlowQualityReport
    standard_report: FlowQualityReport
    rows: list
    cv_model: fl.FlowModel
    standard_model: fl.FlowModel
    csv_path: str | None


def _write_comparison(outdir: str, rows: list[dict]) -> str:
    path = os.path.join(outdir, "comparison.csv")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(",".join(COMPARISON_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float)
                              else str(row[k]) for k in COMPARISON_COLUMNS) + "\n")
    os.replace(tmp, path)
    return path


def compare_standard_flow(cs: cn.ConstraintSet, config: ft.FlowTrainConfig,
                          outdir: str | None = None,
                          metrics_every: int | None = None,
                          metric_samples: int = 20_000,
                          dataset_size: int = 20_000,
                          mollify: float = 50.0) -> ComparisonResult:
    """Train the violation-penalty flow and a maximum-likelihood flow on
    rejection-sampled feasible actions under the same epoch/batch budget.

    Both arms share the initialization seed and each epoch-grid evaluation
    reuses one rng stream keyed by the epoch index, so the epoch-0 rows are
    identical by construction.
    """
    if config.base != "uniform":
        raise ValueError("flow comparison requires base='uniform'")
    if metrics_every is None:
        metrics_every = max(1, config.epochs // 20)
    schedule = set(range(0, config.epochs, metrics_every)) | {config.epochs}
    pool = _conditioning_states(
        cs, derived_rng(config.seed, "comparison-states"), 32, None)
    rows: list[dict] = []

    def eval_arm(arm: str, epoch: int, model: fl.FlowModel):
        r = derived_rng(config.seed, f"comparison-metrics-{epoch}")
        acc = accuracy(model, cs, metric_samples, r, states=pool)
        rec = recall(model, cs, metric_samples, r, states=pool)
        rows.append({"epoch": epoch, "arm": arm, "accuracy": acc,
                     "recall": rec, "f1": f1_score(acc, rec)})

    def cv_callback(epoch: int, model: fl.FlowModel):
        if epoch in schedule:
            eval_arm("cv-flow", epoch, model)

    cv_out = ft.pretrain(config, cs=cs, state_pool=pool, on_epoch=cv_callback)

    # maximum-likelihood arm on a fixed feasible dataset
    actions, feats = _rejection_dataset(
        cs, dataset_size, derived_rng(config.seed, "comparison-data"), pool)
    tape = ad.Tape()
    std_model = fl.FlowModel(
        tape, cs.action_dim, cs.state_dim, derived_rng(config.seed, "flow-init"),
        n_layers=config.n_layers, hidden=config.hidden, clamp=config.clamp,
        squash=config.squash, base="uniform", feature_scale=cs.feature_scale)
    opt = ad.Adam(std_model.params(), lr=config.lr)
    rng_batch = derived_rng(config.seed, "comparison-mle-batch")
    last_good = [p.data.copy() for p in std_model.params()]
    for epoch in range(config.epochs):
        if epoch in schedule:
            eval_arm("standard-flow", epoch, std_model)
        idx = rng_batch.integers(0, dataset_size, size=config.batch)
        f = None if feats is None else feats[idx]
        try:
            logp = std_model.log_prob(actions[idx], f, differentiable=True,
                                      mollify=mollify)
            loss = ad.negate(ad.mean(logp))
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite likelihood loss")
            tape.backward(loss)
            opt.step()
        except FloatingPointError:
            for p, arr in zip(std_model.params(), last_good):
                p.data = arr
            tape.clear()
            break
        tape.clear()
        for p, arr in zip(std_model.params(), last_good):
            np.copyto(arr, p.data)
    eval_arm("standard-flow", config.epochs, std_model)

    rows.sort(key=lambda row: (row["epoch"], row["arm"]))
    cv_report = flow_quality_report(
        cv_out.model, cs, derived_rng(config.seed, "comparison-final"),
        n=metric_samples, states=pool)
    standard_report = flow_quality_report(
        std_model, cs, derived_rng(config.seed, "comparison-final"),
        n=metric_samples, states=pool)
    csv_path = None
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        csv_path = _write_comparison(outdir, rows)
    return ComparisonResult(cv_report=cv_report, standard_report=standard_report,
                            rows=rows, cv_model=cv_out.model,
                            standard_model=std_model, csv_path=csv_path)
