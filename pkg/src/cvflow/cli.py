"""Command-line entry point: config loading, run directories, CSV emission.

Commands mirror the library surface (flow pretraining, agent training,
metric reports, state-wise pretraining) and share one convention: every run
creates a timestamped directory under the output root holding the resolved
configuration next to its logs and checkpoints.  The output root comes from
--output-dir, the CVFLOW_OUTDIR environment variable, or ./runs, in that
order.  Repeated runs with the same seed write byte-identical CSV files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time

import numpy as np

from . import constraints as cn
from . import envs
from . import flow as fl
from . import flow_train as ft
from . import metrics as mx
from . import rl
from .seeding import derived_rng

__all__ = ["main", "RunConfig", "ConfigError", "derived_rng"]

_SECTIONS = {
    "global": {"seed", "output-dir", "constraint", "env", "lam", "eps", "base"},
    "flow-train": {"epochs", "batch", "lr", "n-layers", "hidden", "clamp",
                   "squash"},
    "agent-train": {"algo", "steps", "gamma", "tau", "alpha", "lr", "batch",
                    "learning-starts", "buffer-capacity", "hidden",
                    "eval-every", "eval-episodes", "entropy-correction",
                    "single-critic", "penalty-beta"},
    "eval": {"n-samples", "n-states", "episodes"},
}

_TRUE = {"1", "true", "on", "yes"}
_FALSE = {"0", "false", "off", "no"}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"expected on/off boolean, got {text!r}")


class RunConfig:
    """Strictly-parsed INI-style configuration (sections of key = value)."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path!r}: {exc}") from exc
        values = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, val in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(
                        f"unknown key {key!r} in section [{section}]")
                values[(section, key)] = val
        return cls(values)

    def get(self, section: str, key: str, default=None):
        return self.values.get((section, key), default)


def _first(*vals):
    for v in vals:
        if v is not None:
            return v
    return None


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig()


def _output_root(args) -> str:
    return _first(getattr(args, "output_dir", None),
                  os.environ.get("CVFLOW_OUTDIR"),
                  os.path.join(os.getcwd(), "runs"))


def _make_run_dir(root: str, command: str, seed: int) -> str:
    os.makedirs(root, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for attempt in range(1000):
        suffix = f"-{attempt}" if attempt else ""
        path = os.path.join(root, f"{command}-{stamp}-seed{seed}{suffix}")
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            continue
    raise OSError(f"could not allocate a run directory under {root!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def _write_resolved(run_dir: str, sections: dict) -> str:
    path = os.path.join(run_dir, "config.resolved")
    lines = []
    for section in sorted(sections):
        lines.append(f"[{section}]")
        for key in sorted(sections[section]):
            lines.append(f"{key} = {_fmt(sections[section][key])}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path


# -- train-flow ---------------------------------------------------------------------


def cmd_train_flow(args) -> int:
    cfg = _load_config(args)
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    constraint = _first(args.constraint, cfg.get("global", "constraint"))
    if constraint is None:
        raise ConfigError("train-flow needs --constraint (or a config entry)")
    base = _first(args.base, cfg.get("global", "base"), "gaussian")
    lam = float(_first(args.lam, cfg.get("global", "lam"), cn.LAMBDA_DEFAULT))
    eps = float(_first(args.eps, cfg.get("global", "eps"), cn.EPS_DEFAULT))
    epochs = int(_first(args.epochs, cfg.get("flow-train", "epochs"), 3000))
    batch = int(_first(args.batch, cfg.get("flow-train", "batch"), 512))
    lr = float(_first(args.lr, cfg.get("flow-train", "lr"), 1e-3))
    n_layers = int(_first(cfg.get("flow-train", "n-layers"), 6))
    hidden = int(_first(cfg.get("flow-train", "hidden"), 64))
    clamp = float(_first(cfg.get("flow-train", "clamp"), 2.0))
    squash = _parse_bool(_first(cfg.get("flow-train", "squash"), "on"))

    ftc = ft.FlowTrainConfig(epochs=epochs, batch=batch, lr=lr, lam=lam,
                             eps=eps, constraint=constraint, base=base,
                             seed=seed, n_layers=n_layers, hidden=hidden,
                             clamp=clamp, squash=squash)
    root = _output_root(args)
    run_dir = _make_run_dir(root, "train-flow", seed)
    _write_resolved(run_dir, {
        "global": {"seed": seed, "constraint": constraint, "base": base,
                   "lam": lam, "eps": eps, "output-dir": root},
        "flow-train": {"epochs": epochs, "batch": batch, "lr": lr,
                       "n-layers": n_layers, "hidden": hidden, "clamp": clamp,
                       "squash": squash},
    })
    result = ft.pretrain(ftc, outdir=run_dir)
    status = "halted on non-finite loss" if result.halted else "completed"
    final_acc = result.log[-1]["accuracy"] if result.log else float("nan")
    print(f"run dir: {run_dir}")
    print(f"train-flow {status}: epochs={len(result.log)} "
          f"batch-accuracy={final_acc}")
    return 0


# -- train-agent --------------------------------------------------------------------


def _resolve_task(args, cfg):
    """(env, cs, features_fn, features_batch_fn) for agent commands."""
    env_id = _first(getattr(args, "env", None), cfg.get("global", "env"))
    if env_id is None:
        raise ConfigError("an environment id is required (--env)")
    constraint = _first(getattr(args, "constraint", None),
                        cfg.get("global", "constraint"))
    statewise_path = getattr(args, "statewise", None)
    if statewise_path:
        w_model = ft.StatewiseConstraintModel.load(statewise_path)
        env = envs.make_env(env_id)
        cs = cn.catalog_lookup(
            f"linear-statewise({w_model.n_costs},{w_model.action_dim})")

        def features_fn(s):
            return w_model.features(env, s)

        def features_batch_fn(states):
            return w_model.features_batch(env, states)

        return env, cs, features_fn, features_batch_fn
    env = envs.make_env(env_id, constraint=constraint)
    cs_id = _first(constraint, env.constraint_id)
    if cs_id is None:
        raise ConfigError(
            f"environment {env_id!r} carries no constraint; pass --constraint "
            "or --statewise")
    return env, cn.catalog_lookup(cs_id), None, None


def cmd_train_agent(args) -> int:
    cfg = _load_config(args)
    algo = _first(args.algo, cfg.get("agent-train", "algo"))
    if algo not in ("sac-cvflow", "ddpg-cvflow", "sac-proj"):
        raise ConfigError(
            f"algo must be one of sac-cvflow, ddpg-cvflow, sac-proj; got {algo!r}")
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    env, cs, features_fn, features_batch_fn = _resolve_task(args, cfg)

    def agent_key(key, default):
        return _first(getattr(args, key.replace("-", "_"), None),
                      cfg.get("agent-train", key), default)

    acfg = rl.AgentConfig(
        steps=int(agent_key("steps", 20_000)),
        gamma=float(agent_key("gamma", 0.99)),
        tau=float(agent_key("tau", 0.005)),
        alpha=float(agent_key("alpha", 0.2)),
        lr=float(agent_key("lr", 3e-4)),
        batch=int(agent_key("batch", 256)),
        learning_starts=int(agent_key("learning-starts", 1000)),
        buffer_capacity=int(agent_key("buffer-capacity", 100_000)),
        hidden=int(agent_key("hidden", 64)),
        eval_every=int(agent_key("eval-every", 1000)),
        eval_episodes=int(agent_key("eval-episodes", 5)),
        seed=seed,
        entropy_correction=_parse_bool(agent_key("entropy-correction", "on")),
        single_critic=_parse_bool(agent_key("single-critic", "off")),
        penalty_beta=float(agent_key("penalty-beta", 1.0)),
    )
    root = _output_root(args)
    run_dir = _make_run_dir(root, "train-agent", seed)
    _write_resolved(run_dir, {
        "global": {"seed": seed, "env": env.id, "constraint": cs.id,
                   "output-dir": root},
        "agent-train": {
            "algo": algo, "steps": acfg.steps, "gamma": acfg.gamma,
            "tau": acfg.tau, "alpha": acfg.alpha, "lr": acfg.lr,
            "batch": acfg.batch, "learning-starts": acfg.learning_starts,
            "buffer-capacity": acfg.buffer_capacity, "hidden": acfg.hidden,
            "eval-every": acfg.eval_every, "eval-episodes": acfg.eval_episodes,
            "entropy-correction": acfg.entropy_correction,
            "single-critic": acfg.single_critic,
            "penalty-beta": acfg.penalty_beta,
        },
    })

    if algo == "sac-proj":
        result = rl.train_baseline_sproj(env, cs, acfg,
                                         features_fn=features_fn,
                                         outdir=run_dir)
    else:
        if not args.flow:
            raise ConfigError(f"{algo} requires --flow <checkpoint>")
        flow = fl.load_checkpoint(args.flow, action_dim=env.action_dim,
                                  state_dim=cs.state_dim)
        if algo == "sac-cvflow":
            result = rl.train_sac(env, flow, cs, acfg,
                                  features_fn=features_fn, outdir=run_dir)
        else:
            result = rl.train_ddpg(env, flow, cs, acfg,
                                   features_fn=features_fn,
                                   features_batch_fn=features_batch_fn,
                                   outdir=run_dir)
    t = result.tracker
    print(f"run dir: {run_dir}")
    print(f"{algo} finished: steps={t.steps} episodes={t.episodes} "
          f"mean-return={t.mean_return} cv-count-pct={t.cv_count_pct} "
          f"violation-episodes={t.violation_episodes}")
    return 0


# -- evaluation commands ----------------------------------------------------------


def cmd_eval_flow(args) -> int:
    cfg = _load_config(args)
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    constraint = _first(args.constraint, cfg.get("global", "constraint"))
    if constraint is None:
        raise ConfigError("eval-flow needs --constraint")
    cs = cn.catalog_lookup(constraint)
    flow = fl.load_checkpoint(args.flow, action_dim=cs.action_dim,
                              state_dim=cs.state_dim)
    n = int(_first(args.n, cfg.get("eval", "n-samples"), 100_000))
    n_states = int(_first(cfg.get("eval", "n-states"), 32))
    rep = mx.flow_quality_report(flow, cs, derived_rng(seed, "eval-flow"),
                                 n=n, n_states=n_states)
    root = _output_root(args)
    run_dir = _make_run_dir(root, "eval-flow", seed)
    _write_resolved(run_dir, {
        "global": {"seed": seed, "constraint": constraint,
                   "output-dir": root},
        "eval": {"n-samples": n, "n-states": n_states},
    })
    path = os.path.join(run_dir, "flow_report.csv")
    with open(path, "w") as fh:
        fh.write("accuracy,recall_uniform_only,f1,n_samples,constraint,n_states\n")
        rec = "" if rep.recall is None else repr(rep.recall)
        f1 = "" if rep.f1 is None else repr(rep.f1)
        fh.write(f"{rep.accuracy!r},{rec},{f1},{rep.n_samples},"
                 f"{rep.constraint_id},{rep.n_states}\n")
    print(f"run dir: {run_dir}")
    print(f"accuracy={rep.accuracy} recall={rep.recall} f1={rep.f1} n={n}")
    return 0


def cmd_eval_agent(args) -> int:
    cfg = _load_config(args)
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    algo, policy, _ = rl.load_agent(args.agent)
    env, cs, features_fn, _batch_fn = _resolve_task(args, cfg)
    flow = None
    if algo in ("sac-cvflow", "ddpg-cvflow"):
        if not args.flow:
            raise ConfigError(f"{algo} evaluation requires --flow <checkpoint>")
        flow = fl.load_checkpoint(args.flow, action_dim=env.action_dim,
                                  state_dim=cs.state_dim)
    episodes = int(_first(args.episodes, cfg.get("eval", "episodes"), 5))
    act = rl.greedy_act_fn(algo, policy, flow, cs, features_fn)
    rets = rl.evaluate(env, act, episodes, derived_rng(seed, "eval-agent"))
    root = _output_root(args)
    run_dir = _make_run_dir(root, "eval-agent", seed)
    _write_resolved(run_dir, {
        "global": {"seed": seed, "env": env.id, "constraint": cs.id,
                   "output-dir": root},
        "eval": {"episodes": episodes},
    })
    path = os.path.join(run_dir, "eval.csv")
    with open(path, "w") as fh:
        fh.write("episode,return\n")
        for i, ret in enumerate(rets):
            fh.write(f"{i},{ret!r}\n")
    print(f"run dir: {run_dir}")
    print(f"{algo} eval: episodes={episodes} mean-return={float(np.mean(rets))}")
    return 0


# -- statewise pretraining -----------------------------------------------------------


def cmd_pretrain_statewise(args) -> int:
    cfg = _load_config(args)
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    env_id = _first(args.env, cfg.get("global", "env"))
    if env_id is None:
        raise ConfigError("pretrain-statewise needs --env")
    env = envs.make_env(env_id)
    ftc = ft.FlowTrainConfig(
        epochs=int(_first(args.epochs, cfg.get("flow-train", "epochs"), 3000)),
        batch=int(_first(args.batch, cfg.get("flow-train", "batch"), 512)),
        lr=float(_first(args.lr, cfg.get("flow-train", "lr"), 1e-3)),
        lam=float(_first(args.lam, cfg.get("global", "lam"), cn.LAMBDA_DEFAULT)),
        eps=float(_first(args.eps, cfg.get("global", "eps"), cn.EPS_DEFAULT)),
        base=_first(args.base, cfg.get("global", "base"), "gaussian"),
        seed=seed)
    root = _output_root(args)
    run_dir = _make_run_dir(root, "pretrain-statewise", seed)
    _write_resolved(run_dir, {
        "global": {"seed": seed, "env": env_id, "base": ftc.base,
                   "lam": ftc.lam, "eps": ftc.eps, "output-dir": root},
        "flow-train": {"epochs": ftc.epochs, "batch": ftc.batch, "lr": ftc.lr},
    })
    result = ft.pretrain_statewise(env, args.rollout_steps, ftc,
                                   outdir=run_dir, fit_epochs=args.fit_epochs)
    rep = result.fit_report
    print(f"run dir: {run_dir}")
    print(f"statewise fit: transitions={rep.transitions} "
          f"val-mse {rep.initial_val_mse} -> {rep.final_val_mse}")
    return 0


# -- report -------------------------------------------------------------------------


def _read_runlog_last(path: str) -> dict | None:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else None


def cmd_report(args) -> int:
    root = args.runs
    if not os.path.isdir(root):
        raise ConfigError(f"--runs {root!r} is not a directory")
    rows = []
    for name in sorted(os.listdir(root)):
        run_dir = os.path.join(root, name)
        runlog = os.path.join(run_dir, "runlog.csv")
        if not os.path.isdir(run_dir) or not os.path.exists(runlog):
            continue
        last = _read_runlog_last(runlog)
        if last is None:
            print(f"skipping {name}: empty runlog", file=sys.stderr)
            continue
        env_id, algo = "?", "?"
        resolved = os.path.join(run_dir, "config.resolved")
        if os.path.exists(resolved):
            parser = configparser.ConfigParser()
            parser.read(resolved)
            env_id = parser.get("global", "env", fallback="?")
            algo = parser.get("agent-train", "algo", fallback="?")
        rows.append([name, env_id, algo, last["eval_return"],
                     last["cv_count_pct"], last["cv_magnitude"]])
    if not rows:
        raise ConfigError(f"no run directories with runlog.csv under {root!r}")
    path = os.path.join(root, "report.csv")
    with open(path, "w") as fh:
        fh.write("run_id,env,algo,final_return,cv_count_pct,cv_magnitude\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    print(f"report: {path} ({len(rows)} runs)")
    return 0


# -- sample --------------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    seed = int(_first(args.seed, cfg.get("global", "seed"), 0))
    constraint = _first(args.constraint, cfg.get("global", "constraint"))
    if constraint is None:
        raise ConfigError("sample needs --constraint")
    cs = cn.catalog_lookup(constraint)
    flow = fl.load_checkpoint(args.flow, action_dim=cs.action_dim,
                              state_dim=cs.state_dim)
    n = args.n
    if n < 0:
        raise ConfigError(f"sample count must be >= 0, got {n}")
    rng = derived_rng(seed, "sample")
    d = cs.action_dim
    header = ([f"z{i + 1}" for i in range(d)] + [f"a{i + 1}" for i in range(d)]
              + ["cv"])
    print(",".join(header))
    feasible = 0
    if n:
        z = flow.base.sample(rng, n)
        feats = (None if cs.state_dim == 0
                 else cn.state_sampler(cs.id, rng, n))
        with flow.tape.no_grad():
            a, _ = flow.forward(z, feats)
        cvs = cn.cv(a.data, feats, cs)
        feasible = int(np.count_nonzero(cvs == 0.0))
        for i in range(n):
            cells = [repr(float(v)) for v in z[i]]
            cells += [repr(float(v)) for v in a.data[i]]
            cells.append(repr(float(cvs[i])))
            print(",".join(cells))
    acc = feasible / n if n else float("nan")
    print(f"# accuracy={acc!r} n={n}")
    return 0


# -- parser --------------------------------------------------------------------------


def _add_common(p, *, config=True, seed=True, outdir=True):
    if config:
        p.add_argument("--config", help="INI config file")
    if seed:
        p.add_argument("--seed", type=int, default=None)
    if outdir:
        p.add_argument("--output-dir", default=None,
                       help="output root (default: $CVFLOW_OUTDIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cvflow",
        description="Constraint-respecting flow training and latent-space RL.")
    sub = p.add_subparsers(dest="command", required=True)

    tf = sub.add_parser("train-flow", help="pretrain a flow on a constraint")
    _add_common(tf)
    tf.add_argument("--constraint", default=None)
    tf.add_argument("--base", default=None, choices=(None, "gaussian", "uniform"))
    tf.add_argument("--lam", type=float, default=None)
    tf.add_argument("--eps", type=float, default=None)
    tf.add_argument("--epochs", type=int, default=None)
    tf.add_argument("--batch", type=int, default=None)
    tf.add_argument("--lr", type=float, default=None)
    tf.set_defaults(func=cmd_train_flow)

    ta = sub.add_parser("train-agent", help="train an agent")
    _add_common(ta)
    ta.add_argument("--algo", default=None,
                    choices=(None, "sac-cvflow", "ddpg-cvflow", "sac-proj"))
    ta.add_argument("--env", default=None)
    ta.add_argument("--flow", default=None, help="flow checkpoint path")
    ta.add_argument("--statewise", default=None,
                    help="state-wise constraint checkpoint path")
    ta.add_argument("--constraint", default=None)
    ta.add_argument("--steps", type=int, default=None)
    ta.add_argument("--alpha", type=float, default=None)
    ta.add_argument("--learning-starts", type=int, default=None)
    ta.add_argument("--eval-every", type=int, default=None)
    ta.add_argument("--entropy-correction", default=None,
                    choices=(None, "on", "off"))
    ta.add_argument("--single-critic", default=None, choices=(None, "on", "off"))
    ta.add_argument("--penalty-beta", type=float, default=None)
    ta.set_defaults(func=cmd_train_agent)

    ef = sub.add_parser("eval-flow", help="flow quality report")
    _add_common(ef)
    ef.add_argument("--flow", required=True)
    ef.add_argument("--constraint", default=None)
    ef.add_argument("--n", type=int, default=None)
    ef.set_defaults(func=cmd_eval_flow)

    ea = sub.add_parser("eval-agent", help="greedy evaluation episodes")
    _add_common(ea)
    ea.add_argument("--agent", required=True)
    ea.add_argument("--flow", default=None)
    ea.add_argument("--statewise", default=None)
    ea.add_argument("--env", default=None)
    ea.add_argument("--constraint", default=None)
    ea.add_argument("--episodes", type=int, default=None)
    ea.set_defaults(func=cmd_eval_agent)

    ps = sub.add_parser("pretrain-statewise",
                        help="fit state-wise constraints, then a flow")
    _add_common(ps)
    ps.add_argument("--env", default=None)
    ps.add_argument("--rollout-steps", type=int, default=2000)
    ps.add_argument("--fit-epochs", type=int, default=60)
    ps.add_argument("--base", default=None, choices=(None, "gaussian", "uniform"))
    ps.add_argument("--lam", type=float, default=None)
    ps.add_argument("--eps", type=float, default=None)
    ps.add_argument("--epochs", type=int, default=None)
    ps.add_argument("--batch", type=int, default=None)
    ps.add_argument("--lr", type=float, default=None)
    ps.set_defaults(func=cmd_pretrain_statewise)

    rp = sub.add_parser("report", help="aggregate run directories")
    rp.add_argument("--runs", required=True)
    rp.set_defaults(func=cmd_report)

    sm = sub.add_parser("sample", help="print flow samples with violations")
    _add_common(sm, outdir=False)
    sm.add_argument("--flow", required=True)
    sm.add_argument("--constraint", default=None)
    sm.add_argument("--n", type=int, default=5)
    sm.set_defaults(func=cmd_sample)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
