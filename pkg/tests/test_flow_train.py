"""Flow pretraining tests: the loss against an independent Monte-Carlo oracle,
training dynamics, halting behavior, and the state-wise fitting pipeline."""

import math

import numpy as np
import pytest

import cvflow.autodiff as ad
import cvflow.constraints as cn
import cvflow.envs as ev
import cvflow.flow as fl
import cvflow.flow_train as ft


def oracle_ball_cv(a):
    return np.maximum(np.sum(a * a, axis=1) - 0.05, 0.0)


def oracle_squash_logdet(z):
    return np.sum(2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z)), axis=1)


def fresh_model(cs, seed=0, **kw):
    tape = ad.Tape()
    return fl.FlowModel(tape, cs.action_dim, cs.state_dim,
                        np.random.default_rng(seed),
                        feature_scale=cs.feature_scale, **kw)


# -- loss vs oracle -------------------------------------------------------------


def test_flow_loss_matches_monte_carlo_oracle_identity_model():
    cs = cn.catalog_lookup("R+L2")
    td = cn.TargetDensity(lam=1000.0)
    model = fresh_model(cs, n_layers=4, hidden=16)
    z = np.random.default_rng(1).standard_normal((10_000, 2))
    loss = ft.flow_loss(model, None, z, cs, td)
    # identity-initialized model: a = tanh(z), logdet = squash term only
    want = np.mean(1000.0 * oracle_ball_cv(np.tanh(z)) - oracle_squash_logdet(z))
    assert abs(float(loss.data) - want) < 1e-8
    model.tape.clear()


def test_flow_loss_matches_oracle_perturbed_model():
    cs = cn.catalog_lookup("R+L2")
    td = cn.TargetDensity(lam=1000.0)
    model = fresh_model(cs, seed=3, n_layers=4, hidden=16)
    prng = np.random.default_rng(4)
    for p in model.params():
        p.data = p.data + prng.normal(scale=0.1, size=p.data.shape)
    z = np.random.default_rng(5).standard_normal((2048, 2))
    loss = ft.flow_loss(model, None, z, cs, td)
    with model.tape.no_grad():
        a, logdet = model.forward(z)
    want = np.mean(1000.0 * oracle_ball_cv(a.data) - logdet.data.ravel())
    assert abs(float(loss.data) - want) < 1e-8
    model.tape.clear()


def test_flow_loss_lambda_zero_is_pure_logdet_term():
    cs = cn.catalog_lookup("R+L2")
    td = cn.TargetDensity(lam=0.0)
    model = fresh_model(cs, seed=6, n_layers=2, hidden=8)
    z = np.random.default_rng(7).standard_normal((256, 2))
    loss = ft.flow_loss(model, None, z, cs, td)
    with model.tape.no_grad():
        _, logdet = model.forward(z)
    assert abs(float(loss.data) + float(np.mean(logdet.data))) < 1e-12
    model.tape.clear()


def test_flow_loss_feasible_samples_contribute_only_logdet():
    # the squash keeps outputs inside the box, so the box family is never
    # violated and the penalty term vanishes identically
    cs = cn.catalog_lookup("box(2)")
    td = cn.TargetDensity(lam=1000.0)
    model = fresh_model(cs, seed=8, n_layers=2, hidden=8)
    z = np.random.default_rng(9).standard_normal((512, 2))
    loss = ft.flow_loss(model, None, z, cs, td)
    with model.tape.no_grad():
        _, logdet = model.forward(z)
    assert abs(float(loss.data) + float(np.mean(logdet.data))) < 1e-12
    model.tape.clear()


def test_flow_loss_gradient_matches_finite_differences():
    cs = cn.catalog_lookup("R+L2")
    td = cn.TargetDensity(lam=50.0)
    tape = ad.Tape()
    model = fl.FlowModel(tape, 2, 0, np.random.default_rng(10),
                         n_layers=1, hidden=8)
    prng = np.random.default_rng(11)
    for p in model.params():
        p.data = p.data + prng.normal(scale=0.2, size=p.data.shape)
    z = np.random.default_rng(12).standard_normal((32, 2))
    # keep samples clear of the cv kink so finite differences are clean
    with tape.no_grad():
        a, _ = model.forward(z)
    keep = np.abs(np.sum(a.data ** 2, axis=1) - 0.05) > 1e-3
    z = z[keep]

    loss = ft.flow_loss(model, None, z, cs, td)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in model.params()]

    params = model.params()

    def f(arrs):
        for p, arr in zip(params, arrs):
            p.data = arr
        with tape.no_grad():
            return float(ft.flow_loss(model, None, z, cs, td).data)

    from helpers import central_diff_grad, grad_close
    numeric = central_diff_grad(f, [p.data.copy() for p in params])
    for got, want in zip(analytic, numeric):
        assert grad_close(got, want, rel_tol=1e-3, abs_tol=1e-6)


def test_flow_loss_nonfinite_aborts_with_diagnostics():
    cs = cn.catalog_lookup("R+L2")
    td = cn.TargetDensity(lam=np.inf)
    model = fresh_model(cs, n_layers=2, hidden=8)
    z = np.random.default_rng(13).standard_normal((64, 2))
    with pytest.raises(FloatingPointError, match="cv range"):
        ft.flow_loss(model, None, z, cs, td)


# -- pretraining ------------------------------------------------------------------


def test_pretrain_zero_epochs_returns_identity_model():
    cfg = ft.FlowTrainConfig(epochs=0, batch=32, constraint="R+L2",
                             n_layers=2, hidden=8, seed=1)
    result = ft.pretrain(cfg)
    assert result.log == [] and not result.halted
    z = np.random.default_rng(0).standard_normal((16, 2))
    a, _ = result.model.forward(z)
    assert np.allclose(a.data, np.tanh(z), atol=1e-14)


def test_pretrain_deterministic_under_seed():
    cfg = ft.FlowTrainConfig(epochs=15, batch=64, constraint="R+L2",
                             n_layers=2, hidden=8, seed=42)
    r1 = ft.pretrain(cfg)
    r2 = ft.pretrain(cfg)
    assert [row["loss"] for row in r1.log] == [row["loss"] for row in r2.log]
    assert [row["accuracy"] for row in r1.log] == [row["accuracy"] for row in r2.log]


def test_pretrain_improves_feasibility_with_smoothed_monotone_trend():
    cfg = ft.FlowTrainConfig(epochs=200, batch=128, constraint="R+L2",
                             n_layers=4, hidden=16, seed=3, lr=2e-3)
    result = ft.pretrain(cfg)
    acc = np.array([row["accuracy"] for row in result.log])
    windows = acc[: 20 * (len(acc) // 20)].reshape(-1, 20).mean(axis=1)
    infeasible = 1.0 - windows
    # smoothed infeasible fraction must trend down without material bumps
    assert infeasible[-1] < infeasible[0]
    assert np.all(np.diff(infeasible) < 0.05)
    assert acc[-20:].mean() > 0.5


def test_pretrain_halts_on_divergence_and_restores_last_good(tmp_path):
    cfg = ft.FlowTrainConfig(epochs=50, batch=32, constraint="R+L2",
                             n_layers=2, hidden=8, seed=4, lam=np.inf)
    result = ft.pretrain(cfg, outdir=str(tmp_path))
    assert result.halted
    assert result.log == []  # diverged on the very first batch
    z = np.random.default_rng(1).standard_normal((8, 2))
    a, _ = result.model.forward(z)
    assert np.allclose(a.data, np.tanh(z), atol=1e-14)  # identity preserved
    assert (tmp_path / "flow.json").exists()
    assert (tmp_path / "flowlog.csv").exists()


def test_pretrain_writes_flowlog_and_checkpoint(tmp_path):
    cfg = ft.FlowTrainConfig(epochs=5, batch=32, constraint="R+L2",
                             n_layers=2, hidden=8, seed=5)
    result = ft.pretrain(cfg, outdir=str(tmp_path))
    lines = (tmp_path / "flowlog.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,accuracy"
    assert len(lines) == 6
    loaded = fl.load_checkpoint(str(tmp_path / "flow.json"))
    z = np.random.default_rng(2).standard_normal((4, 2))
    assert np.array_equal(loaded.forward(z)[0].data,
                          result.model.forward(z)[0].data)


# -- state-wise pipeline -------------------------------------------------------------


def test_statewise_fit_recovers_ball_sensitivities():
    env = ev.make_env("ball1d")
    rng = np.random.default_rng(0)
    transitions, _ = ev.rollout(
        env, lambda s, r: r.uniform(-1, 1, size=1), 2000, rng)
    model, report = ft.fit_statewise_model(env, transitions,
                                           np.random.default_rng(1), epochs=40)
    assert report.final_val_mse < report.initial_val_mse
    # true sensitivities: cost c1 rises by BALL_STEP per unit action, c2 falls
    states = np.stack([t.s for t in transitions[:200]])
    w = model.coeffs(states)  # (n, 2, 1)
    err1 = np.abs(w[:, 0, 0] - ev.BALL_STEP) / ev.BALL_STEP
    err2 = np.abs(w[:, 1, 0] + ev.BALL_STEP) / ev.BALL_STEP
    assert err1.mean() < 0.10 and err2.mean() < 0.10


def test_statewise_degenerate_excitation_warns():
    env = ev.make_env("ball1d")
    rng = np.random.default_rng(2)
    transitions, _ = ev.rollout(env, lambda s, r: np.zeros(1), 300, rng)
    with pytest.warns(RuntimeWarning, match="ill-conditioned"):
        ft.fit_statewise_model(env, transitions, np.random.default_rng(3),
                               epochs=1, batch=256)


def test_statewise_insufficient_data_rejected():
    env = ev.make_env("ball1d")
    cfg = ft.FlowTrainConfig(epochs=1, batch=512, seed=6, n_layers=2, hidden=8)
    with pytest.raises(ValueError, match="transitions"):
        ft.pretrain_statewise(env, 100, cfg)


def test_statewise_pipeline_end_to_end(tmp_path):
    env = ev.make_env("ball1d")
    cfg = ft.FlowTrainConfig(epochs=30, batch=128, seed=7, n_layers=2,
                             hidden=16, lr=2e-3)
    result = ft.pretrain_statewise(env, 1500, cfg, outdir=str(tmp_path),
                                   fit_epochs=20)
    assert result.constraint_set.id == "linear-statewise(2,1)"
    assert result.feature_pool.shape == (1500, 4)
    assert not result.flow_result.halted
    # round-trip the sensitivity checkpoint
    loaded = ft.StatewiseConstraintModel.load(str(tmp_path / "statewise.json"))
    s = np.array([0.4, 0.6])
    assert np.array_equal(loaded.features(env, s), result.w_model.features(env, s))


def test_config_validation():
    with pytest.raises(ValueError):
        ft.FlowTrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        ft.FlowTrainConfig(batch=0)
    with pytest.raises(ValueError):
        ft.FlowTrainConfig(lr=-0.1)
