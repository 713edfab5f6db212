"""Flow-map tests: invertibility, log-det against a numeric Jacobian oracle,
density normalization by grid quadrature, and checkpoint round-trips."""

import math

import numpy as np
import pytest

import cvflow.autodiff as ad
import cvflow.flow as fl
from helpers import central_diff_grad, grad_close, numeric_jacobian


def make_model(action_dim, state_dim, seed=0, *, n_layers=4, hidden=16,
               squash=True, base="gaussian", perturb=0.0, clamp=2.0):
    tape = ad.Tape()
    rng = np.random.default_rng(seed)
    model = fl.FlowModel(tape, action_dim, state_dim, rng, n_layers=n_layers,
                         hidden=hidden, squash=squash, base=base, clamp=clamp)
    if perturb:
        # break the identity initialization so the map is nontrivial
        prng = np.random.default_rng(seed + 1)
        for p in model.params():
            p.data = p.data + prng.normal(scale=perturb, size=p.data.shape)
    return model


def squash_logdet_np(x):
    return np.sum(2.0 * (math.log(2.0) - x - np.logaddexp(0.0, -2.0 * x)), axis=1)


# -- identity initialization ---------------------------------------------------


def test_fresh_model_is_identity_up_to_squash():
    model = make_model(3, 2, squash=True)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 3))
    s = rng.normal(size=(8, 2))
    a, logdet = model.forward(z, s)
    assert np.allclose(a.data, np.tanh(z), atol=1e-14)
    assert np.allclose(logdet.data.ravel(), squash_logdet_np(z), atol=1e-12)


def test_fresh_model_without_squash_is_exact_identity():
    model = make_model(2, 0, squash=False)
    z = np.random.default_rng(2).normal(size=(5, 2))
    a, logdet = model.forward(z)
    assert np.array_equal(a.data, z)
    assert np.array_equal(logdet.data, np.zeros((5, 1)))


def test_fresh_model_inverse_is_unsquash():
    model = make_model(2, 1)
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.9, 0.9, size=(6, 2))
    s = rng.normal(size=(6, 1))
    z, logdet_inv = model.inverse(a, s)
    assert np.allclose(z.data, np.arctanh(a), atol=1e-12)
    assert np.allclose(logdet_inv.data.ravel(), -squash_logdet_np(np.arctanh(a)), atol=1e-12)


# -- d = 1 elementwise flow -----------------------------------------------------


def test_one_dim_logdet_equals_scale_output():
    model = make_model(1, 2, squash=False, perturb=0.3)
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 1))
    s = rng.normal(size=(5, 2))
    a, logdet = model.forward(z, s)
    # the affine map has constant slope exp(s0) per state, so a numeric
    # derivative recovers s0 = logdet
    for i in range(5):
        f = lambda zz: model.forward(zz.reshape(1, 1), s[i])[0].data.ravel()
        jac = numeric_jacobian(f, z[i])
        assert abs(math.log(abs(jac[0, 0])) - logdet.data[i, 0]) < 1e-6


def test_one_dim_stateless_flow_works():
    model = make_model(1, 0, squash=True, perturb=0.2)
    z = np.linspace(-1, 1, 7).reshape(-1, 1)
    a, logdet = model.forward(z)
    zz, logdet_inv = model.inverse(a.data)
    assert np.max(np.abs(zz.data - z)) < 1e-6
    assert np.max(np.abs(logdet.data + logdet_inv.data)) < 1e-8


# -- invertibility and log-det oracle -------------------------------------------


@pytest.mark.parametrize("d,k,squash", [(1, 2, True), (2, 0, True), (2, 3, False),
                                        (3, 2, True), (4, 1, False)])
def test_inverse_recovers_latent_and_logdets_cancel(d, k, squash):
    model = make_model(d, k, seed=d * 10 + k, squash=squash, perturb=0.25)
    rng = np.random.default_rng(100 + d)
    z = rng.normal(size=(20, d))
    s = rng.normal(size=(20, k)) if k else None
    a, logdet = model.forward(z, s)
    z_back, logdet_inv = model.inverse(a.data, s)
    assert np.max(np.abs(z_back.data - z)) < 1e-6
    assert np.max(np.abs(logdet.data + logdet_inv.data)) < 1e-8


@pytest.mark.parametrize("d,squash", [(1, True), (2, True), (2, False), (3, True)])
def test_logdet_matches_numeric_jacobian(d, squash):
    model = make_model(d, 2, seed=7 * d, squash=squash, perturb=0.15)
    rng = np.random.default_rng(50 + d)
    checked = 0
    while checked < 10:
        z = rng.normal(size=d)
        s = rng.normal(size=2)
        with model.tape.no_grad():
            a, logdet = model.forward(z.reshape(1, d), s)
        if squash and np.max(np.abs(a.data)) > 0.999:
            continue  # saturated tanh starves the finite-difference oracle

        def f(zz):
            with model.tape.no_grad():
                return model.forward(zz.reshape(1, d), s)[0].data.ravel()

        jac = numeric_jacobian(f, z)
        sign, want = np.linalg.slogdet(jac)
        assert sign > 0
        got = logdet.data[0, 0]
        assert abs(got - want) <= 1e-4 * max(1.0, abs(want)), (d, squash, z)
        checked += 1


def test_masks_cover_every_dimension():
    for d in (2, 3, 5):
        model = make_model(d, 0, n_layers=4)
        transformed = set()
        for cp in model.couplings:
            transformed.update(cp["tr"])
        assert transformed == set(range(d))


# -- gradients through the flow -------------------------------------------------


def test_logdet_gradient_wrt_params_matches_finite_differences():
    model = make_model(2, 1, n_layers=2, hidden=4, squash=True, perturb=0.2)
    rng = np.random.default_rng(11)
    z = rng.normal(size=(4, 2))
    s = rng.normal(size=(4, 1))
    params = model.params()
    arrays = [p.data for p in params]

    def f(arrs):
        for p, arr in zip(params, arrs):
            p.data = arr
        with model.tape.no_grad():
            _, logdet = model.forward(z, s)
        return float(logdet.data.sum())

    model.tape.clear()
    _, logdet = model.forward(z, s)
    model.tape.backward(ad.vsum(logdet))
    analytic = [p.grad.copy() for p in params]
    numeric = central_diff_grad(f, [a.copy() for a in arrays])
    for got, want in zip(analytic, numeric):
        assert grad_close(got, want, rel_tol=1e-3, abs_tol=1e-7)


def test_forward_gradient_wrt_latent_matches_finite_differences():
    model = make_model(2, 2, n_layers=2, hidden=8, squash=True, perturb=0.3)
    rng = np.random.default_rng(12)
    z = rng.normal(size=(3, 2))
    s = rng.normal(size=(3, 2))

    def f(arrs):
        with model.tape.no_grad():
            a, _ = model.forward(arrs[0], s)
        return float(a.data.sum())

    model.tape.clear()
    zv = model.tape.value(z.copy())
    a, _ = model.forward(zv, s)
    model.tape.backward(ad.vsum(ad.vsum(a, axis=-1)))
    numeric = central_diff_grad(f, [z.copy()])[0]
    assert grad_close(zv.grad, numeric, rel_tol=1e-4, abs_tol=1e-7)


# -- densities -------------------------------------------------------------------


def test_log_prob_identity_model_gaussian_base():
    model = make_model(2, 0, squash=True)
    a = np.zeros((1, 2))
    got = model.log_prob(a)
    # base density at the origin, squash logdet zero there
    assert abs(got[0] - (-math.log(2.0 * math.pi))) < 1e-12


def test_log_prob_identity_model_uniform_base_constant():
    model = make_model(2, 0, squash=False, base="uniform")
    rng = np.random.default_rng(13)
    a = rng.uniform(-0.99, 0.99, size=(50, 2))
    got = model.log_prob(a)
    assert np.allclose(got, -2.0 * math.log(2.0), atol=1e-12)


def test_density_integrates_to_one_on_grid():
    # mild perturbation keeps the density resolvable at this grid pitch
    model = make_model(2, 1, seed=21, squash=True, perturb=0.1)
    s = np.array([0.3])
    m = 200
    centers = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    cell = (2.0 / m) ** 2
    total = 0.0
    for lo in range(0, pts.shape[0], 8192):
        chunk = pts[lo:lo + 8192]
        total += np.exp(model.log_prob(chunk, s)).sum() * cell
    assert abs(total - 1.0) < 0.02


def test_base_distribution_forms():
    g = fl.BaseDistribution("gaussian", 3)
    z = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 2.0]])
    want0 = -1.5 * math.log(2 * math.pi)
    want1 = want0 - 0.5 * 6.0
    assert np.allclose(g.log_density(z), [want0, want1], atol=1e-12)

    u = fl.BaseDistribution("uniform", 2)
    rng = np.random.default_rng(0)
    draws = u.sample(rng, 1000)
    assert np.all(np.abs(draws) <= 1.0)
    ld = u.log_density(np.array([[0.5, -0.5], [1.5, 0.0]]))
    assert ld[0] == -2 * math.log(2.0) and ld[1] == -np.inf

    with pytest.raises(ValueError):
        fl.BaseDistribution("cauchy", 2)


def test_mollified_uniform_matches_hard_inside_support():
    u = fl.BaseDistribution("uniform", 2)
    tape = ad.Tape()
    # mollification bias is ~softplus(-k * distance-to-face); stay a few
    # widths inside the box so it is negligible
    z = tape.value(np.array([[0.5, -0.7], [0.0, 0.6]]))
    soft = u.log_density_value(z, mollify=50.0)
    assert np.allclose(soft.data.ravel(), -2 * math.log(2.0), atol=1e-4)
    with pytest.raises(ValueError):
        u.log_density_value(z)  # gradients need an explicit mollify rate


# -- domain errors ----------------------------------------------------------------


def test_inverse_rejects_actions_outside_squash_range():
    model = make_model(2, 0)
    with pytest.raises(ad.DomainError):
        model.inverse(np.array([[0.0, 1.0]]))


def test_forward_aborts_on_nonfinite_with_layer_index():
    model = make_model(2, 0, perturb=0.1)
    model.params()[0].data[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="layer"):
        model.forward(np.ones((1, 2)) * 0.5)


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = make_model(3, 2, seed=5, perturb=0.3)
    path = str(tmp_path / "flow.json")
    fl.save_checkpoint(model, path)
    loaded = fl.load_checkpoint(path)
    rng = np.random.default_rng(9)
    z = rng.normal(size=(16, 3))
    s = rng.normal(size=(16, 2))
    a0, ld0 = model.forward(z, s)
    a1, ld1 = loaded.forward(z, s)
    assert np.array_equal(a0.data, a1.data)
    assert np.array_equal(ld0.data, ld1.data)


def test_checkpoint_round_trip_one_dim(tmp_path):
    model = make_model(1, 3, seed=6, perturb=0.2)
    path = str(tmp_path / "flow1.json")
    fl.save_checkpoint(model, path)
    loaded = fl.load_checkpoint(path)
    z = np.linspace(-2, 2, 9).reshape(-1, 1)
    s = np.random.default_rng(1).normal(size=(9, 3))
    assert np.array_equal(model.forward(z, s)[0].data, loaded.forward(z, s)[0].data)


def test_checkpoint_dimension_and_version_checks(tmp_path):
    model = make_model(2, 1)
    path = str(tmp_path / "flow.json")
    fl.save_checkpoint(model, path)
    with pytest.raises(ValueError, match="action_dim"):
        fl.load_checkpoint(path, action_dim=3)
    with pytest.raises(ValueError, match="state_dim"):
        fl.load_checkpoint(path, state_dim=4)

    import json
    doc = json.load(open(path))
    doc["version"] = 99
    bad = str(tmp_path / "bad.json")
    json.dump(doc, open(bad, "w"))
    with pytest.raises(ValueError, match="version"):
        fl.load_checkpoint(bad)

    corrupt = str(tmp_path / "corrupt.json")
    with open(corrupt, "w") as fh:
        fh.write("{not json")
    with pytest.raises(ValueError, match="corrupt"):
        fl.load_checkpoint(corrupt)
