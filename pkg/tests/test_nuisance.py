import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from gelsurv.censoring import fit_local_km, uncensored_model
from gelsurv.data import Dataset, standardize
from gelsurv.errors import AllCensoredError, DivergenceError
from gelsurv.kernels import KernelSpec
from gelsurv.moments import build_g, build_psi
from gelsurv.nuisance import (
    ConstantPredictor,
    FeedforwardPredictor,
    LearnerSpec,
    fit_feedforward,
    fit_linear,
    fit_nuisance_bundle,
    init_params,
    load_bundle,
    loss_and_grad,
    save_bundle,
    xi_components,
)
from gelsurv.simulation import DgpSpec, gen_dataset

LINEAR = LearnerSpec(kind="linear")


class TestLinear:
    def test_exact_fit(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 3))
        y = 2.0 - 3.0 * X[:, 1]
        p = fit_linear(X, y)
        np.testing.assert_allclose(p.predict(X) - y, 0, atol=1e-10)
        np.testing.assert_allclose(p.coef, [0, -3, 0], atol=1e-10)

    def test_constant_target(self):
        rng = np.random.default_rng(1)
        p = fit_linear(rng.normal(size=(20, 2)), np.full(20, 4.5))
        np.testing.assert_allclose(p.coef, 0, atol=1e-12)
        assert p.intercept == pytest.approx(4.5)

    def test_collinear_falls_back_to_ridge(self, caplog):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(40, 1))
        X = np.hstack([x, x, rng.normal(size=(40, 1))])
        y = rng.normal(size=40)
        with caplog.at_level(logging.WARNING, logger="gelsurv.nuisance"):
            p = fit_linear(X, y)
        assert "ridge" in caplog.text
        D = np.hstack([np.ones((40, 1)), X])
        oracle = D @ (np.linalg.pinv(D) @ y)
        np.testing.assert_allclose(p.predict(X), oracle, atol=1e-6)

    def test_no_features(self):
        p = fit_linear(np.empty((5, 0)), np.arange(5.0))
        assert isinstance(p, ConstantPredictor) and p.value == 2.0


class TestFeedforward:
    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        params = init_params([2, 3, 3, 1], rng)
        params = [p + 0.1 * rng.normal(size=p.shape) for p in params]
        X = rng.normal(size=(15, 2))
        y = rng.normal(size=15)
        _, grads = loss_and_grad(params, X, y)
        h = 1e-5
        worst = 0.0
        for k, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up, _ = loss_and_grad(params, X, y)
                p[idx] = old - h
                dn, _ = loss_and_grad(params, X, y)
                p[idx] = old
                fd = (up - dn) / (2 * h)
                an = grads[k][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        assert worst < 1e-4

    def test_constant_target(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(-2, 2, size=(500, 2))
        p = fit_feedforward(X, np.full(500, -1.25), LearnerSpec())
        assert np.max(np.abs(p.predict(X) + 1.25)) < 0.05

    def test_cosine(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-2, 2, size=(5000, 1))
        p = fit_feedforward(x, np.cos(np.pi * x[:, 0]), LearnerSpec(seed=1))
        grid = np.linspace(-2, 2, 2001)[:, None]
        rmse = np.sqrt(np.mean((p.predict(grid) - np.cos(np.pi * grid[:, 0])) ** 2))
        assert rmse < 0.1

    def test_reproducible(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(300, 3))
        y = np.sin(X[:, 0]) + rng.normal(size=300)
        spec = LearnerSpec(max_epochs=30, seed=9)
        a, b = fit_feedforward(X, y, spec), fit_feedforward(X, y, spec)
        for pa, pb in zip(a.params, b.params):
            assert pa.tobytes() == pb.tobytes()
        c = fit_feedforward(X, y, replace(spec, seed=10))
        assert any(pa.tobytes() != pc.tobytes() for pa, pc in zip(a.params, c.params))

    def test_divergence(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(100, 2))
        y = 1e200 * rng.normal(size=100)
        with pytest.raises(DivergenceError, match="learning rate"):
            fit_feedforward(X, y * np.inf, LearnerSpec(max_epochs=3))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LearnerSpec(validation_fraction=0.5)
        with pytest.raises(ValueError):
            LearnerSpec(kind="forest")
        with pytest.raises(ValueError):
            LearnerSpec(width=0)


def small_dataset(n=200, m=3, censor=True, seed=0, d_x=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d_x))
    z = rng.normal(size=(n, m)) + (x[:, :1] if d_x else 0)
    a = z.sum(axis=1) + (1 + 0.5 * z[:, 0]) * rng.normal(size=n)
    t = 0.5 * a + rng.normal(size=n)
    if censor:
        c = rng.normal(0.5, 1.5, size=n)
        y, d = np.minimum(t, c), (t <= c).astype(float)
    else:
        y, d = t, np.ones(n)
    ds = Dataset(y=y, delta=d, a=a, z=z, x=x)
    return standardize(ds)[0]


class TestBundle:
    def test_residual_identities(self):
        ds = small_dataset()
        b = fit_nuisance_bundle(ds, LINEAR)
        P = b.predictors
        for j in range(ds.m):
            np.testing.assert_allclose(b.r_z[:, j], ds.z[:, j] - P[f"f{j + 1}"].predict(ds.x),
                                       atol=1e-12)
        np.testing.assert_allclose(b.r_a, ds.a - P["h1"].predict(ds.zx), atol=1e-12)
        np.testing.assert_allclose(b.r_y, ds.y - P["h2"].predict(ds.zx), atol=1e-12)
        np.testing.assert_allclose(b.h3, P["h3"].predict(ds.x), atol=1e-12)
        np.testing.assert_allclose(b.h4, P["h4"].predict(ds.x), atol=1e-12)

    def test_no_covariates(self):
        ds = small_dataset(d_x=0)
        b = fit_nuisance_bundle(ds, LINEAR)
        np.testing.assert_allclose(b.r_z, ds.z - ds.z.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(b.h4, np.mean(b.r_a**2), atol=1e-12)

    def test_linear_residual_uncorrelated_with_instruments(self):
        ds, _ = gen_dataset(DgpSpec(n=4000, m=10, nuisance_shape="linear",
                                    censoring_rate=None, seed=21))
        ds = standardize(ds)[0]
        b = fit_nuisance_bundle(ds, LINEAR)
        for j in range(ds.m):
            assert abs(np.corrcoef(b.r_a, ds.z[:, j])[0, 1]) < 3 / np.sqrt(ds.n)

    def test_outcome_independent_of_inputs(self):
        rng = np.random.default_rng(22)
        n = 4000
        ds = Dataset(y=rng.normal(size=n), delta=np.ones(n), a=rng.normal(size=n),
                     z=rng.normal(size=(n, 3)), x=rng.normal(size=(n, 2)))
        b = fit_nuisance_bundle(ds, LINEAR)
        fresh = rng.normal(size=(n, 5))
        pred = b.predictors["h2"].predict(fresh)
        y_new = rng.normal(size=n)
        r2 = 1 - np.mean((y_new - pred) ** 2) / np.var(y_new)
        assert r2 < 0.02
        assert abs(np.mean(pred) - np.mean(ds.y)) < 0.01

    def test_feedforward_bundle_seeded(self):
        ds = small_dataset(n=120)
        spec = LearnerSpec(max_epochs=20, seed=3)
        a, b = fit_nuisance_bundle(ds, spec), fit_nuisance_bundle(ds, spec)
        assert a.r_a.tobytes() == b.r_a.tobytes()
        assert a.h4.tobytes() == b.h4.tobytes()

    def test_persistence_round_trip(self, tmp_path):
        ds = small_dataset(n=120)
        for spec in (LINEAR, LearnerSpec(max_epochs=5, seed=1)):
            b = fit_nuisance_bundle(ds, spec)
            path = tmp_path / f"{spec.kind}.bin"
            save_bundle(path, b)
            assert path.read_bytes()[:8] == b"GELSURVB"
            c = load_bundle(path)
            assert c.spec == spec
            for f in ("r_z", "r_a", "r_y", "h3", "h4"):
                np.testing.assert_array_equal(getattr(c, f), getattr(b, f))
            for k, p in b.predictors.items():
                feats = ds.x if k.startswith("f") or k in ("h3", "h4") else ds.zx
                np.testing.assert_array_equal(c.predictors[k].predict(feats), p.predict(feats))
            if spec.kind == "feedforward":
                assert isinstance(c.predictors["h1"], FeedforwardPredictor)


class TestXi:
    def test_uncensored_uniform_weights(self):
        ds = small_dataset(censor=False)
        b = fit_nuisance_bundle(ds, LINEAR)
        cm = fit_local_km(ds, spec=KernelSpec(2, 1e12, 3))
        xi = xi_components(ds, b, cm)
        g0, g1 = build_g(ds, b)
        np.testing.assert_allclose(xi.xi0, np.broadcast_to(g0.mean(axis=0), g0.shape),
                                   atol=1e-12)
        np.testing.assert_allclose(xi.xi1, np.broadcast_to(g1.mean(axis=0), g1.shape),
                                   atol=1e-12)

    def test_all_censored(self):
        ds = small_dataset(censor=False)
        b = fit_nuisance_bundle(ds, LINEAR)
        dead = Dataset(y=ds.y, delta=np.zeros(ds.n), a=ds.a, z=ds.z, x=ds.x)
        with pytest.raises(AllCensoredError):
            xi_components(dead, b, uncensored_model(ds))

    def test_three_point_brute_force(self):
        ds = Dataset(y=[1.0, 2.0, 3.0], delta=[1.0, 0.0, 1.0], a=[0.0, 1.0, -1.0],
                     z=[[1.0], [-1.0], [0.5]], x=np.empty((3, 0)))
        b = fit_nuisance_bundle(ds, LINEAR)
        cm = fit_local_km(ds, conditioning=("a",), spec=KernelSpec(2, 1.0, 1), eps_g=0.05)
        xi = xi_components(ds, b, cm)
        g0, g1 = build_g(ds, b)
        # scalar double loop: Xi0[k] = (1/n) sum_i B[k, i] delta_i / G_i g0[i]
        B = cm.b_matrix()
        for k in range(3):
            s0 = s1 = 0.0
            for i in range(3):
                s0 += B[k, i] * ds.delta[i] / cm.g_hat[i] * g0[i, 0]
                s1 += B[k, i] * ds.delta[i] / cm.g_hat[i] * g1[i, 0]
            assert xi.xi0[k, 0] == pytest.approx(s0 / 3, abs=1e-14)
            assert xi.xi1[k, 0] == pytest.approx(s1 / 3, abs=1e-14)

    def test_linearity_in_beta(self):
        ds = small_dataset()
        b = fit_nuisance_bundle(ds, LINEAR)
        cm = fit_local_km(ds, spec=KernelSpec(2, 1.0, 3))
        xi = xi_components(ds, b, cm)
        np.testing.assert_allclose(xi.at(0.3) + xi.at(-1.1), 2 * xi.at(-0.4), atol=1e-12)


@pytest.mark.slow
def test_orthogonality_smoke():
    """Directional derivatives of the mean moment at the truth.

    For the orthogonal nuisances the population derivative is zero, so the
    sample derivative is indistinguishable from its own sampling noise. A
    time-dependent move of the censoring survival has a nonzero derivative.
    """
    ds, beta0 = gen_dataset(DgpSpec(n=5000, m=5, nuisance_shape="linear", seed=31))
    sds, scale = standardize(ds)
    beta = beta0 * scale.a_spread
    b = fit_nuisance_bundle(sds, LINEAR)
    cm = fit_local_km(sds, spec=KernelSpec(2, 1e12, 6))

    def psi(bundle, censoring):
        xi = xi_components(sds, bundle, censoring)
        return build_psi(sds, bundle, censoring, xi).psi(beta)

    def hotelling(plus, minus, size):
        d = (plus - minus) / (2 * size)
        dbar = d.mean(axis=0)
        return sds.n * dbar @ np.linalg.solve(np.cov(d.T), dbar)

    # smooth directions in each nuisance's own arguments: f, h3 and h4 take X,
    # h1 and h2 take (Z, X)
    rng = np.random.default_rng(0)
    zx = np.column_stack([sds.z, sds.x])
    dirs = np.array([
        np.sin(sds.x @ rng.normal(size=sds.d_x)),
        np.sin(zx @ rng.normal(size=zx.shape[1])),
        np.sin(zx @ rng.normal(size=zx.shape[1])),
        np.sin(sds.x @ rng.normal(size=sds.d_x)),
        np.sin(sds.x @ rng.normal(size=sds.d_x)),
    ])
    size = 1e-3

    def perturbed_bundle(t):
        d = t * dirs
        return replace(b, r_z=b.r_z - d[0][:, None] * np.ones(sds.m), r_a=b.r_a - d[1],
                       r_y=b.r_y - d[2], h3=b.h3 + d[3], h4=b.h4 + d[4])

    t_eta = hotelling(psi(perturbed_bundle(size), cm), psi(perturbed_bundle(-size), cm), size)
    # rescaling G by a function of the conditioning vector alone is nearly
    # orthogonal; the slope's R_A^2 term makes a^2-weighted time directions bite
    g_dir = sds.y * sds.a**2 * cm.g_hat
    t_g = hotelling(psi(b, replace(cm, g_hat=cm.g_hat + size * g_dir)),
                    psi(b, replace(cm, g_hat=cm.g_hat - size * g_dir)), size)
    crit = stats.chi2.ppf(0.999, sds.m)
    assert t_eta < crit < t_g
