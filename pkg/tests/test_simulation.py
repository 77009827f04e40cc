from dataclasses import replace

import numpy as np
import pytest

from gelsurv import simulation
from gelsurv.errors import NumericalError
from gelsurv.inference import weak_id_f
from gelsurv.nuisance import LearnerSpec
from gelsurv.pipeline import EstimatorConfig, prepare
from gelsurv.simulation import (
    DgpSpec,
    ReplicateRecord,
    _aggregate,
    _censor_times,
    _draw,
    _structure,
    calibrate_tau,
    gen_dataset,
    monte_carlo,
)

LINEAR = EstimatorConfig(learner=LearnerSpec(kind="linear"), kernel_order=2,
                         bandwidth_constant=4.0)


class TestDgpSpec:
    @pytest.mark.parametrize("kw", [dict(case=5), dict(h2=1.0), dict(censoring_rate=1.0),
                                    dict(theta=0.5), dict(nuisance_shape="cubic"), dict(n=1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DgpSpec(**kw)

    def test_case_probabilities_sum_to_one(self):
        for probs in simulation.CASES.values():
            assert sum(probs) == pytest.approx(1.0)


class TestGenDataset:
    @pytest.mark.parametrize("shape", ["linear", "nonlinear"])
    def test_no_censoring(self, shape):
        spec = DgpSpec(n=500, m=6, nuisance_shape=shape, censoring_rate=None, seed=1)
        ds, beta0 = gen_dataset(spec)
        assert beta0 == 0.4
        np.testing.assert_array_equal(ds.delta, 1.0)
        t, *_ = _draw(spec, _structure(spec), spec.n, 0)
        np.testing.assert_array_equal(ds.y, t)

    def test_censoring_shares_latent_draws(self):
        spec = DgpSpec(n=800, m=4, seed=2)
        ds_c, _ = gen_dataset(spec)
        ds_u, _ = gen_dataset(replace(spec, censoring_rate=None))
        assert np.all(ds_c.y <= ds_u.y)
        obs = ds_c.delta == 1
        np.testing.assert_array_equal(ds_c.y[obs], ds_u.y[obs])
        np.testing.assert_array_equal(ds_c.a, ds_u.a)

    def test_deterministic(self):
        spec = DgpSpec(n=300, m=7, seed=9)
        a, _ = gen_dataset(spec)
        b, _ = gen_dataset(spec)
        for name in ("y", "delta", "a", "z", "x"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        c, _ = gen_dataset(replace(spec, seed=10))
        assert not np.array_equal(a.y, c.y)

    def test_case1_valid_instruments(self):
        st = _structure(DgpSpec(m=50, case=1, seed=3))
        np.testing.assert_array_equal(st.xi_y, 0.0)

    def test_case3_inside(self):
        st = _structure(DgpSpec(m=200, case=3, seed=4))
        invalid = st.xi_y != 0
        assert invalid.mean() > 0.8
        assert not np.any(st.xi_y[invalid] == st.xi_a[invalid] / 2)
        assert abs(np.corrcoef(st.xi_y[invalid], st.xi_a[invalid])[0, 1]) < 0.25
        assert np.std(st.xi_y[invalid]) == pytest.approx(np.sqrt(0.4 * 0.8), rel=0.2)

    def test_case4_correlated_pleiotropy(self):
        st = _structure(DgpSpec(m=200, case=4, seed=5))
        invalid = st.xi_y != 0
        np.testing.assert_array_equal(st.xi_y[invalid], st.xi_a[invalid] / 2)

    def test_cases_share_every_other_stream(self):
        base = DgpSpec(n=400, m=8, seed=6, censoring_rate=None)
        d1, _ = gen_dataset(replace(base, case=1))
        d4, _ = gen_dataset(replace(base, case=4))
        np.testing.assert_array_equal(d1.a, d4.a)
        np.testing.assert_array_equal(d1.z, d4.z)
        np.testing.assert_array_equal(d1.x, d4.x)
        assert not np.array_equal(d1.y, d4.y)

    def test_nonlinear_first_instruments_depend_on_x(self):
        ds, _ = gen_dataset(DgpSpec(n=4000, m=8, censoring_rate=None, seed=7))
        r = np.corrcoef(ds.z[:, 2], ds.x[:, 0] + ds.x[:, 1])[0, 1]
        assert r > 0.9
        assert abs(np.corrcoef(ds.z[:, 6], ds.x[:, 0])[0, 1]) < 0.1

    def test_theta_changes_only_with_mu(self):
        base = DgpSpec(n=300, m=5, seed=8, censoring_rate=None, nuisance_shape="linear")
        d0, _ = gen_dataset(base)
        d4, _ = gen_dataset(replace(base, theta=0.4))
        d4b, _ = gen_dataset(replace(base, theta=0.4, design_seed=1))
        assert not np.array_equal(d0.a, d4.a)
        assert not np.array_equal(d4.a, d4b.a)
        np.testing.assert_array_equal(d0.z, d4.z)


class TestCalibration:
    def test_target_rate(self):
        ds, _ = gen_dataset(DgpSpec(n=10000, m=10, seed=11))
        assert 0.38 <= 1 - ds.delta.mean() <= 0.42

    def test_small_target(self):
        spec = DgpSpec(n=10000, m=5, censoring_rate=0.01, seed=12)
        tau = calibrate_tau(spec)
        assert tau > calibrate_tau(replace(spec, censoring_rate=0.4))
        ds, _ = gen_dataset(spec)
        assert 1 - ds.delta.mean() < 0.02

    def test_monotone_in_tau(self):
        spec = DgpSpec(n=5000, m=5, seed=13)
        t, *_, v = _draw(spec, _structure(spec), spec.n, 0)
        rates = [np.mean(_censor_times(v, tau) < t) for tau in np.linspace(-6, 6, 25)]
        assert np.all(np.diff(rates) <= 0)

    def test_unreachable(self):
        with pytest.raises(NumericalError, match="achievable"):
            calibrate_tau(DgpSpec(n=10, m=2, censoring_rate=1e-7, seed=1), tol=1e-9)


class TestHeteroscedasticity:
    def test_f_exceeds_threshold(self):
        hits = 0
        for s in range(10):
            ds, _ = gen_dataset(DgpSpec(n=10000, m=20, nuisance_shape="linear",
                                        censoring_rate=None, seed=500 + s))
            fitted = prepare(ds, LINEAR)
            hits += weak_id_f(fitted.ds, fitted.bundle).f_stat > 2
        assert hits >= 8


class TestMonteCarlo:
    def test_identical_seeds_zero_sd(self):
        spec = DgpSpec(n=400, m=3, nuisance_shape="linear", seed=20)
        res = monte_carlo(spec, 2, LINEAR, seed_stride=0)
        (row,) = res.rows
        assert row.sd == 0.0 and row.n_ok == 2
        assert row.label == "LR_ET"

    def test_rows_per_label(self):
        spec = DgpSpec(n=400, m=3, nuisance_shape="linear", seed=21)
        res = monte_carlo(spec, 3, replace(LINEAR, families=("EL", "ET", "CUE")))
        assert [r.label for r in res.rows] == ["LR_EL", "LR_ET", "LR_CUE"]
        for r in res.rows:
            assert 0 <= r.cp <= 1 and r.sd >= 0
            assert r.reject_rate is not None

    def test_aggregate_hand_values(self):
        recs = [
            ReplicateRecord(0, 0, "X", beta_hat=0.5, se=0.1, covered=True, overid_p=0.01),
            ReplicateRecord(1, 1, "X", beta_hat=0.3, se=0.3, covered=False, overid_p=0.5),
            ReplicateRecord(2, 2, "X", error="NumericalError: boom"),
        ]
        row = _aggregate("X", recs, 0.4, 0.05)
        assert row.bias == pytest.approx(0.0, abs=1e-12)
        assert row.sd == pytest.approx(np.sqrt(0.02))
        assert row.se == pytest.approx(0.2)
        assert row.cp == 0.5 and row.reject_rate == 0.5
        assert (row.n_ok, row.n_failed) == (2, 1)

    def test_failures_abort(self, monkeypatch):
        calls = []

        def flaky(ds, config):
            calls.append(1)
            if len(calls) % 3 == 0:
                raise NumericalError("synthetic failure")
            return real(ds, config)

        real = simulation.run_pipeline
        monkeypatch.setattr(simulation, "run_pipeline", flaky)
        spec = DgpSpec(n=300, m=3, nuisance_shape="linear", seed=22)
        with pytest.raises(NumericalError, match="replicates failed"):
            monte_carlo(spec, 6, LINEAR)
        calls.clear()
        res = monte_carlo(spec, 6, LINEAR, max_failure_rate=0.5)
        assert res.rows[0].n_failed == 2 and res.rows[0].n_ok == 4

    def test_reps_minimum(self):
        with pytest.raises(ValueError):
            monte_carlo(DgpSpec(), 1, LINEAR)

    def test_closed_form_uncensored(self):
        # one instrument: with several, the random-sign slopes cancel in the pooled sum
        spec = DgpSpec(n=4000, m=1, nuisance_shape="linear", censoring_rate=None, seed=700)
        res = monte_carlo(spec, 100, replace(LINEAR, estimator="closed_form"))
        (row,) = res.rows
        assert row.label == "closed_form"
        assert abs(row.bias) < 5.0
