"""Tests for Gaussian process regression and the kernel library."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasecast.errors import ParameterError
from phasecast.gpr import (
    KernelSpec,
    compute_kappa,
    default_bounds,
    find_prediction_discontinuity,
    gpr_predict,
    kappa_comb_spacing,
    kernel_eval,
    log_marginal_likelihood,
    optimize_hyperparams,
    periodic_coefficients,
    periodic_kernel_truncated,
)
from phasecast.measurement import LinearRecord


def per_spec(sigma2=1.0, l=1.0, f0=0.5):
    return KernelSpec(family="PER", sigma2=sigma2, length_scale=l, f0_hz=f0)


class TestKernelEval:
    def test_periodic_at_zero_lag(self):
        assert kernel_eval(per_spec(sigma2=2.5), 0.0) == pytest.approx(2.5)

    def test_periodic_full_cycle(self):
        spec = per_spec(f0=0.5)  # period 2 s
        assert kernel_eval(spec, 2.0) == pytest.approx(spec.sigma2, rel=1e-12)

    def test_long_length_scale_flattens(self):
        spec = per_spec(l=1e3)
        nu = np.linspace(0, 10, 101)
        np.testing.assert_allclose(kernel_eval(spec, nu), 1.0, atol=1e-4)

    @given(st.floats(-100, 100))
    @settings(max_examples=200)
    def test_bounded_and_even(self, nu):
        for family, extra in [
            ("PER", {}),
            ("RBF", {}),
            ("RQ", {"alpha": 1.5}),
            ("MAT32", {}),
            ("QPER", {"envelope_scale": 2.0}),
        ]:
            spec = KernelSpec(
                family=family, sigma2=1.3, length_scale=0.8, f0_hz=0.7, extra=extra
            )
            v = kernel_eval(spec, nu)
            assert v <= 1.3 + 1e-12
            assert v == pytest.approx(kernel_eval(spec, -nu), rel=1e-12)

    def test_family_validation(self):
        with pytest.raises(ParameterError):
            KernelSpec(family="BOGUS", sigma2=1.0, length_scale=1.0)
        with pytest.raises(ParameterError):
            KernelSpec(family="PER", sigma2=1.0, length_scale=1.0)  # no f0


class TestTruncatedPeriodic:
    def test_order_zero_constant_term(self):
        spec = per_spec(l=0.9)
        got = periodic_kernel_truncated(spec, 0.37, 0)
        assert got == pytest.approx(spec.sigma2 * np.exp(-1.0 / 0.9**2), rel=1e-12)

    def test_high_order_matches_closed_form(self):
        spec = per_spec(l=1.0, f0=0.7 / (2 * np.pi))  # w0 * nu = 0.7 at nu = 1
        nu = 1.0
        exact = kernel_eval(spec, nu)
        got = periodic_kernel_truncated(spec, nu, 30)
        assert abs(got - exact) < 1e-8

    def test_error_decays_monotonically(self):
        spec = per_spec(l=0.7, f0=0.3)
        nu = np.linspace(0, 3, 40)
        exact = kernel_eval(spec, nu)
        errs = [
            np.max(np.abs(periodic_kernel_truncated(spec, nu, M) - exact))
            for M in (0, 2, 4, 8, 16, 24)
        ]
        assert all(a >= b - 1e-15 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-10

    def test_coefficients_sum_to_kernel_peak(self):
        # At nu = 0 the series must reproduce R(0) = sigma2 for large M.
        p0, pj = periodic_coefficients(1.3, 40)
        assert p0 + pj.sum() == pytest.approx(1.0, abs=1e-12)

    def test_non_periodic_family_rejected(self):
        spec = KernelSpec(family="RBF", sigma2=1.0, length_scale=1.0)
        with pytest.raises(ParameterError):
            periodic_kernel_truncated(spec, 0.5, 3)


class TestPredict:
    def test_interpolates_at_training_points(self):
        # Well-conditioned Gram (length below the spacing) so the zero-noise
        # posterior mean passes through the observations.
        rng = np.random.default_rng(0)
        y = rng.normal(size=12)
        spec = KernelSpec(family="RBF", sigma2=1.0, length_scale=0.008)
        record = LinearRecord(values=y, noise_variance=0.0)
        pred = gpr_predict(record, spec, 1e-10, np.arange(-12, 0), dt=0.01)
        np.testing.assert_allclose(pred.mean, y, atol=1e-6)

    def test_empty_record_returns_prior(self):
        spec = per_spec()
        pred = gpr_predict(np.array([]), spec, 0.1, np.array([0, 1, 2]), dt=0.01)
        np.testing.assert_array_equal(pred.mean, 0.0)
        np.testing.assert_allclose(np.diag(pred.cov), spec.sigma2, rtol=1e-12)

    def test_matches_dense_inverse_oracle(self):
        # Five points, explicit matrix-inversion conditioning.
        rng = np.random.default_rng(3)
        y = rng.normal(size=5)
        dt = 0.1
        spec = KernelSpec(family="MAT32", sigma2=0.8, length_scale=0.3)
        R = 0.05
        t_train = dt * np.arange(-5, 0)
        t_test = dt * np.array([-2.5, 0.0, 1.0])
        K = kernel_eval(spec, t_train[:, None] - t_train[None, :]) + R * np.eye(5)
        Ks = kernel_eval(spec, t_test[:, None] - t_train[None, :])
        Kss = kernel_eval(spec, t_test[:, None] - t_test[None, :])
        Kinv = np.linalg.inv(K)
        mean_oracle = Ks @ Kinv @ y
        cov_oracle = Kss - Ks @ Kinv @ Ks.T
        pred = gpr_predict(
            LinearRecord(values=y, noise_variance=R), spec, R,
            np.array([-2.5, 0.0, 1.0]), dt=dt,
        )
        np.testing.assert_allclose(pred.mean, mean_oracle, atol=1e-10)
        np.testing.assert_allclose(pred.cov, cov_oracle, atol=1e-10)

    def test_covariance_symmetric_diag_nonneg(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=40)
        spec = per_spec(l=0.5, f0=1.0)
        pred = gpr_predict(
            LinearRecord(values=y, noise_variance=0.01), spec, 0.01,
            np.arange(0, 20), dt=0.01,
        )
        np.testing.assert_allclose(pred.cov, pred.cov.T, atol=1e-12)
        assert np.all(pred.variances >= -1e-8 * spec.sigma2)

    def test_gram_factorizable_with_bounded_jitter(self):
        # Wide PER kernel on a long grid is rank-deficient; the ladder must
        # succeed within 1e-6 * sigma2 even at R = 0.
        rng = np.random.default_rng(2)
        y = rng.normal(size=2000)
        spec = per_spec(sigma2=2.0, l=1.0, f0=0.5)
        pred = gpr_predict(
            LinearRecord(values=y, noise_variance=0.0), spec, 0.0,
            np.arange(0, 5), dt=0.001,
        )
        assert np.all(np.isfinite(pred.mean))

    def test_csv_export(self, tmp_path):
        pred = gpr_predict(np.array([]), per_spec(), 0.0, np.array([0, 1]), dt=0.01)
        path = tmp_path / "pred.csv"
        pred.to_csv(path)
        assert path.read_text().splitlines()[0] == "n_test,mean_rad,var_rad2"


class TestMarginalLikelihood:
    def test_single_observation_closed_form(self):
        spec = per_spec(sigma2=1.7)
        R = 0.3
        lml = log_marginal_likelihood(np.array([0.0]), spec, R, dt=0.01)
        assert lml == pytest.approx(-0.5 * np.log(2 * np.pi * (1.7 + R)), rel=1e-10)

    def test_inflated_noise_lowers_evidence_on_informative_data(self):
        rng = np.random.default_rng(4)
        t = 0.01 * np.arange(-50, 0)
        y = np.sin(2 * np.pi * 3.0 * t)
        spec = per_spec(sigma2=0.5, l=0.5, f0=3.0)
        good = log_marginal_likelihood(y, spec, 1e-4, dt=0.01)
        bad = log_marginal_likelihood(y, spec, 1e2, dt=0.01)
        assert bad < good

    @pytest.mark.parametrize("family,extra", [("PER", {}), ("RBF", {})])
    def test_gradient_matches_finite_differences(self, family, extra):
        rng = np.random.default_rng(5)
        y = rng.normal(size=50)
        spec = KernelSpec(
            family=family, sigma2=1.2, length_scale=0.7, f0_hz=1.1, extra=extra
        )
        R = 0.4
        dt = 0.02
        _, grad = log_marginal_likelihood(y, spec, R, dt, with_gradient=True)

        def value(s=None):
            s = s or {}
            trial = KernelSpec(
                family=family,
                sigma2=s.get("sigma2", spec.sigma2),
                length_scale=s.get("length_scale", spec.length_scale),
                f0_hz=s.get("f0_hz", spec.f0_hz),
                extra=extra,
            )
            return log_marginal_likelihood(y, trial, s.get("R", R), dt)

        base = {"sigma2": spec.sigma2, "length_scale": spec.length_scale,
                "f0_hz": spec.f0_hz, "R": R}
        for name in grad:
            h = 1e-5 * base[name]
            up = value({name: base[name] + h})
            dn = value({name: base[name] - h})
            fd = (up - dn) / (2 * h)
            assert grad[name] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestOptimize:
    def test_recovers_generating_hyperparameters(self):
        # Draw data from a known periodic-kernel Gaussian on 500 points and
        # recover sigma2 and length within a factor of two.
        true = per_spec(sigma2=1.5, l=0.4, f0=1.0)
        n, dt = 500, 0.01
        t = dt * np.arange(-n, 0)
        K = kernel_eval(true, t[:, None] - t[None, :])
        rng = np.random.default_rng(6)
        L = np.linalg.cholesky(K + 1e-10 * np.eye(n))
        y = L @ rng.normal(size=n) + np.sqrt(1e-4) * rng.normal(size=n)
        start = per_spec(sigma2=0.5, l=1.0, f0=1.0)
        bounds = {
            "sigma2": (1e-2, 1e2),
            "length_scale": (1e-2, 1e1),
            "R": (1e-6, 1e0),
        }
        tuned = optimize_hyperparams(y, start, 1e-2, dt, bounds, num_starts=4, seed=1)
        assert 0.5 * true.sigma2 <= tuned.spec.sigma2 <= 2.0 * true.sigma2
        assert 0.5 * true.length_scale <= tuned.spec.length_scale <= 2.0 * true.length_scale

    def test_noise_only_record_shrinks_signal(self):
        rng = np.random.default_rng(7)
        y = 0.3 * rng.normal(size=200)
        start = KernelSpec(family="RBF", sigma2=1.0, length_scale=0.5)
        bounds = {"sigma2": (1e-8, 1e2), "length_scale": (1e-2, 1e1), "R": (1e-8, 1e2)}
        tuned = optimize_hyperparams(y, start, 0.01, 0.01, bounds, num_starts=4, seed=2)
        assert tuned.spec.sigma2 < 0.05
        assert tuned.R == pytest.approx(0.09, rel=0.5)

    def test_bounds_validated(self):
        with pytest.raises(ParameterError):
            optimize_hyperparams(
                np.ones(10), per_spec(), 0.1, 0.01, {"sigma2": (0.0, 1.0)}
            )

    def test_default_bounds_positive_finite(self):
        b = default_bounds(0.001, 2000, 1.7)
        for lo, hi in b.values():
            assert 0 < lo < hi < np.inf


class TestKappa:
    def test_zero_at_fourier_resolution(self):
        assert compute_kappa(1.0 / (0.001 * 2000), 0.001, 2000) == pytest.approx(0.0)

    def test_figure_values(self):
        # kappa = 70 comes from a comb spacing of 1/(dt (N_T + 70)).
        f0 = kappa_comb_spacing(70.0, 0.001, 2000)
        assert compute_kappa(f0, 0.001, 2000) == pytest.approx(70.0, abs=1e-9)

    def test_simple_arithmetic(self):
        assert compute_kappa(0.25, 0.001, 2000) == pytest.approx(2000.0)

    def test_validation(self):
        with pytest.raises(ParameterError):
            compute_kappa(0.0, 0.001, 100)


class TestDiscontinuityDetector:
    def test_fires_on_step(self):
        mean = np.concatenate([np.zeros(40), np.ones(20)])
        assert find_prediction_discontinuity(mean) == 40

    def test_silent_on_smooth_sequence(self):
        mean = np.sin(np.linspace(0, 3, 100))
        assert find_prediction_discontinuity(mean) is None

    def test_short_sequences(self):
        assert find_prediction_discontinuity(np.array([1.0, 2.0])) is None
