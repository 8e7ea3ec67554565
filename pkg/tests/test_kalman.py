"""Tests for the generic Kalman recursion."""

import numpy as np
import pytest

from phasecast.errors import FilterInstabilityError, ParameterError
from phasecast.kalman import (
    KalmanModel,
    KalmanState,
    assert_psd,
    diffuse_initial_state,
    forecast,
    linear_model,
    predict_step,
    run_filter,
    update_step,
)


def scalar_model(phi=1.0, gamma=1.0, sigma2=0.0, R=1.0):
    return linear_model(np.array([[phi]]), np.array([gamma]), sigma2, R, np.array([1.0]))


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestPredictStep:
    def test_identity_dynamics_no_noise(self):
        model = scalar_model(phi=1.0, sigma2=0.0)
        state = KalmanState.make([2.5], [[0.7]])
        prior = predict_step(state, model)
        assert prior.mean[0] == 2.5
        assert prior.cov[0, 0] == 0.7
        assert prior.step == 1

    def test_process_noise_injection(self):
        model = scalar_model(phi=1.0, sigma2=0.1)
        prior = predict_step(KalmanState.make([0.0], [[0.0]]), model)
        assert prior.cov[0, 0] == pytest.approx(0.1, rel=1e-12)

    def test_quarter_rotation_periodicity(self):
        model = linear_model(
            rotation(np.pi / 2), np.zeros(2), 0.0, 1.0, np.array([1.0, 0.0])
        )
        state = KalmanState.make([1.0, 0.0], np.eye(2))
        for _ in range(4):
            state = predict_step(state, model)
        np.testing.assert_allclose(state.mean, [1.0, 0.0], atol=1e-12)

    def test_nonfinite_detected_with_step_index(self):
        model = scalar_model(phi=2.0, sigma2=0.0)
        state = KalmanState.make([1e300], [[1.0]])
        with pytest.raises(FilterInstabilityError) as err:
            predict_step(predict_step(state, model), model)
        assert err.value.step is not None


class TestUpdateStep:
    def test_huge_R_ignores_data(self):
        P = 0.5
        model = scalar_model(R=1e12 * P)
        prior = KalmanState.make([1.0], [[P]])
        post, gain, innovation = update_step(prior, 100.0, model)
        assert abs(gain[0]) < 1e-6
        assert post.mean[0] == pytest.approx(1.0, rel=1e-6)
        assert post.cov[0, 0] == pytest.approx(P, rel=1e-6)

    def test_perfect_measurement(self):
        model = scalar_model(R=0.0)
        post, gain, innovation = update_step(KalmanState.make([0.3], [[2.0]]), 1.7, model)
        assert post.mean[0] == pytest.approx(1.7, abs=1e-12)
        assert post.cov[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert gain[0] == pytest.approx(1.0)

    def test_three_step_scalar_recursion_oracle(self):
        # Hand-iterated scalar recursion, written out independently.
        phi, s2, R = 0.5, 0.1, 0.2
        ys = [1.0, -1.0, 0.5]
        x, P = 0.0, 1.0
        oracle = []
        for y in ys:
            x_m = phi * x
            P_m = phi * P * phi + s2
            g = P_m / (P_m + R)
            x = x_m + g * (y - x_m)
            P = (1 - g) * P_m
            oracle.append((x, P, g))

        model = scalar_model(phi=phi, sigma2=s2, R=R)
        state = KalmanState.make([0.0], [[1.0]])
        for y, (ox, oP, og) in zip(ys, oracle):
            prior = predict_step(state, model)
            state, gain, _ = update_step(prior, y, model)
            assert state.mean[0] == pytest.approx(ox, abs=1e-12)
            assert state.cov[0, 0] == pytest.approx(oP, abs=1e-12)
            assert gain[0] == pytest.approx(og, abs=1e-12)

    def test_zero_innovation_variance_rejected(self):
        model = scalar_model(R=0.0)
        with pytest.raises(FilterInstabilityError):
            update_step(KalmanState.make([0.0], [[0.0]]), 1.0, model)


class TestRunFilter:
    def test_single_element_record(self):
        model = scalar_model(phi=0.9, sigma2=0.01, R=0.1)
        traj = run_filter([0.7], model, KalmanState.make([0.0], [[1.0]]))
        assert len(traj) == 1

    def test_empty_record_rejected(self):
        model = scalar_model()
        with pytest.raises(ParameterError):
            run_filter([], model, KalmanState.make([0.0], [[1.0]]))

    def test_matches_step_composition(self):
        rng = np.random.default_rng(7)
        model = scalar_model(phi=0.8, sigma2=0.05, R=0.3)
        ys = rng.normal(size=40)
        init = KalmanState.make([0.0], [[1.0]])
        traj = run_filter(ys, model, init)
        state = init
        for i, y in enumerate(ys):
            prior = predict_step(state, model)
            state, gain, innovation = update_step(prior, y, model)
            assert traj.means[i, 0] == pytest.approx(state.mean[0], abs=1e-13)
            assert traj.gains[i, 0] == pytest.approx(gain[0], abs=1e-13)
            assert traj.innovations[i] == pytest.approx(innovation, abs=1e-13)

    def test_forced_zero_gain_keeps_posterior_equal_to_prior(self):
        # With the gain driven to ~0 by enormous R the update is a no-op.
        rng = np.random.default_rng(3)
        model = scalar_model(phi=0.9, sigma2=0.1, R=1e18)
        ys = rng.normal(size=20)
        init = KalmanState.make([1.0], [[1.0]])
        traj = run_filter(ys, model, init)
        state = init
        for i in range(len(ys)):
            state = predict_step(state, model)  # pure dynamical propagation
            assert traj.means[i, 0] == pytest.approx(state.mean[0], rel=1e-9)
            state = KalmanState(traj.means[i], state.cov, state.step)

    def test_covariances_kept_on_request(self):
        model = scalar_model(phi=0.5, sigma2=0.1, R=0.2)
        traj = run_filter([1.0, 2.0], model, KalmanState.make([0.0], [[1.0]]),
                          keep_covariances=True)
        assert traj.covariances.shape == (2, 1, 1)

    def test_instability_error_carries_step(self):
        model = scalar_model(phi=4.0, sigma2=0.0, R=1e30)  # gain ~ 0, mean explodes
        ys = np.ones(600)
        with pytest.raises(FilterInstabilityError) as err:
            run_filter(ys, model, KalmanState.make([1.0], [[1.0]]))
        assert err.value.step is not None

    def test_psd_validation_along_run(self):
        rng = np.random.default_rng(0)
        phi = rotation(0.3)
        model = linear_model(phi, np.array([1.0, 0.5]), 0.05, 0.2, np.array([1.0, 0.0]))
        ys = rng.normal(size=100)
        run_filter(ys, model, KalmanState.make(np.zeros(2), np.eye(2)), validate=True)


class TestForecast:
    def test_identity_gives_constant(self):
        model = scalar_model(phi=1.0, sigma2=0.0, R=0.1)
        fc = forecast(KalmanState.make([1.5], [[0.2]]), model, 5)
        np.testing.assert_allclose(fc.measurements, 1.5)

    def test_geometric_decay(self):
        model = scalar_model(phi=0.5, sigma2=0.0, R=0.1)
        fc = forecast(KalmanState.make([1.0], [[0.2]]), model, 3)
        np.testing.assert_allclose(fc.measurements, [0.5, 0.25, 0.125], atol=1e-14)

    def test_rotation_closed_form(self):
        model = linear_model(
            rotation(np.pi / 3), np.zeros(2), 0.0, 0.1, np.array([1.0, 0.0])
        )
        fc = forecast(KalmanState.make([1.0, 0.0], np.eye(2)), model, 6)
        expected = np.cos(np.pi / 3 * np.arange(1, 7))
        np.testing.assert_allclose(fc.measurements, expected, atol=1e-12)

    def test_horizon_must_be_positive(self):
        with pytest.raises(ParameterError):
            forecast(KalmanState.make([0.0], [[1.0]]), scalar_model(), 0)

    def test_divergence_reports_step(self):
        model = scalar_model(phi=2.0, sigma2=0.0)
        with pytest.raises(FilterInstabilityError) as err:
            forecast(KalmanState.make([1.0], [[1.0]]), model, 200)
        assert err.value.step is not None

    def test_covariance_propagates_alongside(self):
        model = scalar_model(phi=1.0, gamma=1.0, sigma2=0.1, R=0.2)
        fc = forecast(KalmanState.make([0.0], [[0.0]]), model, 4)
        np.testing.assert_allclose(fc.variances, 0.1 * np.arange(1, 5), atol=1e-12)


class TestHelpers:
    def test_assert_psd_rejects_indefinite(self):
        with pytest.raises(FilterInstabilityError):
            assert_psd(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_assert_psd_accepts_tiny_negative_roundoff(self):
        P = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-12]])
        assert_psd(P)

    def test_diffuse_initial_state_scaling(self):
        record = np.array([1.0, -1.0, 1.0, -1.0])
        st = diffuse_initial_state(3, record)
        assert st.cov[0, 0] == pytest.approx(1.0)
        assert np.all(st.mean == 0.0)

    def test_lag_seed_reverses_leading_record(self):
        record = np.array([10.0, 20.0, 30.0, 40.0])
        st = diffuse_initial_state(3, record, lag_seed=True)
        np.testing.assert_array_equal(st.mean, [30.0, 20.0, 10.0])

    def test_trajectory_csv(self, tmp_path):
        model = scalar_model(phi=0.5, sigma2=0.1, R=0.2)
        traj = run_filter([1.0, -1.0], model, KalmanState.make([0.0], [[1.0]]))
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "n,x0_hat,y_hat_minus,gain0,innovation"
        assert len(lines) == 3
