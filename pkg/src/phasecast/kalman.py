"""Generic discrete-time Kalman recursion with a scalar measurement.

One canonical ordering is used throughout: predict, then update.

    x-  = Phi x+                      (prior mean)
    P-  = Phi P+ Phi^T + s2 G G^T     (prior covariance)
    g   = P- H^T / (H P- H^T + R)     (gain; scalar innovation variance)
    x+  = x- + g (y - h(x-))
    P+  = (I - g H) P-

Covariances are re-symmetrized after every step.  The measurement hook ``h``
may be nonlinear; its Jacobian row ``H`` is evaluated at the prior mean, which
is all the extended form needs for a scalar observation.  Forecasting simply
repeats the predict step with the gain pinned at zero, so prior and posterior
moments coincide there.

Models may carry optional fast paths (``apply_dynamics``, ``propagate_cov``)
exploiting structure in Phi (companion or block-rotation forms); these must be
numerically identical to the dense products and are cross-checked in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FilterInstabilityError, ParameterError

# Any covariance or state entry beyond this magnitude is treated as a blow-up.
_DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class KalmanModel:
    """Dynamics, noise shaping, and measurement hooks for one filter.

    Attributes
    ----------
    dim : int
        State dimension.
    dynamics : ndarray
        Constant transition matrix Phi (dim x dim).
    noise_shaper : ndarray or callable
        Process-noise shaping vector/matrix G, or a pure function of the
        previous posterior mean returning it (state-dependent shaping).
    process_scale : float
        White process-noise variance s2 >= 0; Q = s2 * G G^T.
    meas_noise : float
        Scalar measurement-noise variance R >= 0.
    measure : callable
        h(x) -> float, the predicted observation.
    jacobian : callable
        H(x) -> (dim,) row of dh/dx at x.
    apply_dynamics, propagate_cov : callable, optional
        Structure-exploiting replacements for ``Phi @ x`` and
        ``Phi @ P @ Phi.T``.
    """

    dim: int
    dynamics: np.ndarray
    noise_shaper: np.ndarray | Callable[[np.ndarray], np.ndarray]
    process_scale: float
    meas_noise: float
    measure: Callable[[np.ndarray], float]
    jacobian: Callable[[np.ndarray], np.ndarray]
    apply_dynamics: Optional[Callable[[np.ndarray], np.ndarray]] = None
    propagate_cov: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("state dimension must be >= 1")
        if self.process_scale < 0 or self.meas_noise < 0:
            raise ParameterError("noise variances must be >= 0")

    def shaper_at(self, mean: np.ndarray) -> np.ndarray:
        g = self.noise_shaper(mean) if callable(self.noise_shaper) else self.noise_shaper
        g = np.asarray(g, dtype=float)
        return g.reshape(self.dim, -1)


def linear_model(
    phi: np.ndarray,
    gamma: np.ndarray,
    sigma2: float,
    R: float,
    H: np.ndarray,
    **hooks,
) -> KalmanModel:
    """Convenience constructor for a fully linear model with h(x) = H x."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    H = np.asarray(H, dtype=float).reshape(-1)
    if phi.shape[0] != phi.shape[1] or H.size != phi.shape[0]:
        raise ParameterError("phi must be square and H must match its dimension")
    return KalmanModel(
        dim=phi.shape[0],
        dynamics=phi,
        noise_shaper=np.asarray(gamma, dtype=float),
        process_scale=float(sigma2),
        meas_noise=float(R),
        measure=lambda x: float(H @ x),
        jacobian=lambda x: H,
        **hooks,
    )


@dataclass(frozen=True)
class KalmanState:
    """Gaussian state-of-knowledge at a given step: mean, covariance, step index."""

    mean: np.ndarray
    cov: np.ndarray
    step: int = 0

    @classmethod
    def make(cls, mean, cov, step=0) -> "KalmanState":
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(mean=mean, cov=cov, step=step)


@dataclass
class FilterTrajectory:
    """Per-step outputs of one filtering pass.

    ``covariances`` is populated only when the run was asked to keep the full
    matrices; ``cov_diagonals`` is always available.
    """

    means: np.ndarray
    cov_diagonals: np.ndarray
    gains: np.ndarray
    innovations: np.ndarray
    measurement_predictions: np.ndarray
    estimates: np.ndarray
    final_state: KalmanState
    covariances: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.means)

    def to_csv(self, path) -> None:
        from .tableio import write_csv

        write_csv(
            path,
            ("n", "x0_hat", "y_hat_minus", "gain0", "innovation"),
            (
                (
                    i,
                    float(self.means[i, 0]),
                    float(self.measurement_predictions[i]),
                    float(self.gains[i, 0]),
                    float(self.innovations[i]),
                )
                for i in range(len(self.means))
            ),
        )


def _check_finite(arr: np.ndarray, step: int, what: str) -> None:
    if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > _DIVERGENCE_LIMIT):
        raise FilterInstabilityError(f"{what} diverged", step=step)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict_step(state: KalmanState, model: KalmanModel) -> KalmanState:
    """Propagate the posterior at step n-1 to the prior at step n."""
    phi = model.dynamics
    if model.apply_dynamics is not None:
        mean = model.apply_dynamics(state.mean)
    else:
        mean = phi @ state.mean
    if model.propagate_cov is not None:
        P = model.propagate_cov(state.cov)
    else:
        P = phi @ state.cov @ phi.T
    if model.process_scale > 0:
        g = model.shaper_at(state.mean)
        P = P + model.process_scale * (g @ g.T)
    P = _symmetrize(P)
    step = state.step + 1
    _check_finite(mean, step, "state mean")
    _check_finite(P, step, "state covariance")
    return KalmanState(mean=mean, cov=P, step=step)


def update_step(prior: KalmanState, y: float, model: KalmanModel):
    """Condition the prior on a scalar observation.

    Returns (posterior, gain, innovation).  The innovation variance must be
    strictly positive; a non-positive value means the model is degenerate at
    this step.
    """
    H = np.asarray(model.jacobian(prior.mean), dtype=float).reshape(-1)
    PHt = prior.cov @ H
    s = float(H @ PHt + model.meas_noise)
    if s <= 0:
        raise FilterInstabilityError(
            "innovation variance is not positive", step=prior.step
        )
    gain = PHt / s
    innovation = float(y) - float(model.measure(prior.mean))
    mean = prior.mean + gain * innovation
    P = _symmetrize(prior.cov - np.outer(gain, PHt))
    _check_finite(mean, prior.step, "posterior mean")
    _check_finite(P, prior.step, "posterior covariance")
    posterior = KalmanState(mean=mean, cov=P, step=prior.step)
    return posterior, gain, innovation


def run_filter(
    record: Sequence[float],
    model: KalmanModel,
    init: KalmanState,
    *,
    keep_covariances: bool = False,
    validate: bool = False,
) -> FilterTrajectory:
    """Filter a full measurement record, returning the per-step posteriors.

    The loop is an inlined composition of :func:`predict_step` and
    :func:`update_step` (asserted equivalent in the test suite); finiteness is
    checked once per step on the posterior.  ``validate=True`` additionally
    checks the posterior covariance for symmetric positive semidefiniteness
    at every step (slow; used by the property suites).
    """
    y = np.asarray(record, dtype=float)
    if y.size == 0:
        raise ParameterError("record must be nonempty")
    T = y.size
    dim = model.dim
    means = np.empty((T, dim))
    diags = np.empty((T, dim))
    gains = np.empty((T, dim))
    innovations = np.empty(T)
    y_hats = np.empty(T)
    estimates = np.empty(T)
    covs = np.empty((T, dim, dim)) if keep_covariances else None

    phi = model.dynamics
    apply_dyn = model.apply_dynamics
    prop_cov = model.propagate_cov
    measure = model.measure
    jac = model.jacobian
    s2 = model.process_scale
    R = model.meas_noise

    # Constant noise shaping lets Q be precomputed once.
    Q_const = None
    if s2 > 0 and not callable(model.noise_shaper):
        g = model.shaper_at(init.mean)
        Q_const = s2 * (g @ g.T)

    mean = init.mean.astype(float).copy()
    P = init.cov.astype(float).copy()
    for i in range(T):
        # Predict.
        mean_prior = apply_dyn(mean) if apply_dyn is not None else phi @ mean
        P_prior = prop_cov(P) if prop_cov is not None else phi @ P @ phi.T
        if Q_const is not None:
            P_prior = P_prior + Q_const
        elif s2 > 0:
            g = model.shaper_at(mean)
            P_prior = P_prior + s2 * (g @ g.T)
        P_prior = 0.5 * (P_prior + P_prior.T)

        # Update on the scalar observation.
        H = np.asarray(jac(mean_prior), dtype=float).reshape(-1)
        PHt = P_prior @ H
        s = float(H @ PHt + R)
        if s <= 0:
            raise FilterInstabilityError(
                "innovation variance is not positive", step=i + init.step + 1
            )
        y_hat = float(measure(mean_prior))
        innovation = y[i] - y_hat
        gain = PHt / s
        mean = mean_prior + gain * innovation
        P = P_prior - np.outer(gain, PHt)
        P = 0.5 * (P + P.T)

        if not (
            np.all(np.isfinite(mean))
            and abs(P[0, 0]) < _DIVERGENCE_LIMIT
            and np.isfinite(P[0, 0])
        ):
            _check_finite(mean, i + init.step + 1, "posterior mean")
            _check_finite(P, i + init.step + 1, "posterior covariance")

        means[i] = mean
        diags[i] = np.einsum("ii->i", P)
        gains[i] = gain
        innovations[i] = innovation
        y_hats[i] = y_hat
        estimates[i] = measure(mean)
        if covs is not None:
            covs[i] = P
        if validate:
            assert_psd(P, step=i + init.step + 1)

    final_state = KalmanState(mean=mean, cov=P, step=init.step + T)
    return FilterTrajectory(
        means=means,
        cov_diagonals=diags,
        gains=gains,
        innovations=innovations,
        measurement_predictions=y_hats,
        estimates=estimates,
        final_state=final_state,
        covariances=covs,
    )


@dataclass(frozen=True)
class Forecast:
    """Zero-gain forecast: predicted observations and their state-only variances."""

    measurements: np.ndarray
    variances: np.ndarray
    final_state: KalmanState


def forecast(
    last_posterior: KalmanState, model: KalmanModel, horizon: int
) -> Forecast:
    """Propagate the dynamics with the gain pinned to zero for ``horizon`` steps.

    Step k of the output is the predicted observation h(x) after k applications
    of the dynamics, k = 1 .. horizon.
    """
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    preds = np.empty(horizon)
    variances = np.empty(horizon)
    state = last_posterior
    for k in range(horizon):
        state = predict_step(state, model)
        preds[k] = model.measure(state.mean)
        H = np.asarray(model.jacobian(state.mean), dtype=float).reshape(-1)
        variances[k] = float(H @ state.cov @ H)
    return Forecast(measurements=preds, variances=variances, final_state=state)


def assert_psd(P: np.ndarray, step: int | None = None, rtol: float = 1e-8) -> None:
    """Raise if P is not symmetric positive semidefinite within tolerance.

    The smallest eigenvalue may be as low as -rtol * trace(P) to absorb
    round-off from the rank-one updates.
    """
    if not np.allclose(P, P.T, atol=1e-10 * (1.0 + np.abs(P).max())):
        raise FilterInstabilityError("covariance lost symmetry", step=step)
    eigs = np.linalg.eigvalsh(P)
    floor = -rtol * max(np.trace(P), np.finfo(float).tiny)
    if eigs[0] < floor:
        raise FilterInstabilityError(
            f"covariance not PSD (min eigenvalue {eigs[0]:.3e})", step=step
        )


def diffuse_initial_state(
    dim: int, record: Sequence[float], lag_seed: bool = False
) -> KalmanState:
    """Standard initial condition: zero mean, covariance scaled to the data.

    P0 is the identity times the record sample variance.  With ``lag_seed``
    the leading state entries are filled with the first ``dim`` record values
    in reverse order, which populates a lag window before filtering starts.
    """
    y = np.asarray(record, dtype=float)
    var = float(np.var(y)) if y.size else 1.0
    if var <= 0:
        var = 1.0
    mean = np.zeros(dim)
    if lag_seed:
        k = min(dim, y.size)
        mean[:k] = y[:k][::-1]
    return KalmanState(mean=mean, cov=var * np.eye(dim), step=0)
