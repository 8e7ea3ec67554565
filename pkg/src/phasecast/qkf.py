"""Extended Kalman filtering directly on single-shot bit records.

The dynamics are the same companion form as the autoregressive filter; the
measurement is the nonlinear coin bias

    z = h(f) = cos(f)/2,   H = dh/df = -sin(f)/2,

evaluated on the leading state component.  Instead of comparing a float
prediction against a float observation, the filter draws its own predicted
bit from a coin with bias clamp(z) + 1/2 and updates on the quantised
residual d - d_hat, which therefore lives in {-1, 0, 1}.  Process noise uses
the full isotropic form Q = sigma^2 I rather than the rank-one shaping of the
linear filter, which keeps the gain inversion well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .armodels import ArCoefficients, companion_matrix, _companion_apply, _companion_sandwich
from .errors import FilterInstabilityError, ParameterError
from .kalman import Forecast, KalmanState
from .measurement import BinaryRecord
from .tableio import write_csv

_DIVERGENCE_LIMIT = 1e6

# Initial state variance: loose back-propagation of the bounded coin bias
# (|z| <= 1/2 implies variance <= 1/4).
_P0_SCALE = 0.25


def qkf_measure(f: float):
    """Coin bias and its derivative at a phase estimate: (z, H) = (cos(f)/2, -sin(f)/2)."""
    return 0.5 * np.cos(f), -0.5 * np.sin(f)


@dataclass(frozen=True)
class QkfModel:
    """Companion dynamics plus noise scales for the quantised filter."""

    coeffs: ArCoefficients
    sigma2: float
    R: float
    quantizer_seed: Optional[int] = None

    def __post_init__(self):
        if self.sigma2 < 0 or self.R < 0:
            raise ParameterError("noise variances must be >= 0")

    @property
    def order(self) -> int:
        return self.coeffs.order


@dataclass
class QkfTrajectory:
    """Per-step posteriors of one quantised filtering pass."""

    means: np.ndarray
    cov_diagonals: np.ndarray
    z_hats: np.ndarray
    predicted_bits: np.ndarray
    residuals: np.ndarray
    final_state: KalmanState
    clamp_count: int

    def __len__(self) -> int:
        return len(self.means)

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_count / max(len(self.means), 1)

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ("n", "f_hat", "z_hat", "d_pred", "residual"),
            (
                (
                    i,
                    float(self.means[i, 0]),
                    float(self.z_hats[i]),
                    int(self.predicted_bits[i]),
                    int(self.residuals[i]),
                )
                for i in range(len(self.means))
            ),
        )


def initial_state(order: int, bits=None) -> KalmanState:
    """Starting state for the quantised filter.

    The origin is a fixed point of the extended recursion (the measurement
    Jacobian -sin(f)/2 vanishes there, so the gain stays zero and the state
    never moves), so the lag window is seeded with the phase magnitude
    implied by the early bit frequency: f0 = arccos(2 p - 1) with p the mean
    of the first ``order`` bits.  The sign of f is unidentifiable from bits
    (the bias is even in f), so the positive branch is used throughout.
    """
    f0 = np.pi / 2.0
    if bits is not None:
        head = np.asarray(bits, dtype=float)[: max(order, 8)]
        if head.size:
            p = float(np.clip(np.mean(head), 1e-3, 1.0 - 1e-3))
            f0 = float(np.arccos(np.clip(2.0 * p - 1.0, -1.0, 1.0)))
            f0 = max(f0, 1e-2)  # keep the Jacobian away from zero
    mean = np.full(order, f0)
    return KalmanState(mean=mean, cov=_P0_SCALE * np.eye(order), step=0)


def run_qkf(
    record: BinaryRecord,
    model: QkfModel,
    init: Optional[KalmanState] = None,
    *,
    residual_mode: str = "sampled",
) -> QkfTrajectory:
    """Filter a bit record with the extended recursion.

    ``residual_mode="sampled"`` draws the predicted bit from the filter's own
    seeded coin (the default behaviour); ``"expected"`` replaces the draw with
    the expected bit value clamp(z)+1/2, a deterministic diagnostic variant.
    ``"linear"`` substitutes the identity measurement on the leading state
    component and float residuals, in which case the recursion coincides with
    the linear autoregressive filter run under isotropic process noise;
    ``record`` may then be any float sequence.
    """
    bits = np.asarray(getattr(record, "bits", record), dtype=float)
    if bits.size == 0:
        raise ParameterError("record must be nonempty")
    if residual_mode not in ("sampled", "expected", "linear"):
        raise ParameterError(f"unknown residual_mode {residual_mode!r}")

    q = model.order
    phi = model.coeffs.phi
    state = init if init is not None else initial_state(q, bits)
    if state.mean.size != q:
        raise ParameterError("initial state dimension does not match the model")
    rng = np.random.default_rng(model.quantizer_seed)

    T = bits.size
    means = np.empty((T, q))
    diags = np.empty((T, q))
    z_hats = np.empty(T)
    d_preds = np.empty(T)
    residuals = np.empty(T)
    clamp_count = 0

    mean = state.mean.copy()
    P = state.cov.copy()
    eye_scaled = model.sigma2 * np.eye(q)
    for i in range(T):
        # Predict with companion dynamics and isotropic process noise.
        mean = _companion_apply(phi, mean)
        P = _companion_sandwich(phi, P) + eye_scaled
        P = 0.5 * (P + P.T)

        if residual_mode == "linear":
            z, dz = mean[0], 1.0
            z_clamped = z
            d_hat = z
        else:
            z, dz = qkf_measure(mean[0])
            z_clamped = min(max(z, -0.5), 0.5)
            if z_clamped != z:
                clamp_count += 1
            if residual_mode == "sampled":
                d_hat = float(rng.random() < z_clamped + 0.5)
            else:
                d_hat = z_clamped + 0.5
        residual = bits[i] - d_hat

        # Scalar-measurement update with the Jacobian on the first component.
        PHt = P[:, 0] * dz
        s = dz * PHt[0] + model.R
        if s <= 0:
            raise FilterInstabilityError("innovation variance is not positive", step=i)
        gain = PHt / s
        mean = mean + gain * residual
        P = P - np.outer(gain, PHt)
        P = 0.5 * (P + P.T)

        if not np.all(np.isfinite(mean)) or np.max(np.abs(mean)) > _DIVERGENCE_LIMIT:
            raise FilterInstabilityError("state estimate diverged", step=i)

        means[i] = mean
        diags[i] = np.diag(P)
        z_hats[i] = z_clamped
        d_preds[i] = d_hat
        residuals[i] = residual

    final = KalmanState(mean=mean, cov=P, step=T)
    return QkfTrajectory(
        means=means,
        cov_diagonals=diags,
        z_hats=z_hats,
        predicted_bits=d_preds,
        residuals=residuals,
        final_state=final,
        clamp_count=clamp_count,
    )


def qkf_forecast(
    last_posterior: KalmanState, model: QkfModel, horizon: int
) -> Forecast:
    """Zero-gain forecast of the coin bias, k = 1 .. horizon steps ahead."""
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    phi = model.coeffs.phi
    mean = last_posterior.mean.copy()
    P = last_posterior.cov.copy()
    eye_scaled = model.sigma2 * np.eye(model.order)
    preds = np.empty(horizon)
    variances = np.empty(horizon)
    for k in range(horizon):
        mean = _companion_apply(phi, mean)
        P = _companion_sandwich(phi, P) + eye_scaled
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(mean)) or np.max(np.abs(mean)) > _DIVERGENCE_LIMIT:
            raise FilterInstabilityError("forecast diverged", step=k + 1)
        z, dz = qkf_measure(mean[0])
        preds[k] = z
        variances[k] = dz * P[0, 0] * dz
    final = KalmanState(mean=mean, cov=P, step=last_posterior.step + horizon)
    return Forecast(measurements=preds, variances=variances, final_state=final)
