"""Least-squares predictors over lag windows and their state-space embedding.

The i-step-ahead predictor is a weighted sum of the q most recent samples plus
a constant offset, fitted by least squares over the training record.  The
one-step weights double as autoregressive coefficients: embedded in companion
form they define the dynamics of the autoregressive Kalman filter, and they
determine the implied power spectral density

    S(w) = sigma^2 / (2*pi * |1 - sum_k phi_k exp(-i w k)|^2),   w in rad/sample,

whose integral over (-pi, pi] equals the process variance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHistoryError, ParameterError
from .kalman import KalmanModel, linear_model

# Ridge factor applied to the normal equations; keeps rank-deficient designs
# solvable without visibly biasing full-rank fits.
_RIDGE = 1e-10


@dataclass(frozen=True)
class ArCoefficients:
    """Lag weights phi_1..phi_q plus a constant offset for non-zero-mean data."""

    phi: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 1 or phi.size < 1:
            raise ParameterError("phi must be a nonempty 1-D array")
        if not np.all(np.isfinite(phi)) or not np.isfinite(self.offset):
            raise ParameterError("coefficients must be finite")
        object.__setattr__(self, "phi", phi)

    @property
    def order(self) -> int:
        return int(self.phi.size)

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.phi])


@dataclass(frozen=True)
class LsfModel:
    """Per-horizon weight vectors; ``weights[i-1]`` predicts i steps ahead.

    Each weight vector has length q+1: q lag weights (most recent sample
    first) followed by the constant offset.
    """

    weights: np.ndarray
    order: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != self.order + 1:
            raise ParameterError("weights must have shape (horizons, q + 1)")
        object.__setattr__(self, "weights", w)

    @property
    def num_horizons(self) -> int:
        return int(self.weights.shape[0])

    def coefficients(self, horizon: int = 1) -> ArCoefficients:
        w = self.weights[horizon - 1]
        return ArCoefficients(phi=w[:-1], offset=float(w[-1]))


def _lag_design(y: np.ndarray, q: int, max_horizon: int):
    """Design matrix of lag windows and the stacked targets for every horizon.

    Row t holds (y[t], y[t-1], ..., y[t-q+1], 1) for t = q-1 .. len(y)-1-max_horizon;
    column i of the target matrix holds y[t+i+1].
    """
    n = y.size
    rows = n - q - max_horizon + 1
    if rows < 1:
        raise ParameterError(
            f"record of length {n} too short for q={q}, horizon={max_horizon}"
        )
    idx = np.arange(rows)[:, None] + (q - 1 - np.arange(q))[None, :]
    X = np.empty((rows, q + 1))
    X[:, :q] = y[idx]
    X[:, q] = 1.0
    targets = np.empty((rows, max_horizon))
    base = q - 1 + np.arange(rows)
    for i in range(1, max_horizon + 1):
        targets[:, i - 1] = y[base + i]
    return X, targets


def train_lsf(
    record,
    q: int,
    horizons: int,
    method: str = "normal",
    descent_tol: float = 1e-12,
    descent_max_iter: int = 200_000,
) -> LsfModel:
    """Fit the per-horizon least-squares predictors.

    Parameters
    ----------
    record : LinearRecord or array
        Training samples (oldest first).
    q : int
        Lag order.
    horizons : int
        Number of forward horizons to fit (1 .. horizons).
    method : {"normal", "descent"}
        "normal" solves the ridge-stabilized normal equations (canonical
        path); "descent" runs steepest descent with exact line search on the
        same quadratic objective and converges to the same optimum.
    """
    y = np.asarray(getattr(record, "values", record), dtype=float)
    if q < 1:
        raise ParameterError("q must be >= 1")
    X, targets = _lag_design(y, q, horizons)

    XtX = X.T @ X
    trace = float(np.trace(XtX))
    lam = _RIDGE * trace if trace > 0 else _RIDGE
    A = XtX + lam * np.eye(q + 1)
    B = X.T @ targets

    rank = np.linalg.matrix_rank(XtX)
    if rank < q + 1:
        warnings.warn(
            "rank-deficient design (constant or degenerate record); "
            "falling back to the ridge-regularized solution",
            stacklevel=2,
        )

    if method == "normal":
        W = np.linalg.solve(A, B)
    elif method == "descent":
        W = _descent_solve(A, B, tol=descent_tol, max_iter=descent_max_iter)
    else:
        raise ParameterError(f"unknown method {method!r}")
    return LsfModel(weights=W.T, order=q)


def _descent_solve(A, B, tol, max_iter):
    """Steepest descent with exact line search for (1/2) w'Aw - b'w, per column."""
    W = np.zeros_like(B)
    for col in range(B.shape[1]):
        b = B[:, col]
        w = np.zeros_like(b)
        g = A @ w - b
        b_scale = max(float(np.linalg.norm(b)), 1.0)
        for _ in range(max_iter):
            gnorm = float(g @ g)
            if np.sqrt(gnorm) <= tol * b_scale:
                break
            Ag = A @ g
            step = gnorm / float(g @ Ag)
            w = w - step * g
            g = g - step * Ag
        W[:, col] = w
    return W


def lsf_predict(model: LsfModel, history, horizon: int) -> float:
    """Predict ``horizon`` steps past the end of ``history``.

    ``history`` supplies at least q samples, oldest first; only the q most
    recent are used.
    """
    if not 1 <= horizon <= model.num_horizons:
        raise ParameterError(
            f"horizon must be in 1..{model.num_horizons}, got {horizon}"
        )
    y = np.asarray(getattr(history, "values", history), dtype=float)
    if y.size < model.order:
        raise InsufficientHistoryError(
            f"need {model.order} samples, got {y.size}"
        )
    w = model.weights[horizon - 1]
    window = y[-model.order :][::-1]
    return float(w[:-1] @ window + w[-1])


def companion_matrix(phi: np.ndarray) -> np.ndarray:
    q = phi.size
    m = np.zeros((q, q))
    m[0, :] = phi
    if q > 1:
        m[np.arange(1, q), np.arange(0, q - 1)] = 1.0
    return m


def build_akf(coeffs: ArCoefficients, sigma2: float, R: float) -> KalmanModel:
    """Embed AR(q) coefficients into a Kalman model in companion form.

    State is the last q signal values (most recent first); process noise
    enters only the leading component and the observation picks out x[0].
    """
    phi = coeffs.phi
    q = coeffs.order
    Phi = companion_matrix(phi)
    gamma = np.zeros(q)
    gamma[0] = 1.0
    H = np.zeros(q)
    H[0] = 1.0
    return linear_model(
        Phi,
        gamma,
        sigma2,
        R,
        H,
        apply_dynamics=lambda x: _companion_apply(phi, x),
        propagate_cov=lambda P: _companion_sandwich(phi, P),
    )


def _companion_apply(phi: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[0] = phi @ x
    out[1:] = x[:-1]
    return out


def _companion_sandwich(phi: np.ndarray, P: np.ndarray) -> np.ndarray:
    # Phi P Phi^T where Phi is companion: shift rows/cols, fill the first
    # row/column with phi-weighted sums.  O(q^2) instead of O(q^3).
    top = phi @ P
    out = np.empty_like(P)
    out[0, 0] = top @ phi
    out[0, 1:] = top[:-1]
    out[1:, 0] = out[0, 1:]
    out[1:, 1:] = P[:-1, :-1]
    return out


def ar_spectral_density(
    coeffs: ArCoefficients, sigma2: float, omega
) -> np.ndarray | float:
    """Power spectral density implied by the AR coefficients at ``omega`` (rad/sample)."""
    omega_arr = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega_arr <= 0) or np.any(omega_arr > np.pi):
        raise ParameterError("omega must lie in (0, pi]")
    k = np.arange(1, coeffs.order + 1)
    transfer = 1.0 - np.exp(-1j * omega_arr[:, None] * k[None, :]) @ coeffs.phi.astype(
        complex
    )
    denom = 2.0 * np.pi * np.abs(transfer) ** 2
    if np.any(denom < 1e-300):
        raise ParameterError("spectral density overflow near a unit root")
    out = sigma2 / denom
    return out if np.ndim(omega) else float(out[0])


def check_stationarity(coeffs: ArCoefficients):
    """Companion-matrix eigenvalue test for covariance stationarity.

    Returns (is_stationary, eigenvalue moduli); stationary means every
    modulus is strictly below 1 (with a 1e-9 margin for round-off).
    """
    moduli = np.abs(np.linalg.eigvals(companion_matrix(coeffs.phi)))
    return bool(np.max(moduli) < 1.0 - 1e-9), moduli


def ar_simulate(
    coeffs: ArCoefficients,
    sigma: float,
    length: int,
    seed=None,
    burn_in: int = 2000,
) -> np.ndarray:
    """Simulate the AR(q) recursion with N(0, sigma^2) innovations.

    Used both as a test oracle and to build perfect-model truths.
    """
    rng = np.random.default_rng(seed)
    q = coeffs.order
    total = length + burn_in
    w = rng.normal(0.0, sigma, size=total) if sigma > 0 else np.zeros(total)
    out = np.zeros(total + q)
    for i in range(total):
        window = out[i : i + q][::-1]  # most recent value first
        out[q + i] = coeffs.phi @ window + coeffs.offset + w[i]
    return out[q + burn_in :]
