"""Ensemble-batched filter runs for the tuning loop.

Noise-parameter search evaluates the same filter at hundreds of
(sigma^2, R) pairs over every ensemble member; running those members one by
one through :func:`phasecast.kalman.run_filter` is dominated by per-step
Python overhead.  The entry points here produce the filtered measurement
estimates plus zero-gain forecasts for a whole ensemble at once.

Two structural shortcuts make this fast while preserving the recursion's
arithmetic (the test suite pins both against the sequential filter):

* For the autoregressive filter the gain schedule is data-independent, so the
  covariance recursion runs once per member and stops early once the gain has
  reached steady state (absolute change below 1e-14 relative); the per-member
  state recursions then share one vectorized loop.
* The oscillator-bank filter has state-dependent noise shaping, so nothing is
  precomputable; its covariance recursion is instead carried with a leading
  member axis so each step is a handful of array operations.
"""

from __future__ import annotations

import numpy as np

from .armodels import _companion_sandwich
from .errors import FilterInstabilityError

_DIVERGENCE_LIMIT = 1e12
_GAIN_FREEZE_RTOL = 1e-14


def _check(arr: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > _DIVERGENCE_LIMIT:
        raise FilterInstabilityError("batched filter diverged", step=step)


def _akf_gain_schedule(
    phi: np.ndarray, P0: np.ndarray, sigma2: float, R: float, T: int
) -> np.ndarray:
    """Gains of the companion-form filter for T steps, frozen at steady state."""
    q = phi.size
    gains = np.empty((T, q))
    P = P0.copy()
    g_prev = None
    for i in range(T):
        P = _companion_sandwich(phi, P)
        P[0, 0] += sigma2
        PHt = P[:, 0].copy()
        s = PHt[0] + R
        if s <= 0 or not np.isfinite(s):
            raise FilterInstabilityError("innovation variance is not positive", step=i)
        g = PHt / s
        gains[i] = g
        P -= np.outer(g, PHt)
        P = 0.5 * (P + P.T)
        if g_prev is not None:
            scale = max(float(np.max(np.abs(g))), 1e-300)
            if float(np.max(np.abs(g - g_prev))) <= _GAIN_FREEZE_RTOL * scale:
                gains[i + 1 :] = g
                return gains
        g_prev = g
    return gains


def akf_filter_forecast(
    records: np.ndarray,
    phis: np.ndarray,
    sigma2: float,
    R: float,
    horizon: int,
):
    """Run the autoregressive filter on every member and forecast ahead.

    Parameters
    ----------
    records : (M, T) array
        Linear records, one row per member.
    phis : (M, q) array
        Per-member lag coefficients.
    sigma2, R : float
        Process and measurement noise variances under trial.
    horizon : int
        Zero-gain forecast length.

    Returns
    -------
    estimates : (M, T) array of posterior measurement estimates.
    predictions : (M, horizon) array of forecast measurements.
    """
    records = np.asarray(records, dtype=float)
    phis = np.asarray(phis, dtype=float)
    M, T = records.shape
    q = phis.shape[1]

    var = np.var(records, axis=1)
    var[var <= 0] = 1.0
    all_gains = np.empty((M, T, q))
    for m in range(M):
        all_gains[m] = _akf_gain_schedule(
            phis[m], var[m] * np.eye(q), sigma2, R, T
        )

    # State recursion, vectorized over members: lag window seeded with the
    # first q samples (most recent first).
    X = records[:, :q][:, ::-1].copy()
    estimates = np.empty((M, T))
    for i in range(T):
        top = np.einsum("mj,mj->m", phis, X)
        X[:, 1:] = X[:, :-1]
        X[:, 0] = top
        innovation = records[:, i] - X[:, 0]
        X += all_gains[:, i, :] * innovation[:, None]
        estimates[:, i] = X[:, 0]
        if i % 256 == 0:
            _check(X, i)
    _check(estimates, T - 1)

    predictions = np.empty((M, horizon))
    for k in range(horizon):
        top = np.einsum("mj,mj->m", phis, X)
        X[:, 1:] = X[:, :-1]
        X[:, 0] = top
        predictions[:, k] = top
    _check(predictions, horizon)
    return estimates, predictions


def _block_predict(blocks: np.ndarray, P: np.ndarray, nf: int) -> np.ndarray:
    """Phi P Phi^T for the shared block-rotation dynamics; P is (M, 2nf, 2nf)."""
    M = P.shape[0]
    P5 = P.reshape(M, nf, 2, nf, 2)
    left = np.einsum("jac,mjckb->mjakb", blocks, P5)
    full = np.einsum("mjakc,kbc->mjakb", left, blocks)
    return full.reshape(M, 2 * nf, 2 * nf)


def lkffb_filter_forecast(
    records: np.ndarray,
    blocks: np.ndarray,
    sigma2: float,
    R: float,
    horizon: int,
    norm_floor: float = 1e-12,
):
    """Run the oscillator-bank filter on every member and forecast ahead.

    ``blocks`` is the (nf, 2, 2) stack of per-frequency rotations shared by
    all members.  The state-dependent noise direction Phi x / ||x|| falls back
    to a uniform unit vector wherever a member's state is still at the origin.
    """
    records = np.asarray(records, dtype=float)
    M, T = records.shape
    nf = blocks.shape[0]
    dim = 2 * nf

    def apply_dyn(x):
        return np.einsum("jab,mjb->mja", blocks, x.reshape(M, nf, 2)).reshape(M, dim)

    mean = np.zeros((M, dim))
    var = np.var(records, axis=1)
    var[var <= 0] = 1.0
    P = var[:, None, None] * np.eye(dim)[None, :, :]
    uniform = np.full(dim, 1.0 / np.sqrt(dim))

    estimates = np.empty((M, T))
    for i in range(T):
        if sigma2 > 0:
            norms = np.linalg.norm(mean, axis=1)
            safe = norms >= norm_floor
            directions = np.where(
                safe[:, None], mean / np.where(safe, norms, 1.0)[:, None], uniform
            )
            gam = apply_dyn(directions)
        mean = apply_dyn(mean)
        P = _block_predict(blocks, P, nf)
        if sigma2 > 0:
            P = P + sigma2 * gam[:, :, None] * gam[:, None, :]
        P = 0.5 * (P + np.swapaxes(P, 1, 2))

        PHt = P[:, :, 0::2].sum(axis=2)
        s = PHt[:, 0::2].sum(axis=1) + R
        if np.any(s <= 0):
            raise FilterInstabilityError("innovation variance is not positive", step=i)
        gain = PHt / s[:, None]
        innovation = records[:, i] - mean[:, 0::2].sum(axis=1)
        mean = mean + gain * innovation[:, None]
        P = P - gain[:, :, None] * PHt[:, None, :]
        P = 0.5 * (P + np.swapaxes(P, 1, 2))
        estimates[:, i] = mean[:, 0::2].sum(axis=1)
        if i % 64 == 0:
            _check(mean, i)
    _check(mean, T - 1)

    predictions = np.empty((M, horizon))
    for k in range(horizon):
        mean = apply_dyn(mean)
        predictions[:, k] = mean[:, 0::2].sum(axis=1)
    _check(predictions, horizon)
    return estimates, predictions
