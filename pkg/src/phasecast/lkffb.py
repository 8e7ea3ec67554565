"""Kalman filtering on a fixed bank of oscillators.

Each basis frequency owns a two-component sub-state rotated by a 2x2 block

    Theta(a) = [[cos a, -sin a], [sin a, cos a]],   a = 2*pi*f_j*dt,

and the observation sums the first (real) component of every sub-state.
Process noise is shaped along the propagated state direction,
Gamma = Phi x / ||x||, which makes the noise injection state-dependent and
rules out gain pre-computation.  Forecasts can run either as the zero-gain
recursion or as a harmonic sum over extracted amplitudes and phases; the two
agree when the basis is aligned with the record (see ``phase_correction``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .kalman import FilterTrajectory, KalmanModel
from .tableio import write_csv

_BASIS_KINDS = ("A", "B", "C")

# Below this norm the state direction is undefined and a uniform unit vector
# is substituted so that noise can push the state away from the origin.
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LkffbBasis:
    """A fixed frequency comb for the oscillator bank.

    Kind A spaces frequencies regularly at multiples of ``f0_hz``.  Kinds B
    and C prepend the record's Fourier resolution 1/(N*dt) as an offset, with
    C also keeping a zero-frequency (DC) oscillator.
    """

    kind: str
    f0_hz: float
    num_osc: int
    dt: float
    num_train: int
    frequencies: np.ndarray

    @property
    def num_frequencies(self) -> int:
        return int(self.frequencies.size)

    @property
    def fourier_resolution_hz(self) -> float:
        return 1.0 / (self.num_train * self.dt)


def build_basis(
    kind: str, f0_hz: float, num_osc: int, dt: float, num_train: int
) -> LkffbBasis:
    if kind not in _BASIS_KINDS:
        raise ParameterError(f"kind must be one of {_BASIS_KINDS}, got {kind!r}")
    if f0_hz <= 0 or dt <= 0:
        raise ParameterError("f0_hz and dt must be > 0")
    if num_osc < 1 or num_train < 1:
        raise ParameterError("num_osc and num_train must be >= 1")

    f_res = 1.0 / (num_train * dt)
    j = np.arange(num_osc, dtype=float)
    if kind == "A":
        freqs = f0_hz * (j + 1.0)
    elif kind == "B":
        freqs = f_res + f0_hz * j
    else:  # C: the B comb plus an explicit DC component
        freqs = np.concatenate(([0.0], f_res + f0_hz * j))
    if np.any(np.diff(freqs) <= 0):
        raise ParameterError("basis frequencies must be strictly increasing")
    return LkffbBasis(
        kind=kind,
        f0_hz=f0_hz,
        num_osc=num_osc,
        dt=dt,
        num_train=num_train,
        frequencies=freqs,
    )


def rotation_block(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def build_lkffb(basis: LkffbBasis, sigma2: float, R: float) -> KalmanModel:
    """Assemble the stacked-resonator Kalman model for a basis."""
    nf = basis.num_frequencies
    angles = 2.0 * np.pi * basis.frequencies * basis.dt
    blocks = np.stack([rotation_block(a) for a in angles])  # (nf, 2, 2)
    dim = 2 * nf

    phi = np.zeros((dim, dim))
    for j in range(nf):
        phi[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = blocks[j]
    H = np.zeros(dim)
    H[0::2] = 1.0

    def apply_dynamics(x):
        xb = x.reshape(nf, 2)
        return np.einsum("jab,jb->ja", blocks, xb).reshape(dim)

    def propagate_cov(P):
        # (Phi P) Phi^T using the block structure: rotate row pairs, then
        # column pairs.  O(dim^2) per step instead of dense O(dim^3).
        P4 = P.reshape(nf, 2, nf, 2)
        left = np.einsum("jac,jckb->jakb", blocks, P4)
        full = np.einsum("jakc,kbc->jakb", left, blocks)
        return full.reshape(dim, dim)

    def noise_shaper(x):
        propagated = apply_dynamics(x)
        norm = float(np.linalg.norm(x))
        if norm < _NORM_FLOOR:
            unit = np.full(dim, 1.0 / np.sqrt(dim))
            return apply_dynamics(unit)
        return propagated / norm

    return KalmanModel(
        dim=dim,
        dynamics=phi,
        noise_shaper=noise_shaper,
        process_scale=float(sigma2),
        meas_noise=float(R),
        measure=lambda x: float(np.sum(x[0::2])),
        jacobian=lambda x: H,
        apply_dynamics=apply_dynamics,
        propagate_cov=propagate_cov,
    )


@dataclass(frozen=True)
class LkffbExtraction:
    """Instantaneous amplitude and phase of every oscillator at one step."""

    basis: LkffbBasis
    amplitudes: np.ndarray
    phases: np.ndarray
    at_step: int

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ("f_hz", "amplitude", "phase_rad"),
            zip(self.basis.frequencies, self.amplitudes, self.phases),
        )


def extract_amp_phase(
    trajectory: FilterTrajectory, basis: LkffbBasis, at_step: int
) -> LkffbExtraction:
    """Read off per-oscillator amplitude and phase after ``at_step`` updates.

    ``at_step`` counts processed measurements (1-based), so ``at_step == T``
    uses the final posterior.
    """
    if not 1 <= at_step <= len(trajectory):
        raise ParameterError(
            f"at_step must be in 1..{len(trajectory)}, got {at_step}"
        )
    mean = trajectory.means[at_step - 1]
    sub = mean.reshape(basis.num_frequencies, 2)
    amplitudes = np.hypot(sub[:, 0], sub[:, 1])
    phases = np.arctan2(sub[:, 1], sub[:, 0])
    phases[phases == -np.pi] = np.pi  # keep phases in (-pi, pi]
    return LkffbExtraction(
        basis=basis, amplitudes=amplitudes, phases=phases, at_step=at_step
    )


def optimal_training_time(basis: LkffbBasis) -> int:
    """Number of training steps after which extraction is best aligned, 1/(dt*f0)."""
    return int(round(1.0 / (basis.dt * basis.f0_hz)))


def phase_correction(basis: LkffbBasis) -> float:
    """Constant phase offset aligning the harmonic sum with the basis grid.

    Zero for kind A; for kinds B and C it compensates the offset between the
    comb spacing and the record's Fourier resolution.  It vanishes whenever
    f0 equals the Fourier resolution, which is the aligned configuration in
    which the harmonic sum and the zero-gain recursion coincide.
    """
    if basis.kind == "A":
        return 0.0
    return float(
        2.0 * np.pi * (basis.f0_hz - basis.fourier_resolution_hz) / basis.f0_hz
    )


def harmonic_predict(
    extraction: LkffbExtraction, basis: LkffbBasis, num_steps: int
) -> np.ndarray:
    """Forecast ``num_steps`` past the extraction point as a sum of cosines."""
    if num_steps < 1:
        raise ParameterError("num_steps must be >= 1")
    m = np.arange(1, num_steps + 1, dtype=float)
    psi = phase_correction(basis)
    args = (
        2.0 * np.pi * basis.frequencies[None, :] * basis.dt * m[:, None]
        + extraction.phases[None, :]
        + psi
    )
    return (extraction.amplitudes[None, :] * np.cos(args)).sum(axis=1)
