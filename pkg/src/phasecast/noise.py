"""Synthesis of covariance-stationary, mean-square-ergodic dephasing sequences.

The engineered phase process is a finite comb of cosines,

    f_n = alpha * w0 * sum_j  j * F(j) * cos(w_j * n * dt + psi_j),
    F(j) = j**(eta/2 - 1),     w_j = 2*pi*f0*j,

with independent phases psi_j drawn uniformly over a full cycle.  The spectral
shape is controlled by ``eta``; ``eta = 0`` gives a flat-top spectrum with a
sharp cutoff at ``J*f0``.  Frequencies are carried in Hz everywhere; the 2*pi
factors live inside this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .tableio import write_csv

_SPEC_JSON_KEYS = (
    "alpha",
    "omega0_hz",
    "num_components",
    "eta",
    "dt",
    "num_train",
    "num_predict",
)

# Frequency components are summed in blocks of this size so that very dense
# combs (J ~ 1e5) never materialize a (J x N) matrix.
_SYNTH_BLOCK = 4096


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of the engineered dephasing process.

    Attributes
    ----------
    alpha : float
        Dimensionless overall scale (>= 0; zero yields the null process).
    omega0_hz : float
        Fundamental spacing of the frequency comb, in Hz.
    num_components : int
        Number of comb components J.
    eta : float
        Spectral shape exponent; the component amplitude is j**(eta/2).
    dt : float
        Sample interval in seconds.
    num_train : int
        Number of training steps N_T (time steps n = -N_T .. -1).
    num_predict : int
        Number of forecast steps N_P (time steps n = 1 .. N_P; n = 0 is the
        first step after the record ends).
    mean : float
        Process mean, fixed at zero.
    """

    alpha: float
    omega0_hz: float
    num_components: int
    eta: float
    dt: float
    num_train: int
    num_predict: int
    mean: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        if self.omega0_hz <= 0:
            raise ParameterError(f"omega0_hz must be > 0, got {self.omega0_hz}")
        if self.num_components < 1:
            raise ParameterError(
                f"num_components must be >= 1, got {self.num_components}"
            )
        if self.dt <= 0:
            raise ParameterError(f"dt must be > 0, got {self.dt}")
        if self.num_train < 1 or self.num_predict < 0:
            raise ParameterError("num_train must be >= 1 and num_predict >= 0")
        if self.mean != 0.0:
            raise ParameterError("only zero-mean processes are supported")

    @property
    def num_steps(self) -> int:
        """Total realisation length N_T + N_P + 1."""
        return self.num_train + self.num_predict + 1

    def component_amplitudes(self) -> np.ndarray:
        """Amplitudes alpha*w0*j*F(j) of each cosine component, in rad."""
        j = np.arange(1, self.num_components + 1, dtype=float)
        return self.alpha * 2.0 * np.pi * self.omega0_hz * j ** (self.eta / 2.0)

    def component_frequencies_hz(self) -> np.ndarray:
        return self.omega0_hz * np.arange(1, self.num_components + 1, dtype=float)

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in _SPEC_JSON_KEYS}
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "NoiseSpec":
        unknown = set(payload) - set(_SPEC_JSON_KEYS)
        if unknown:
            raise ParameterError(f"unknown NoiseSpec keys: {sorted(unknown)}")
        missing = set(_SPEC_JSON_KEYS) - set(payload)
        if missing:
            raise ParameterError(f"missing NoiseSpec keys: {sorted(missing)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TruthRealisation:
    """One sampled path of the dephasing process.

    ``values[i]`` holds f_n at time step n = i - num_train, so the array spans
    n = -N_T .. N_P inclusive.  Regenerating with the same (spec, seed) is
    bit-exact.
    """

    spec: NoiseSpec
    values: np.ndarray
    phases: np.ndarray
    seed: int | None

    @property
    def training_values(self) -> np.ndarray:
        """Truth over the measurement record, n = -N_T .. -1."""
        return self.values[: self.spec.num_train]

    @property
    def future_values(self) -> np.ndarray:
        """Truth over the forecast region, n = 0 .. N_P."""
        return self.values[self.spec.num_train :]

    def value_at(self, step: int) -> float:
        idx = step + self.spec.num_train
        if idx < 0 or idx >= len(self.values):
            raise ParameterError(f"step {step} outside realisation range")
        return float(self.values[idx])

    def to_csv(self, path) -> None:
        n0 = -self.spec.num_train
        write_csv(
            path,
            ("n", "f_rad"),
            ((n0 + i, float(v) ) for i, v in enumerate(self.values)),
        )


def synthesize_truth(
    spec: NoiseSpec, seed: int | None, phases: np.ndarray | None = None
) -> TruthRealisation:
    """Sample one realisation of the dephasing process.

    Parameters
    ----------
    spec : NoiseSpec
    seed : int or None
        Seed for the phase draws; ignored when ``phases`` is given.
    phases : ndarray, optional
        Explicit component phases (rad), mainly for deterministic tests.
    """
    if phases is None:
        rng = np.random.default_rng(seed)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.num_components)
    else:
        phases = np.asarray(phases, dtype=float)
        if phases.shape != (spec.num_components,):
            raise ParameterError(
                f"expected {spec.num_components} phases, got shape {phases.shape}"
            )

    t = spec.dt * np.arange(-spec.num_train, spec.num_predict + 1, dtype=float)
    amps = spec.component_amplitudes()
    omegas = 2.0 * np.pi * spec.component_frequencies_hz()

    values = np.zeros(spec.num_steps)
    for start in range(0, spec.num_components, _SYNTH_BLOCK):
        stop = min(start + _SYNTH_BLOCK, spec.num_components)
        block = amps[start:stop, None] * np.cos(
            omegas[start:stop, None] * t[None, :] + phases[start:stop, None]
        )
        values += block.sum(axis=0)
    return TruthRealisation(spec=spec, values=values, phases=phases, seed=seed)


def analytic_covariance(spec: NoiseSpec, lag_steps: int) -> float:
    """Ensemble autocovariance R(nu) at a lag of ``lag_steps`` samples.

    For full-cycle uniform phases each component contributes half its squared
    amplitude times a cosine of the lag:  R(nu) = 1/2 sum_j A_j^2 cos(w_j nu dt).
    """
    if lag_steps < 0:
        raise ParameterError("lag_steps must be >= 0")
    amps = spec.component_amplitudes()
    omegas = 2.0 * np.pi * spec.component_frequencies_hz()
    return float(0.5 * np.sum(amps**2 * np.cos(omegas * lag_steps * spec.dt)))


def truth_spread(realisation: TruthRealisation) -> float:
    """Three sample standard deviations of the training segment.

    This is the denominator of the measurement noise level; a constant
    realisation returns 0 and callers dividing by the spread must reject it.
    """
    train = realisation.training_values
    if train.size < 2:
        raise DegenerateInputError("need at least 2 training samples")
    return float(3.0 * np.std(train))


def export_spec_json(spec: NoiseSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")


def flat_top_spec(
    cutoff_hz: float,
    num_components: int,
    dt: float,
    num_train: int,
    num_predict: int,
    alpha: float = 1.0,
) -> NoiseSpec:
    """Convenience constructor for a flat spectrum with a sharp cutoff.

    ``eta = 0`` makes every component amplitude equal, so the comb spans
    (0, cutoff_hz] with spacing cutoff_hz / num_components.
    """
    return NoiseSpec(
        alpha=alpha,
        omega0_hz=cutoff_hz / num_components,
        num_components=num_components,
        eta=0.0,
        dt=dt,
        num_train=num_train,
        num_predict=num_predict,
    )
