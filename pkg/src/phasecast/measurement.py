"""Measurement models: pre-processed linear records and single-shot bit records.

A linear record adds white Gaussian noise to the true phases over the training
window n = -N_T .. -1.  A binary record draws one bit per step from a biased
coin whose bias follows Born's rule, Pr(d=1|f) = cos^2(f/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .noise import TruthRealisation, truth_spread
from .tableio import write_csv


@dataclass(frozen=True)
class MeasurementSpec:
    """Measurement-noise level plus informational metadata.

    ``tau_info`` (the Ramsey wait time, seconds) is carried for bookkeeping
    only and never enters any computation.
    """

    noise_level: float
    tau_info: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.noise_level < 0:
            raise ParameterError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass(frozen=True)
class LinearRecord:
    """Noisy phases y_n = f_n + v_n over n = -N_T .. -1."""

    values: np.ndarray
    noise_variance: float

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ParameterError("noise_variance must be >= 0")

    def __len__(self) -> int:
        return len(self.values)

    def to_csv(self, path) -> None:
        n0 = -len(self.values)
        write_csv(
            path,
            ("n", "y_rad"),
            ((n0 + i, float(v)) for i, v in enumerate(self.values)),
        )


@dataclass(frozen=True)
class BinaryRecord:
    """Single-shot outcomes d_n in {0, 1} over n = -N_T .. -1."""

    bits: np.ndarray
    noise_variance: float
    clamp_count: int = 0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise ParameterError("bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    def to_csv(self, path) -> None:
        n0 = -len(self.bits)
        write_csv(
            path,
            ("n", "d_bit"),
            ((n0 + i, int(b)) for i, b in enumerate(self.bits)),
        )


def derive_R(realisation: TruthRealisation, noise_level: float) -> float:
    """Measurement-noise variance implied by a fractional noise level.

    The noise level is sqrt(R) divided by three sample standard deviations of
    the truth, so R = (noise_level * spread)^2.  A zero noise level always
    yields R = 0; a degenerate (constant) truth with a nonzero level raises.
    """
    if noise_level < 0:
        raise ParameterError("noise_level must be >= 0")
    if noise_level == 0:
        return 0.0
    spread = truth_spread(realisation)
    if spread <= 0:
        raise DegenerateInputError(
            "truth has zero spread; noise level is undefined"
        )
    return float((noise_level * spread) ** 2)


def linearize(realisation: TruthRealisation, spec: MeasurementSpec) -> LinearRecord:
    """Build the pre-processed record y_n = f_n + v_n, v_n ~ N(0, R)."""
    R = derive_R(realisation, spec.noise_level)
    train = realisation.training_values
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, np.sqrt(R), size=train.size) if R > 0 else 0.0
    return LinearRecord(values=train + noise, noise_variance=R)


def born_probability(f) -> float | np.ndarray:
    """Probability of observing the bit 1 given an accumulated phase f (rad)."""
    return np.cos(np.asarray(f, dtype=float) / 2.0) ** 2


def half_cosine(f) -> float | np.ndarray:
    """Coin-flip bias h(f) = cos(f)/2, the zero-centred form of Born's rule."""
    return np.cos(np.asarray(f, dtype=float)) / 2.0


def clamp_bias(y):
    """Clamp a coin bias input onto [-1/2, 1/2]; returns (clamped, was_clamped)."""
    y = np.asarray(y, dtype=float)
    clamped = np.clip(y, -0.5, 0.5)
    return clamped, np.any(clamped != y)


def quantize(bias_input: float, rng: np.random.Generator) -> int:
    """Draw one bit from a coin with bias ``bias_input + 1/2``.

    Inputs are clamped to [-1/2, 1/2] first, so the success probability is
    always a valid probability.
    """
    clamped, _ = clamp_bias(bias_input)
    return int(rng.random() < clamped + 0.5)


def make_binary_record(
    realisation: TruthRealisation, spec: MeasurementSpec
) -> BinaryRecord:
    """Sample the single-shot record d_n = Q(h(f_n) + v_n) over the training window."""
    R = derive_R(realisation, spec.noise_level)
    train = realisation.training_values
    rng = np.random.default_rng(spec.seed)
    biased = half_cosine(train)
    if R > 0:
        biased = biased + rng.normal(0.0, np.sqrt(R), size=train.size)
    clamped = np.clip(biased, -0.5, 0.5)
    clamp_count = int(np.sum(clamped != biased))
    bits = (rng.random(train.size) < clamped + 0.5).astype(np.int64)
    return BinaryRecord(bits=bits, noise_variance=R, clamp_count=clamp_count)
