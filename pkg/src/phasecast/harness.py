"""End-to-end experiment orchestration.

An experiment is described by a JSON config (strictly validated: unknown keys
are rejected) naming the truth process, the measurement model, the algorithms
to run, and the tuning budget.  Running it synthesizes an ensemble of truth
realisations and noisy records, trains the lag predictors, tunes each
filter's noise scales by Bayes-risk search, and aggregates normalized risk
curves, prediction horizons, and spectral estimates into CSV/JSON files under

    <out>/<config-name>/<algorithm>/risk.csv | tuning.json | spectrum.csv

All randomness is derived from the single master seed, and results are
reduced in member-index order, so outputs are byte-identical regardless of
the worker-thread count.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import batchrun
from .armodels import ArCoefficients, ar_spectral_density, check_stationarity, ar_simulate, train_lsf
from .errors import ParameterError
from .gpr import KernelSpec, gpr_predict, optimize_hyperparams
from .kalman import diffuse_initial_state, run_filter
from .lkffb import (
    build_basis,
    build_lkffb,
    extract_amp_phase,
    optimal_training_time,
    rotation_block,
)
from .measurement import (
    BinaryRecord,
    LinearRecord,
    MeasurementSpec,
    half_cosine,
    linearize,
    make_binary_record,
)
from .noise import NoiseSpec, TruthRealisation, synthesize_truth
from .qkf import QkfModel, qkf_forecast, run_qkf
from .risk import RiskCurve, TuningResult, bayes_risk, normalized_risk, tune_sigma_R
from .tableio import write_csv, write_json

SCHEMA_VERSION = 1

# Ratio conventions for the lag order; deviations are legal but warned about.
_Q_DT_RATIO = 0.1
_Q_NT_RATIO = 0.05

_ALGORITHM_KINDS = ("LSF", "AKF", "LKFFB", "QKF", "GPR")


def _reject_unknown(payload: dict, allowed, context: str) -> None:
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ParameterError(f"unknown {context} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class TuningConfig:
    K: int = 40
    n_L: int = 50
    decades: float = 10.0
    horizon_threshold: float = 1.0

    @classmethod
    def from_dict(cls, payload: dict) -> "TuningConfig":
        _reject_unknown(payload, ("K", "n_L", "decades", "horizon_threshold"), "tuning")
        return cls(**payload)


@dataclass(frozen=True)
class AlgorithmConfig:
    """One algorithm entry: a kind plus its settings dict (already validated)."""

    kind: str
    label: str
    settings: dict

    _ALLOWED = {
        "LSF": {"q"},
        "AKF": {"q"},
        "LKFFB": {"basis_kind", "f0_hz", "num_osc"},
        "QKF": {"q", "perfect_model", "sigma2", "R", "true_sigma"},
        "GPR": {"kernel", "optimize", "bounds", "test_start"},
    }

    @classmethod
    def from_dict(cls, payload: dict) -> "AlgorithmConfig":
        if "kind" not in payload:
            raise ParameterError("algorithm entry needs a 'kind'")
        kind = payload["kind"]
        if kind not in _ALGORITHM_KINDS:
            raise ParameterError(f"unknown algorithm kind {kind!r}")
        settings = {k: v for k, v in payload.items() if k not in ("kind", "label")}
        _reject_unknown(settings, cls._ALLOWED[kind], f"{kind} settings")
        label = payload.get("label", kind.lower())
        return cls(kind=kind, label=label, settings=settings)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    noise: NoiseSpec
    measurement: MeasurementSpec
    algorithms: tuple[AlgorithmConfig, ...]
    tuning: TuningConfig
    ensemble: int
    master_seed: int
    figure: str = ""

    _ALLOWED = {
        "schema_version",
        "name",
        "figure",
        "noise",
        "measurement",
        "algorithms",
        "tuning",
        "ensemble",
        "master_seed",
    }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        _reject_unknown(payload, cls._ALLOWED, "config")
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ParameterError(
                f"schema_version must be {SCHEMA_VERSION}, got {version!r}"
            )
        for key in ("name", "noise", "algorithms", "ensemble", "master_seed"):
            if key not in payload:
                raise ParameterError(f"config is missing {key!r}")
        meas = dict(payload.get("measurement", {"noise_level": 0.0}))
        _reject_unknown(meas, ("noise_level", "tau_info"), "measurement")
        config = cls(
            name=str(payload["name"]),
            noise=NoiseSpec.from_dict(payload["noise"]),
            measurement=MeasurementSpec(**meas),
            algorithms=tuple(
                AlgorithmConfig.from_dict(a) for a in payload["algorithms"]
            ),
            tuning=TuningConfig.from_dict(payload.get("tuning", {})),
            ensemble=int(payload["ensemble"]),
            master_seed=int(payload["master_seed"]),
            figure=str(payload.get("figure", "")),
        )
        if config.ensemble < 2:
            raise ParameterError("ensemble must be >= 2")
        config._warn_ratio_deviations()
        return config

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def _warn_ratio_deviations(self) -> None:
        for algo in self.algorithms:
            q = algo.settings.get("q")
            if q is None:
                continue
            q_dt = q * self.noise.dt
            q_nt = q / self.noise.num_train
            if not (np.isclose(q_dt, _Q_DT_RATIO) and np.isclose(q_nt, _Q_NT_RATIO)):
                warnings.warn(
                    f"{algo.kind}: q*dt={q_dt:g} and q/N_T={q_nt:g} deviate from "
                    f"the reference ratios ({_Q_DT_RATIO}, {_Q_NT_RATIO})",
                    stacklevel=3,
                )


@dataclass
class EnsembleMember:
    index: int
    truth: TruthRealisation
    record: LinearRecord
    binary: Optional[BinaryRecord] = None
    coeffs: Optional[ArCoefficients] = None
    lsf_weights: Optional[np.ndarray] = None


@dataclass
class AlgorithmResult:
    label: str
    kind: str
    risk_curve: RiskCurve
    horizon: int
    tuning: Optional[TuningResult] = None
    spectrum: Optional[dict] = None
    wallclock_s: float = 0.0
    extras: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    algorithms: dict
    num_member_failures: int
    wallclock_s: float

    def get(self, kind: str) -> AlgorithmResult:
        for res in self.algorithms.values():
            if res.kind == kind:
                return res
        raise KeyError(f"no algorithm of kind {kind} in result")


def _member_seeds(master_seed: int, count: int) -> np.ndarray:
    rng = np.random.default_rng(master_seed)
    return rng.integers(0, 2**63 - 1, size=(count + 1, 4), dtype=np.int64)


def _needs_lsf(config: ExperimentConfig) -> Optional[int]:
    for algo in config.algorithms:
        if algo.kind in ("LSF", "AKF", "QKF"):
            return int(algo.settings.get("q", round(_Q_DT_RATIO / config.noise.dt)))
    return None


def _build_member(config, seeds, index, q, needs_binary, horizons):
    truth = synthesize_truth(config.noise, int(seeds[index, 0]))
    mspec = MeasurementSpec(
        noise_level=config.measurement.noise_level,
        tau_info=config.measurement.tau_info,
        seed=int(seeds[index, 1]),
    )
    record = linearize(truth, mspec)
    member = EnsembleMember(index=index, truth=truth, record=record)
    if needs_binary:
        member.binary = make_binary_record(
            truth,
            MeasurementSpec(
                noise_level=config.measurement.noise_level,
                tau_info=config.measurement.tau_info,
                seed=int(seeds[index, 2]),
            ),
        )
    if q is not None:
        lsf = train_lsf(record, q=q, horizons=horizons)
        member.lsf_weights = lsf.weights
        member.coeffs = lsf.coefficients(1)
    return member


def run_experiment(
    config: ExperimentConfig, out_dir=None, threads: int = 1
) -> ExperimentResult:
    """Execute a full experiment; optionally write its output tree."""
    t_start = time.time()
    seeds = _member_seeds(config.master_seed, config.ensemble)
    q = _needs_lsf(config)
    needs_binary = any(a.kind == "QKF" for a in config.algorithms)
    horizons = config.noise.num_predict + 1

    members: list[Optional[EnsembleMember]] = [None] * config.ensemble
    failures = 0
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _build_member, config, seeds, m, q, needs_binary, horizons
                )
                for m in range(config.ensemble)
            ]
        for m, fut in enumerate(futures):
            try:
                members[m] = fut.result()
            except Exception as err:  # noqa: BLE001 - member isolation
                warnings.warn(f"member {m} failed: {err}", stacklevel=2)
                failures += 1
    else:
        for m in range(config.ensemble):
            try:
                members[m] = _build_member(
                    config, seeds, m, q, needs_binary, horizons
                )
            except Exception as err:  # noqa: BLE001 - member isolation
                warnings.warn(f"member {m} failed: {err}", stacklevel=2)
                failures += 1

    if failures > 0.2 * config.ensemble:
        raise RuntimeError(
            f"{failures}/{config.ensemble} ensemble members failed; aborting"
        )
    live = [m for m in members if m is not None]

    results: dict[str, AlgorithmResult] = {}
    for algo in config.algorithms:
        t0 = time.time()
        if algo.kind == "LSF":
            res = _run_lsf(config, algo, live)
        elif algo.kind == "AKF":
            res = _run_akf(config, algo, live, seeds)
        elif algo.kind == "LKFFB":
            res = _run_lkffb(config, algo, live, seeds)
        elif algo.kind == "QKF":
            res = _run_qkf(config, algo, live, seeds)
        else:
            res = _run_gpr(config, algo, live, threads)
        res.wallclock_s = time.time() - t0
        results[algo.label] = res

    result = ExperimentResult(
        config=config,
        algorithms=results,
        num_member_failures=failures,
        wallclock_s=time.time() - t_start,
    )
    if out_dir is not None:
        write_outputs(result, out_dir, members=live)
    return result


def _prediction_truths(members) -> np.ndarray:
    return np.array([m.truth.future_values for m in members])


def _curve_and_horizon(config, truths, preds, center=False):
    curve = normalized_risk(
        bayes_risk(truths, preds), truths, start_step=0, center=center
    )
    return curve, curve.horizon(config.tuning.horizon_threshold)


def _run_lsf(config, algo, members) -> AlgorithmResult:
    NP = config.noise.num_predict
    preds = np.empty((len(members), NP + 1))
    for i, member in enumerate(members):
        window = member.record.values[-member.coeffs.order :][::-1]
        w = member.lsf_weights  # (horizons, q+1)
        preds[i] = w[:, :-1] @ window + w[:, -1]
    truths = _prediction_truths(members)
    curve, horizon = _curve_and_horizon(config, truths, preds)
    return AlgorithmResult(
        label=algo.label, kind="LSF", risk_curve=curve, horizon=horizon
    )


def _tuning_windows(config, members):
    n_L = config.tuning.n_L
    truth_tail = np.array([m.truth.training_values[-n_L:] for m in members])
    truth_pred = np.array([m.truth.future_values[1 : n_L + 1] for m in members])
    return n_L, truth_tail, truth_pred


def _run_akf(config, algo, members, seeds) -> AlgorithmResult:
    NP = config.noise.num_predict
    records = np.array([m.record.values for m in members])
    phis = np.array([m.coeffs.phi for m in members])
    n_L, truth_tail, truth_pred = _tuning_windows(config, members)

    def evaluate(sigma2, R):
        est, preds = batchrun.akf_filter_forecast(records, phis, sigma2, R, NP + 1)
        ls = float(np.mean(np.sum((est[:, -n_L:] - truth_tail) ** 2, axis=1)))
        lp = float(np.mean(np.sum((preds[:, 1 : n_L + 1] - truth_pred) ** 2, axis=1)))
        return ls, lp

    anchor = float(np.mean(np.var(records, axis=1)))
    tuning = tune_sigma_R(
        evaluate,
        K=config.tuning.K,
        anchor_variance=anchor,
        decades=config.tuning.decades,
        seed=int(seeds[-1, 0]),
    )
    _, preds = batchrun.akf_filter_forecast(
        records, phis, tuning.chosen_sigma2, tuning.chosen_R, NP + 1
    )
    truths = _prediction_truths(members)
    curve, horizon = _curve_and_horizon(config, truths, preds)

    stationary, moduli = check_stationarity(members[0].coeffs)
    if not stationary:
        warnings.warn(
            f"learned coefficients are non-stationary (max |lambda| = "
            f"{moduli.max():.6f}); forecasts flagged",
            stacklevel=2,
        )
    return AlgorithmResult(
        label=algo.label,
        kind="AKF",
        risk_curve=curve,
        horizon=horizon,
        tuning=tuning,
        extras={
            "coeffs": members[0].coeffs,
            "sigma2_star": tuning.chosen_sigma2,
            "stationary": stationary,
        },
    )


def _lkffb_basis(config, algo):
    nt = config.noise.num_train
    f0 = algo.settings.get("f0_hz") or 1.0 / (nt * config.noise.dt)
    kind = algo.settings.get("basis_kind", "A")
    num_osc = algo.settings.get("num_osc", 100)
    return build_basis(kind, f0, num_osc, config.noise.dt, nt)


def _run_lkffb(config, algo, members, seeds) -> AlgorithmResult:
    NP = config.noise.num_predict
    basis = _lkffb_basis(config, algo)
    blocks = np.stack(
        [rotation_block(2.0 * np.pi * f * config.noise.dt) for f in basis.frequencies]
    )
    records = np.array([m.record.values for m in members])
    n_L, truth_tail, truth_pred = _tuning_windows(config, members)

    def evaluate(sigma2, R):
        est, preds = batchrun.lkffb_filter_forecast(
            records, blocks, sigma2, R, NP + 1
        )
        ls = float(np.mean(np.sum((est[:, -n_L:] - truth_tail) ** 2, axis=1)))
        lp = float(np.mean(np.sum((preds[:, 1 : n_L + 1] - truth_pred) ** 2, axis=1)))
        return ls, lp

    anchor = float(np.mean(np.var(records, axis=1)))
    tuning = tune_sigma_R(
        evaluate,
        K=config.tuning.K,
        anchor_variance=anchor,
        decades=config.tuning.decades,
        seed=int(seeds[-1, 1]),
    )
    _, preds = batchrun.lkffb_filter_forecast(
        records, blocks, tuning.chosen_sigma2, tuning.chosen_R, NP + 1
    )
    truths = _prediction_truths(members)
    curve, horizon = _curve_and_horizon(config, truths, preds)

    # Spectral estimate: amplitudes extracted at the aligned training step of
    # a single representative run.
    model = build_lkffb(basis, tuning.chosen_sigma2, tuning.chosen_R)
    init = diffuse_initial_state(model.dim, records[0])
    traj = run_filter(records[0], model, init)
    n_c = min(optimal_training_time(basis), len(traj))
    extraction = extract_amp_phase(traj, basis, at_step=n_c)
    return AlgorithmResult(
        label=algo.label,
        kind="LKFFB",
        risk_curve=curve,
        horizon=horizon,
        tuning=tuning,
        extras={"basis": basis, "extraction": extraction},
    )


def _run_qkf(config, algo, members, seeds) -> AlgorithmResult:
    NP = config.noise.num_predict
    n_L = config.tuning.n_L
    q = algo.settings.get("q", members[0].coeffs.order)
    perfect = bool(algo.settings.get("perfect_model", False))

    if perfect:
        # Truth is re-generated from the learned lag model itself, so the
        # filter's dynamics match the process exactly; sigma is the lag fit's
        # residual scale unless overridden.
        coeffs = members[0].coeffs
        sigma_true = algo.settings.get("true_sigma")
        if sigma_true is None:
            sigma_true = _residual_sigma(members[0])
        length = config.noise.num_steps
        runs = []
        for i, member in enumerate(members):
            values = ar_simulate(
                coeffs, sigma_true, length, seed=int(seeds[member.index, 3])
            )
            truth = TruthRealisation(
                spec=config.noise, values=values, phases=np.empty(0), seed=None
            )
            mspec = MeasurementSpec(
                noise_level=config.measurement.noise_level,
                seed=int(seeds[member.index, 2]),
            )
            binary = make_binary_record(truth, mspec)
            runs.append((truth, binary))
        sigma2 = algo.settings.get("sigma2")
        if sigma2 is None:
            sigma2 = float(sigma_true) ** 2
        # The filter consumes raw bits, so its residuals carry Bernoulli
        # quantisation noise on top of the Gaussian corruption; 1/4 is the
        # bias-variance bound p(1-p) <= 1/4.  Feeding it the linear-record R
        # alone makes the gain chase coin noise and the filter diverges.
        R = algo.settings.get("R")
        if R is None:
            R = 0.25 + runs[0][1].noise_variance
    else:
        coeffs = members[0].coeffs
        runs = [(m.truth, m.binary) for m in members]
        sigma2 = algo.settings.get("sigma2")
        R = algo.settings.get("R")
        if sigma2 is None or R is None:
            raise ParameterError(
                "QKF without perfect_model requires explicit sigma2 and R "
                "(tuning the quantised filter is out of the harness's budget)"
            )

    truths_z = np.array([half_cosine(truth.future_values) for truth, _ in runs])
    preds_z = np.empty_like(truths_z)
    clamp_fractions = []
    for i, (truth, binary) in enumerate(runs):
        model = QkfModel(
            coeffs=coeffs,
            sigma2=sigma2,
            R=R,
            quantizer_seed=int(seeds[i, 3]) ^ 0x5EED,
        )
        traj = run_qkf(binary, model)
        clamp_fractions.append(traj.clamp_fraction)
        preds_z[i] = qkf_forecast(traj.final_state, model, NP + 1).measurements

    curve, horizon = _curve_and_horizon(config, truths_z, preds_z, center=True)
    return AlgorithmResult(
        label=algo.label,
        kind="QKF",
        risk_curve=curve,
        horizon=horizon,
        extras={
            "sigma2": sigma2,
            "R": R,
            "clamp_fraction": float(np.mean(clamp_fractions)),
            "perfect_model": perfect,
        },
    )


def _residual_sigma(member) -> float:
    """Innovation scale of the one-step lag fit (rms residual)."""
    y = member.record.values
    coeffs = member.coeffs
    q = coeffs.order
    idx = np.arange(q - 1, y.size - 1)
    windows = y[idx[:, None] - np.arange(q)[None, :]]
    fitted = windows @ coeffs.phi + coeffs.offset
    return float(np.sqrt(np.mean((y[idx + 1] - fitted) ** 2)))


def _run_gpr(config, algo, members, threads=1) -> AlgorithmResult:
    NP = config.noise.num_predict
    dt = config.noise.dt
    spec = KernelSpec.from_dict(algo.settings["kernel"])
    R = members[0].record.noise_variance
    tuned = None
    if algo.settings.get("optimize", False):
        bounds = {
            name: tuple(pair)
            for name, pair in algo.settings.get("bounds", {}).items()
        }
        tuned = optimize_hyperparams(
            members[0].record, spec, R, dt, bounds=bounds
        )
        spec, R = tuned.spec, tuned.R

    test_steps = np.arange(0, NP + 1)

    def predict_one(member):
        return gpr_predict(member.record, spec, R, test_steps, dt).mean

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = np.array(list(pool.map(predict_one, members)))
    else:
        preds = np.array([predict_one(m) for m in members])
    truths = _prediction_truths(members)
    curve, horizon = _curve_and_horizon(config, truths, preds)
    member0 = gpr_predict(members[0].record, spec, R, test_steps, dt)
    return AlgorithmResult(
        label=algo.label,
        kind="GPR",
        risk_curve=curve,
        horizon=horizon,
        extras={"kernel": spec, "R": R, "prediction": member0, "optimized": tuned},
    )


def spectrum_grid_and_true(config, result) -> tuple[np.ndarray, np.ndarray]:
    """Shared angular-frequency grid (rad/s) and the truth's flat density on it."""
    noise_spec = config.noise
    cutoff = 2.0 * np.pi * noise_spec.omega0_hz * noise_spec.num_components
    try:
        lk = result.get("LKFFB")
        grid = 2.0 * np.pi * lk.extras["basis"].frequencies
        grid = grid[grid > 0]
    except KeyError:
        nyquist = np.pi / noise_spec.dt
        grid = np.linspace(nyquist / 256, nyquist / 2, 128)
    from .noise import analytic_covariance

    total_var = analytic_covariance(noise_spec, 0)
    level = total_var / (2.0 * cutoff)
    s_true = np.where(grid <= cutoff, level, 0.0)
    return grid, s_true


def spectral_report(result: ExperimentResult, path) -> None:
    """Merged spectrum CSV: truth, lag-model, and oscillator-bank estimates."""
    config = result.config
    grid, s_true = spectrum_grid_and_true(config, result)
    dt = config.noise.dt

    s_akf = np.full(grid.size, np.nan)
    try:
        akf = result.get("AKF")
        coeffs = akf.extras["coeffs"]
        sigma2 = akf.extras["sigma2_star"]
        omega_samples = np.clip(grid * dt, 1e-12, np.pi)
        s_akf = ar_spectral_density(coeffs, sigma2, omega_samples) * dt
    except KeyError:
        pass

    s_lkffb = np.full(grid.size, np.nan)
    try:
        lk = result.get("LKFFB")
        extraction = lk.extras["extraction"]
        basis = lk.extras["basis"]
        freqs = 2.0 * np.pi * basis.frequencies
        keep = freqs > 0
        # Each oscillator carries amplitude^2/2 of variance over one comb
        # spacing (two-sided): density = amp^2 / (4 * w0).
        dens = extraction.amplitudes[keep] ** 2 / (
            4.0 * 2.0 * np.pi * basis.f0_hz
        )
        s_lkffb = np.interp(grid, freqs[keep], dens)
    except KeyError:
        pass

    write_csv(
        path,
        ("omega_rad_per_s", "S_true", "S_akf", "S_lkffb"),
        zip(grid, s_true, s_akf, s_lkffb),
    )


def locate_cutoff(omega: np.ndarray, S: np.ndarray) -> float:
    """Frequency of the largest log-drop between adjacent spectrum samples."""
    S = np.asarray(S, dtype=float)
    floor = np.max(S) * 1e-300 + 1e-300
    logs = np.log10(np.maximum(S, floor))
    drops = logs[:-1] - logs[1:]
    return float(omega[int(np.argmax(drops))])


def write_outputs(result: ExperimentResult, out_dir, members=None) -> None:
    base = os.path.join(out_dir, result.config.name)
    os.makedirs(base, exist_ok=True)
    if members:
        members[0].truth.to_csv(os.path.join(base, "truth.csv"))
    has_spectral = False
    for label, algo in result.algorithms.items():
        adir = os.path.join(base, label)
        os.makedirs(adir, exist_ok=True)
        algo.risk_curve.to_csv(os.path.join(adir, "risk.csv"))
        if algo.tuning is not None:
            algo.tuning.to_json(os.path.join(adir, "tuning.json"))
        if algo.kind == "GPR":
            algo.extras["prediction"].to_csv(os.path.join(adir, "predictions.csv"))
            write_json(
                os.path.join(adir, "kernel.json"),
                json.loads(algo.extras["kernel"].to_json()),
            )
        if algo.kind == "LKFFB":
            algo.extras["extraction"].to_csv(os.path.join(adir, "extraction.csv"))
        if algo.kind in ("AKF", "LKFFB"):
            has_spectral = True
    if has_spectral:
        for label, algo in result.algorithms.items():
            if algo.kind in ("AKF", "LKFFB"):
                spectral_report(
                    result, os.path.join(base, label, "spectrum.csv")
                )
    summary = {
        "name": result.config.name,
        "figure": result.config.figure,
        "member_failures": result.num_member_failures,
        "wallclock_s": result.wallclock_s,
        "horizons": {
            label: a.horizon for label, a in result.algorithms.items()
        },
        "tuning_failed": {
            label: bool(a.tuning.failed)
            for label, a in result.algorithms.items()
            if a.tuning is not None
        },
    }
    write_json(os.path.join(base, "summary.json"), summary)
