"""Command-line harness.

Subcommands
-----------
synth        write one truth realisation as CSV
measure      write the linear (and, if configured, binary) record of member 0
filter       run the first configured algorithm on member 0, write trajectory
tune         tune the first configured algorithm only, write tuning.json
experiment   full ensemble experiment with all outputs
spectrum     run the experiment and write only the spectral report

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .armodels import build_akf
from .errors import ParameterError
from .harness import (
    ExperimentConfig,
    run_experiment,
    spectral_report,
    _build_member,
    _lkffb_basis,
    _member_seeds,
    _needs_lsf,
)
from .kalman import diffuse_initial_state, run_filter
from .lkffb import build_lkffb
from .noise import NoiseSpec, synthesize_truth

USAGE_ERROR = 1
RUNTIME_ERROR = 2


def _add_common(parser):
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("PHASECAST_THREADS", "1")),
        help="worker threads (default: PHASECAST_THREADS or 1)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasecast",
        description="Synthesize dephasing records and benchmark predictive estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "measure", "filter", "tune", "experiment", "spectrum"):
        _add_common(sub.add_parser(name))
    return parser


def _load_config(args) -> ExperimentConfig:
    with open(args.config, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if args.seed is not None and "master_seed" in payload:
        payload["master_seed"] = args.seed
    return ExperimentConfig.from_dict(payload)


def _load_noise_only(args) -> NoiseSpec:
    with open(args.config, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if set(payload) <= {
        "alpha", "omega0_hz", "num_components", "eta", "dt", "num_train", "num_predict",
    }:
        return NoiseSpec.from_dict(payload)
    return ExperimentConfig.from_dict(payload).noise


def cmd_synth(args) -> int:
    spec = _load_noise_only(args)
    seed = args.seed if args.seed is not None else 0
    realisation = synthesize_truth(spec, seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "truth.csv")
    realisation.to_csv(path)
    print(path)
    return 0


def cmd_measure(args) -> int:
    config = _load_config(args)
    seeds = _member_seeds(config.master_seed, config.ensemble)
    member = _build_member(
        config, seeds, 0, None,
        any(a.kind == "QKF" for a in config.algorithms),
        config.noise.num_predict + 1,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "record.csv")
    member.record.to_csv(path)
    print(path)
    if member.binary is not None:
        bpath = os.path.join(args.out, "bits.csv")
        member.binary.to_csv(bpath)
        print(bpath)
    return 0


def cmd_filter(args) -> int:
    config = _load_config(args)
    algo = config.algorithms[0]
    if algo.kind not in ("AKF", "LKFFB"):
        raise ParameterError("the filter subcommand expects an AKF or LKFFB entry first")
    seeds = _member_seeds(config.master_seed, config.ensemble)
    member = _build_member(
        config, seeds, 0, _needs_lsf(config), False, config.noise.num_predict + 1
    )
    anchor = float(np.var(member.record.values))
    if algo.kind == "AKF":
        model = build_akf(member.coeffs, sigma2=anchor * 1e-2, R=member.record.noise_variance or anchor * 1e-2)
        init = diffuse_initial_state(model.dim, member.record.values, lag_seed=True)
    else:
        basis = _lkffb_basis(config, algo)
        model = build_lkffb(basis, sigma2=anchor * 1e-2, R=member.record.noise_variance or anchor * 1e-2)
        init = diffuse_initial_state(model.dim, member.record.values)
    traj = run_filter(member.record.values, model, init)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trajectory.csv")
    traj.to_csv(path)
    print(path)
    return 0


def cmd_tune(args) -> int:
    config = _load_config(args)
    first = config.algorithms[0]
    trimmed = ExperimentConfig(
        name=config.name,
        noise=config.noise,
        measurement=config.measurement,
        algorithms=(first,),
        tuning=config.tuning,
        ensemble=config.ensemble,
        master_seed=config.master_seed,
        figure=config.figure,
    )
    result = run_experiment(trimmed, out_dir=None, threads=args.threads)
    algo = result.algorithms[first.label]
    if algo.tuning is None:
        raise ParameterError(f"{first.kind} has no noise-scale tuning")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "tuning.json")
    algo.tuning.to_json(path)
    print(path)
    return 0


def cmd_experiment(args) -> int:
    config = _load_config(args)
    result = run_experiment(config, out_dir=args.out, threads=args.threads)
    base = os.path.join(args.out, config.name)
    for label, algo in result.algorithms.items():
        print(f"{label}: horizon={algo.horizon} ({algo.wallclock_s:.1f}s)")
    print(base)
    return 0


def cmd_spectrum(args) -> int:
    config = _load_config(args)
    result = run_experiment(config, out_dir=None, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "spectrum.csv")
    spectral_report(result, path)
    print(path)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "measure": cmd_measure,
    "filter": cmd_filter,
    "tune": cmd_tune,
    "experiment": cmd_experiment,
    "spectrum": cmd_spectrum,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return USAGE_ERROR if err.code else 0
    try:
        return _COMMANDS[args.command](args)
    except (ParameterError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {err}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
