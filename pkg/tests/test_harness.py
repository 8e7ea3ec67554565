"""Tests for experiment orchestration and file outputs."""

import hashlib
import json
import warnings

import numpy as np
import pytest

from phasecast.errors import ParameterError
from phasecast.harness import (
    AlgorithmConfig,
    ExperimentConfig,
    locate_cutoff,
    run_experiment,
    spectral_report,
)


def config_dict(**overrides):
    base = {
        "schema_version": 1,
        "name": "unit",
        "figure": "desk-scale unit config",
        "noise": {
            "alpha": 1.0,
            "omega0_hz": 0.497,
            "num_components": 8,
            "eta": 0.0,
            "dt": 0.005,
            "num_train": 200,
            "num_predict": 30,
        },
        "measurement": {"noise_level": 0.01, "tau_info": 0.0},
        "algorithms": [{"kind": "AKF", "q": 10}],
        "tuning": {"K": 10, "n_L": 20, "decades": 8.0, "horizon_threshold": 1.0},
        "ensemble": 4,
        "master_seed": 5,
    }
    base.update(overrides)
    return base


def load(overrides=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ExperimentConfig.from_dict(config_dict(**(overrides or {})))


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != "summary.json":
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ParameterError, match="unknown config keys"):
            ExperimentConfig.from_dict(config_dict(bogus=1))

    def test_unknown_noise_key_rejected(self):
        bad = config_dict()
        bad["noise"]["extra"] = 1
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict(bad)

    def test_unknown_algorithm_setting_rejected(self):
        bad = config_dict(algorithms=[{"kind": "AKF", "q": 10, "oops": 2}])
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict(bad)

    def test_schema_version_checked(self):
        with pytest.raises(ParameterError, match="schema_version"):
            ExperimentConfig.from_dict(config_dict(schema_version=99))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ParameterError, match="unknown algorithm kind"):
            AlgorithmConfig.from_dict({"kind": "XKF"})

    def test_ratio_deviation_warns(self):
        with pytest.warns(UserWarning, match="deviate from"):
            ExperimentConfig.from_dict(config_dict())  # q*dt = 0.05, q/N = 0.05

    def test_reference_ratios_silent(self):
        cfg = config_dict()
        cfg["noise"]["dt"] = 0.01  # q*dt = 0.1, q/N_T = 0.05
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            ExperimentConfig.from_dict(cfg)


class TestRunExperiment:
    def test_produces_expected_tree(self, tmp_path):
        config = load({
            "algorithms": [
                {"kind": "AKF", "q": 10},
                {"kind": "LSF", "q": 10},
                {"kind": "LKFFB", "basis_kind": "A", "num_osc": 8},
            ]
        })
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = run_experiment(config, out_dir=tmp_path)
        base = tmp_path / "unit"
        assert (base / "akf" / "risk.csv").exists()
        assert (base / "akf" / "tuning.json").exists()
        assert (base / "akf" / "spectrum.csv").exists()
        assert (base / "lsf" / "risk.csv").exists()
        assert (base / "lkffb" / "extraction.csv").exists()
        assert (base / "truth.csv").exists()
        summary = json.loads((base / "summary.json").read_text())
        assert set(summary["horizons"]) == {"akf", "lsf", "lkffb"}
        header = (base / "akf" / "risk.csv").read_text().splitlines()[0]
        assert header == "n,norm_risk"
        assert len(result.get("AKF").risk_curve.values) == 31

    def test_deterministic_across_thread_counts(self, tmp_path):
        config = load({
            "algorithms": [
                {"kind": "AKF", "q": 10},
                {"kind": "GPR",
                 "kernel": {"family": "RBF", "sigma2": 1.0, "length_scale": 0.05},
                 "optimize": False},
            ]
        })
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_experiment(config, out_dir=tmp_path / "t1", threads=1)
            run_experiment(config, out_dir=tmp_path / "t4", threads=4)
        assert tree_hash(tmp_path / "t1") == tree_hash(tmp_path / "t4")

    def test_identical_seed_identical_bytes(self, tmp_path):
        config = load()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_experiment(config, out_dir=tmp_path / "a")
            run_experiment(config, out_dir=tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_member_failures_abort_above_threshold(self, monkeypatch):
        config = load()
        from phasecast import harness as hmod

        original = hmod._build_member

        def sometimes_fail(config, seeds, index, *args, **kwargs):
            if index % 2 == 0:
                raise RuntimeError("synthetic member failure")
            return original(config, seeds, index, *args, **kwargs)

        monkeypatch.setattr(hmod, "_build_member", sometimes_fail)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(RuntimeError, match="aborting"):
                run_experiment(config)

    def test_qkf_without_noise_scales_rejected(self):
        config = load({"algorithms": [{"kind": "QKF", "q": 10}]})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(ParameterError, match="perfect_model"):
                run_experiment(config)


class TestSpectralReport:
    def test_columns_and_cutoff(self, tmp_path):
        config = load({
            "noise": {
                "alpha": 1.0, "omega0_hz": 0.497, "num_components": 10, "eta": 0.0,
                "dt": 0.005, "num_train": 400, "num_predict": 30,
            },
            "algorithms": [
                {"kind": "AKF", "q": 20},
                {"kind": "LKFFB", "basis_kind": "A", "f0_hz": 0.5, "num_osc": 20},
            ],
            "tuning": {"K": 20, "n_L": 20, "decades": 8.0, "horizon_threshold": 1.0},
            "ensemble": 4,
        })
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = run_experiment(config)
        path = tmp_path / "spectrum.csv"
        spectral_report(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "omega_rad_per_s,S_true,S_akf,S_lkffb"
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        assert np.all(np.isfinite(data[:, 1:3]))

    def test_locate_cutoff_on_step_spectrum(self):
        omega = np.linspace(1.0, 100.0, 100)
        S = np.where(omega <= 40.0, 1.0, 1e-6)
        assert locate_cutoff(omega, S) == pytest.approx(40.0, abs=1.0)
