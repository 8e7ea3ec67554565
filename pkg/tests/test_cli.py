"""Tests for the command-line harness."""

import hashlib
import json
import warnings

import pytest

from phasecast.cli import cli_main


@pytest.fixture()
def config_file(tmp_path):
    payload = {
        "schema_version": 1,
        "name": "cli_unit",
        "figure": "cli test config",
        "noise": {
            "alpha": 1.0, "omega0_hz": 0.497, "num_components": 6, "eta": 0.0,
            "dt": 0.01, "num_train": 150, "num_predict": 20,
        },
        "measurement": {"noise_level": 0.01, "tau_info": 0.0},
        "algorithms": [{"kind": "AKF", "q": 15}],
        "tuning": {"K": 10, "n_L": 15, "decades": 8.0, "horizon_threshold": 1.0},
        "ensemble": 3,
        "master_seed": 12,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


def run_quiet(argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return cli_main(argv)


class TestUsage:
    def test_missing_config_file(self, tmp_path, capsys):
        code = run_quiet(["synth", "--config", str(tmp_path / "nope.json")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_flag(self, config_file):
        assert run_quiet(["synth", "--config", str(config_file), "--bogus"]) == 1

    def test_unknown_subcommand(self, config_file):
        assert run_quiet(["transmogrify", "--config", str(config_file)]) == 1

    def test_bad_schema_is_usage_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"schema_version": 1, "name": "x", "oops": 1}))
        assert run_quiet(["experiment", "--config", str(path)]) == 1


class TestSynth:
    def test_deterministic_output(self, config_file, tmp_path, capsys):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_quiet(["synth", "--config", str(config_file), "--seed", "1",
                          "--out", str(out1)]) == 0
        assert run_quiet(["synth", "--config", str(config_file), "--seed", "1",
                          "--out", str(out2)]) == 0
        h1 = hashlib.sha256((out1 / "truth.csv").read_bytes()).hexdigest()
        h2 = hashlib.sha256((out2 / "truth.csv").read_bytes()).hexdigest()
        assert h1 == h2

    def test_accepts_bare_noise_spec(self, tmp_path):
        spec = {
            "alpha": 1.0, "omega0_hz": 1.0, "num_components": 2, "eta": 0.0,
            "dt": 0.01, "num_train": 50, "num_predict": 5,
        }
        path = tmp_path / "noise.json"
        path.write_text(json.dumps(spec))
        assert run_quiet(["synth", "--config", str(path), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "truth.csv").exists()


class TestPipelineCommands:
    def test_measure(self, config_file, tmp_path):
        out = tmp_path / "m"
        assert run_quiet(["measure", "--config", str(config_file), "--out", str(out)]) == 0
        lines = (out / "record.csv").read_text().splitlines()
        assert lines[0] == "n,y_rad"
        assert len(lines) == 151

    def test_filter(self, config_file, tmp_path):
        out = tmp_path / "f"
        assert run_quiet(["filter", "--config", str(config_file), "--out", str(out)]) == 0
        header = (out / "trajectory.csv").read_text().splitlines()[0]
        assert header == "n,x0_hat,y_hat_minus,gain0,innovation"

    def test_tune(self, config_file, tmp_path):
        out = tmp_path / "t"
        assert run_quiet(["tune", "--config", str(config_file), "--out", str(out)]) == 0
        payload = json.loads((out / "tuning.json").read_text())
        assert len(payload["sigma"]) == 10

    def test_experiment_writes_tree(self, config_file, tmp_path, capsys):
        out = tmp_path / "e"
        assert run_quiet(["experiment", "--config", str(config_file),
                          "--out", str(out)]) == 0
        assert (out / "cli_unit" / "akf" / "risk.csv").exists()

    def test_spectrum(self, config_file, tmp_path):
        out = tmp_path / "s"
        assert run_quiet(["spectrum", "--config", str(config_file), "--out", str(out)]) == 0
        header = (out / "spectrum.csv").read_text().splitlines()[0]
        assert header == "omega_rad_per_s,S_true,S_akf,S_lkffb"

    def test_seed_override_changes_output(self, config_file, tmp_path):
        a, b = tmp_path / "x", tmp_path / "y"
        run_quiet(["synth", "--config", str(config_file), "--seed", "1", "--out", str(a)])
        run_quiet(["synth", "--config", str(config_file), "--seed", "2", "--out", str(b)])
        assert (a / "truth.csv").read_bytes() != (b / "truth.csv").read_bytes()


class TestBundledConfigs:
    def test_all_bundled_configs_parse(self):
        import importlib.resources as resources

        from phasecast.harness import ExperimentConfig

        count = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for entry in resources.files("phasecast.configs").iterdir():
                if entry.name.endswith(".json"):
                    ExperimentConfig.from_dict(json.loads(entry.read_text()))
                    count += 1
        assert count >= 5

    def test_bundled_configs_name_their_figure(self):
        import importlib.resources as resources

        for entry in resources.files("phasecast.configs").iterdir():
            if entry.name.endswith(".json"):
                payload = json.loads(entry.read_text())
                assert payload.get("figure"), f"{entry.name} lacks a figure note"
