import json
import subprocess
import sys

import pytest

from insiderlab.cli import EXIT_CONSISTENCY, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main

SMALL = ["--paths", "400", "--steps", "64", "--seed", "3"]


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


class TestSubcommands:
    @pytest.mark.parametrize("command", ["diagnose", "entropy", "backtest", "factorization"])
    def test_default_scenarios(self, command, tmp_path, capsys):
        code = main([command, *SMALL, "--out", str(tmp_path)])
        assert code == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["consistency"]["ok"]
        assert (tmp_path / "report.json").exists()

    def test_run_with_config_and_csv(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"scenario": {"density_lab": {"variant": "stopped", "a": 0.5}}})
        code = main(["run", "--config", str(cfg), *SMALL, "--out", str(tmp_path / "o"), "--format", "csv"])
        assert code == EXIT_OK
        assert {p.name for p in (tmp_path / "o").iterdir()} >= {"report.json", "summary.csv", "tracks.csv"}
        payload = json.loads(capsys.readouterr().out)["payload"]
        assert payload["tau"]["all_zero"]

    def test_simulate_only_samples(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"scenario": {"honest_time": {"sigma": 0.5}}})
        assert main(["simulate", "--config", str(cfg), *SMALL, "--out", str(tmp_path)]) == EXIT_OK
        assert set(json.loads(capsys.readouterr().out)["payload"]) == {"sample"}

    def test_report_rerender(self, tmp_path, capsys):
        main(["factorization", *SMALL, "--out", str(tmp_path)])
        capsys.readouterr()
        assert main(["report", str(tmp_path / "report.json"), "--format", "csv"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "key,value"
        assert any(line.startswith("orthogonal_product.passed") for line in lines)

    def test_report_with_failures_exits_2(self, tmp_path):
        f = write_config(tmp_path / "r.json", {"payload": {}, "consistency": {"failures": ["x"]}})
        assert main(["report", str(f)]) == EXIT_CONSISTENCY

    def test_overrides_reach_the_report(self, tmp_path):
        main(["diagnose", *SMALL, "--out", str(tmp_path)])
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["seed"] == 3
        assert rep["meta"]["n_paths"] == 400


class TestExitCodes:
    def test_run_needs_config(self, capsys):
        assert main(["run"]) == EXIT_VALIDATION
        assert "needs --config" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"scenario": {"honest_time": {"sigma": -1, "bogus": 1}}})
        assert main(["run", "--config", str(cfg)]) == EXIT_VALIDATION
        err = capsys.readouterr().err
        assert err.count("config error") == 2

    def test_invalid_override(self):
        assert main(["diagnose", "--paths", "1"]) == EXIT_VALIDATION

    def test_command_does_not_fit_scenario(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"scenario": {"factorization": {}}})
        assert main(["entropy", "--config", str(cfg)]) == EXIT_VALIDATION

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json")]) == EXIT_IO

    def test_missing_report(self, tmp_path):
        assert main(["report", str(tmp_path / "none.json")]) == EXIT_IO

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["factorization", *SMALL, "--out", str(blocker / "sub")]) == EXIT_IO


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "insiderlab", "factorization", *SMALL, "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0
    assert json.loads(res.stdout)["scenario"] == "factorization"
