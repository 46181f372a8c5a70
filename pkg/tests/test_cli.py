import os
import subprocess
import sys

import pytest

from flexmpc.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from flexmpc.config import load_config
from flexmpc.harness import read_summary, read_trace

SHORT_CFG = "scenario.t_s = 200\nwarmup_steps = 100\nsteps = 260\n"


@pytest.fixture
def short_cfg(tmp_path):
    p = tmp_path / "short.cfg"
    p.write_text(SHORT_CFG)
    return str(p)


class TestRun:
    def test_run_writes_trace_and_summary(self, tmp_path, short_cfg, capsys):
        out = tmp_path / "out"
        code = main(["run", "--config", short_cfg, "--scenario", "abrupt", "--controller", "cf", "--seed", "7",
                     "--out", str(out)])
        assert code == EXIT_OK
        trace = out / "abrupt_cf_seed7.csv"
        summary = out / "abrupt_cf_seed7_summary.txt"
        assert len(read_trace(trace)) == 260
        assert read_summary(summary).relaxed_count >= 0
        assert f"trace: {trace}" in capsys.readouterr().out

    def test_run_is_repeatable(self, tmp_path, short_cfg):
        for name in ("a", "b"):
            assert main(["run", "--config", short_cfg, "--seed", "3", "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "abrupt_cf_seed3.csv").read_bytes()
        assert a == (tmp_path / "b" / "abrupt_cf_seed3.csv").read_bytes()

    def test_run_is_repeatable_across_processes(self, tmp_path, short_cfg):
        for name in ("a", "b"):
            subprocess.run([sys.executable, "-m", "flexmpc", "run", "--config", short_cfg, "--seed", "5",
                            "--out", str(tmp_path / name)], check=True, capture_output=True)
        a = (tmp_path / "a" / "abrupt_cf_seed5.csv").read_bytes()
        assert a == (tmp_path / "b" / "abrupt_cf_seed5.csv").read_bytes()

    def test_run_rejects_two_controllers(self, tmp_path, short_cfg, capsys):
        code = main(["run", "--config", short_cfg, "--controller", "cf,nominal", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG
        assert "exactly one controller" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_flag(self, capsys):
        assert main(["run", "--frobnicate"]) == EXIT_CONFIG
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert main([]) == EXIT_CONFIG

    def test_missing_config_names_path(self, tmp_path, capsys):
        path = tmp_path / "absent.cfg"
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert str(path) in err and "configuration error" in err

    def test_bad_controller(self, capsys):
        assert main(["run", "--controller", "pid"]) == EXIT_CONFIG
        assert "pid" in capsys.readouterr().err

    def test_bad_scenario(self):
        assert main(["run", "--scenario", "sideways"]) == EXIT_CONFIG

    def test_malformed_config_line(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("steps = 700\nmpc.horizon = ten\n")
        assert main(["run", "--config", str(p)]) == EXIT_CONFIG
        assert f"{p}:2:" in capsys.readouterr().err

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "grad-check" in capsys.readouterr().out


class TestOtherCommands:
    def test_dump_config_round_trips(self, tmp_path, short_cfg, capsys):
        assert main(["dump-config", "--config", short_cfg]) == EXIT_OK
        text = capsys.readouterr().out
        p = tmp_path / "dumped.cfg"
        p.write_text(text)
        cfg = load_config(p)
        assert cfg.steps == 260 and cfg.scenario.t_s == 200

    def test_grad_check(self, capsys):
        assert main(["grad-check", "--configs", "5"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert [ln.split(":")[0] for ln in lines] == ["PASS gradient check (linear)", "PASS gradient check (mlp)"]

    def test_oracle_filter_conjugate_line(self, capsys):
        code = main(["oracle-filter", "--steps", "10", "--particles", "20000"])
        lines = capsys.readouterr().out.splitlines()
        assert lines[1].startswith("PASS conjugate posterior agreement")
        assert code == (EXIT_OK if lines[0].startswith("PASS") else EXIT_FAIL)

    def test_compare(self, tmp_path, short_cfg, capsys):
        out = tmp_path / "cmp"
        code = main(["compare", "--config", short_cfg, "--controller", "cf,nominal", "--seeds", "2",
                     "--out", str(out)])
        assert code == EXIT_OK
        files = sorted(os.listdir(out))
        assert "abrupt_comparison.csv" in files and "abrupt_comparison_noise.txt" in files
        assert sum(f.endswith(".csv") for f in files) == 5
        noise = (out / "abrupt_comparison_noise.txt").read_text().splitlines()
        # identical draws for both controllers on a seed
        cf = [ln.split(" ", 1)[1] for ln in noise if ln.startswith("cf ")]
        nom = [ln.split(" ", 1)[1] for ln in noise if ln.startswith("nominal ")]
        assert cf == nom

    def test_compare_rejects_zero_seeds(self, short_cfg):
        assert main(["compare", "--config", short_cfg, "--seeds", "0"]) == EXIT_CONFIG

    def test_validate_short(self, short_cfg, capsys):
        code = main(["validate", "--config", short_cfg, "--seeds", "1", "--trials", "2000"])
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 7
        assert code == (EXIT_OK if all(ln.startswith("PASS") for ln in lines) else EXIT_FAIL)
        assert code == EXIT_OK

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "flexmpc", "dump-config"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "mpc.horizon = 10" in proc.stdout
