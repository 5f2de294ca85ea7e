import csv
import json
from pathlib import Path

import jsonschema
import pytest

from tangentlab.cli import describe, load_schema, main
from tangentlab.config import load_model
from tangentlab.paths import CadlagPath

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(args):
    return main([str(a) for a in args])


def report(out):
    rep = json.loads((Path(out) / "report.json").read_text())
    jsonschema.validate(rep, load_schema())
    return rep


class TestVerify:
    def test_zero_model_passes(self, tmp_path, capsys):
        assert run(["verify", "--config", CONFIGS / "zero_trivial.toml", "--out", tmp_path]) == 0, "trivial checks pass"
        rep = report(tmp_path)
        assert rep["summary"]["passed"] and rep["summary"]["n_checks"] == 4, rep["summary"]
        assert len(capsys.readouterr().out.strip().splitlines()) == 5, "one line per check plus a summary"

    def test_negative_control_fails(self, tmp_path):
        assert run(["verify", "--config", CONFIGS / "negative_control.toml", "--out", tmp_path]) != 0, "negative control exits nonzero"
        rep = report(tmp_path)
        assert rep["checks"][0]["status"] == "fail", "independence check fails on the state-dependent model"

    def test_same_seed_identical_report(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run(["verify", "--config", CONFIGS / "smoke.toml", "--out", out])
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes(), "reruns are byte-identical"
        assert (a / "tables" / "checks.csv").read_bytes() == (b / "tables" / "checks.csv").read_bytes(), "tables are byte-identical"

    def test_threads_do_not_change_numbers(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["verify", "--config", CONFIGS / "smoke.toml", "--out", a])
        run(["verify", "--config", CONFIGS / "smoke.toml", "--out", b, "--threads", "2"])
        ra, rb = report(a), report(b)
        assert ra["checks"] == rb["checks"], "verdicts independent of the thread count"

    def test_seed_override(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run(["verify", "--config", CONFIGS / "smoke.toml", "--out", a])
        run(["verify", "--config", CONFIGS / "smoke.toml", "--out", b, "--seed", "77"])
        ra, rb = report(a), report(b)
        assert rb["seed"] == 77 and ra["checks"][2]["statistic"] != rb["checks"][2]["statistic"], "seed flows into the estimates"

    def test_report_metadata(self, tmp_path):
        run(["verify", "--config", CONFIGS / "zero_trivial.toml", "--out", tmp_path])
        rep = report(tmp_path)
        assert len(rep["config"]["sha256"]) == 64 and rep["config"]["git_describe"], "config provenance"
        assert rep["model"]["name"] == "zero", "model summary"
        with open(tmp_path / "tables" / "checks.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["status"] for r in rows] == ["pass", "pass", "degenerate-pass", "pass"], rows

    def test_crash_becomes_error_verdict(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('seed = 1\n[model]\nlibrary = "brownian"\n\n[[checks]]\nkind = "cox"\nn = 100\n\n[[checks]]\nkind = "tangency"\nn = 100\n')
        assert run(["verify", "--config", cfg, "--out", tmp_path / "o"]) == 1, "an error verdict fails the run"
        rep = report(tmp_path / "o")
        assert [c["status"] for c in rep["checks"]] == ["error", "pass"], "the run continues after a crash"
        assert "q.l.c." in rep["checks"][0]["details"]["error"], "error message recorded"

    def test_exploratory_does_not_fail(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('seed = 1\n[model]\nlibrary = "poisson"\n\n[[checks]]\nkind = "novikov"\np = 4.0\nn = 1000\n')
        assert run(["verify", "--config", cfg, "--out", tmp_path / "o"]) == 0, "exploratory checks never fail the run"
        assert report(tmp_path / "o")["summary"]["n_exploratory"] == 1

    def test_orders(self, tmp_path):
        assert run(["verify", "--config", CONFIGS / "orders.toml", "--out", tmp_path]) == 0, "rate order holds, scaled marks rejected as expected"


class TestConfigErrors:
    def test_unknown_kind(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('seed = 3\n[model]\nlibrary = "brownian"\n\n[[checks]]\nkind = "nonsense"\nn = 100\n')
        assert run(["verify", "--config", cfg, "--out", tmp_path / "o"]) == 2, "config errors exit with status 2"
        assert f"{cfg}:5:" in capsys.readouterr().err, "line-anchored message"

    def test_syntax_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("seed = 3\n[model\n")
        assert run(["verify", "--config", cfg, "--out", tmp_path / "o"]) == 2
        assert f"{cfg}:2:" in capsys.readouterr().err, "line-anchored parse error"

    def test_missing_file(self, tmp_path, capsys):
        assert run(["verify", "--config", tmp_path / "absent.toml", "--out", tmp_path / "o"]) == 2
        assert "not found" in capsys.readouterr().err


class TestOtherCommands:
    def test_simulate_writes_paths(self, tmp_path):
        assert run(["simulate", "--config", CONFIGS / "mixed_2d.toml", "--out", tmp_path, "--n", 20, "--write", 3, "--seed", 4]) == 0
        rep = report(tmp_path)
        files = sorted((tmp_path / "paths").glob("*.csv"))
        assert len(files) == 3 and rep["command"] == "simulate", "three paths written"
        p = CadlagPath.read_csv(files[0])
        assert p.dim == 2 and p.horizon == 1.0, "CSV paths load back"
        with open(tmp_path / "tables" / "terminal.csv") as fh:
            assert len(list(csv.reader(fh))) == 21, "header plus one row per path"

    def test_decouple(self, tmp_path):
        assert run(["decouple", "--config", CONFIGS / "mixed_2d.toml", "--out", tmp_path, "--n", 20, "--write", 2]) == 0
        assert len(list((tmp_path / "paths").glob("N_*.csv"))) == 2, "decoupled paths written"
        assert (tmp_path / "tables" / "characteristics.json").exists()

    def test_jkw_and_lk_check(self, tmp_path):
        assert run(["jkw", "--config", CONFIGS / "mixed_2d.toml", "--out", tmp_path / "j", "--n", 500, "--n-list", "2,8", "--resolution", 32]) == 0
        assert list((tmp_path / "j" / "tables").glob("*jkw.csv")), "JKW table written"
        assert run(["lk-check", "--config", CONFIGS / "mixed_2d.toml", "--out", tmp_path / "l", "--n", 5000, "--thetas", "0,1", "--times", "0.5,1"]) == 0
        assert report(tmp_path / "l")["command"] == "lk-check"


class TestDescribe:
    def test_zero(self):
        assert "zero martingale" in describe(load_model(CONFIGS / "models" / "zero.toml"))

    def test_rate_two_mass(self):
        assert "∫‖x‖²dν(T=1) = 4" in describe(load_model(CONFIGS / "models" / "poisson_rate2.toml"))

    def test_identity_covariation(self):
        assert "trace covariation(1) = 2" in describe(load_model(CONFIGS / "models" / "brownian_2d.toml"))

    def test_state_dependent_flags(self, capsys):
        assert run(["describe", "--config", CONFIGS / "models" / "self_exciting.toml"]) == 0
        out = capsys.readouterr().out
        assert "state-dependent" in out and "∫‖x‖²dν" not in out, "totals only for deterministic models"

    def test_parse_error(self, tmp_path, capsys):
        cfg = tmp_path / "m.toml"
        cfg.write_text("dim = 1\nhorizon = 1.0\n[qlc]\nmarks = [[1.0]]\nrates = [-1.0]\n")
        assert run(["describe", "--config", cfg]) == 2
        assert f"{cfg}:" in capsys.readouterr().err
