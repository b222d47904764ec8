"""Command-line entry point: subcommands, formats and exit codes."""

import csv
import io
import json
import shutil
import subprocess

import pytest

from coda.cli import main
from coda.data import load_rule, rule_from_dict, write_sample_csv
from coda.simulation import generate, scenario


@pytest.fixture(scope="module")
def csv_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    e, u = generate(scenario(1), 5000, 5000, seed=3)
    write_sample_csv(e, d / "p.csv")
    write_sample_csv(u, d / "a.csv")
    s3_e, _ = generate(scenario(3), 300, 10, seed=4)
    write_sample_csv(s3_e, d / "p2.csv")
    return d


def load_rule_depth(d):
    return rule_from_dict(d).root.depth


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestFit:
    def test_fit_and_true_value_round_trip(self, csv_pair, capsys):
        rule_path = csv_pair / "rule.json"
        code, out, _ = run(["fit", "--primary", csv_pair / "p.csv", "--auxiliary", csv_pair / "a.csv",
                            "--mode", "auto", "--rule-out", rule_path], capsys)
        assert code == 0
        report = json.loads(out)
        for key in ("value", "variance", "ci_lo", "ci_hi", "sigma_y2", "rho", "sigma_m", "mode", "rule"):
            assert key in report
        assert report["mode"] == "HO" and report["variance"] <= report["sigma_y2"]
        assert load_rule(rule_path) is not None
        code, out, _ = run(["true-value", "--scenario", 1, "--rule", rule_path, "--n-mc", 20000], capsys)
        assert code == 0 and json.loads(out)["rule"] == report["rule"]

    def test_dimension_mismatch_exits_1(self, csv_pair, capsys):
        code, _, err = run(["fit", "--primary", csv_pair / "p2.csv", "--auxiliary", csv_pair / "a.csv"], capsys)
        assert code == 1 and "intermediate dimension mismatch" in err

    def test_malformed_csv_names_location(self, csv_pair, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("x1,x2,a,m1,y\n0,0,1,0,0\n0,0,1,oops,0\n")
        code, _, err = run(["fit", "--primary", bad, "--auxiliary", csv_pair / "a.csv"], capsys)
        assert code == 1 and "row 3" in err and "'m1'" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, _ = run(["fit", "--primary", tmp_path / "nope.csv", "--auxiliary", tmp_path / "x.csv"], capsys)
        assert code == 1

    def test_config_file(self, csv_pair, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"depth": 1, "basis": ["linear"]}))
        code, out, _ = run(["fit", "--primary", csv_pair / "p.csv", "--auxiliary", csv_pair / "a.csv",
                            "--config", cfg], capsys)
        assert code == 0
        rule = json.loads(out)["rule"]
        assert rule["depth"] == 1 and load_rule_depth(rule) <= 1

    def test_bad_config_key(self, csv_pair, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"colour": 1}))
        code, _, err = run(["cio-check", "--primary", csv_pair / "p.csv", "--auxiliary", csv_pair / "a.csv",
                            "--config", cfg], capsys)
        assert code == 1 and "unknown" in err


class TestOther:
    def test_cio_check(self, csv_pair, capsys):
        code, out, _ = run(["cio-check", "--primary", csv_pair / "p.csv", "--auxiliary", csv_pair / "a.csv"],
                           capsys)
        assert code == 0
        assert all(x < 0.05 for x in json.loads(out)["relative_mse"])

    def test_simulate_csv(self, capsys, tmp_path):
        out_path = tmp_path / "t.csv"
        code, _, _ = run(["simulate", "--scenario", 1, "--ne", 200, "--nu", 400, "--reps", 2, "--seed", 7,
                          "--format", "csv", "-o", out_path], capsys)
        assert code == 0
        rows = list(csv.reader(io.StringIO(out_path.read_text())))
        assert rows[0][0] == "statistic" and any(r[0] == "Improved Efficiency" for r in rows)

    def test_simulate_deterministic(self, capsys):
        argv = ["simulate", "--scenario", 2, "--ne", 150, "--nu", 300, "--reps", 2, "--seed", 5, "--fixed-only"]
        assert run(argv, capsys)[1] == run(argv, capsys)[1]

    def test_table_format(self, capsys):
        code, out, _ = run(["true-value", "--scenario", 2, "--n-mc", 1000, "--format", "table"], capsys)
        assert code == 0 and out.splitlines()[0].startswith("key")

    def test_unknown_flag_prints_usage(self, capsys):
        code, _, err = run(["simulate", "--scenario", 1, "--bogus"], capsys)
        assert code == 1 and "usage:" in err

    def test_threads_env(self, capsys, monkeypatch):
        monkeypatch.setenv("CODA_THREADS", "many")
        code, _, err = run(["simulate", "--scenario", 1, "--reps", 1], capsys)
        assert code == 1 and "CODA_THREADS" in err

    def test_help(self, capsys):
        assert run(["--help"], capsys)[0] == 0

    @pytest.mark.skipif(shutil.which("coda") is None, reason="console script not installed")
    def test_console_script(self):
        res = subprocess.run(["coda", "true-value", "--scenario", "1", "--n-mc", "1000"], capture_output=True,
                             text=True)
        assert res.returncode == 0 and "value" in json.loads(res.stdout)
