import csv
import json
import math
import subprocess
import sys

import pytest

from offab import cli
from offab.estimators import read_reports
from offab.policy import save_policy
from offab.simbench import SuiteSpec, heavy_tail_scenario, small_enumerable_scenario


@pytest.fixture
def workspace(tmp_path):
    _, pi_p, pi_t = small_enumerable_scenario()
    (tmp_path / "env.json").write_text(json.dumps({"scenario": "small"}))
    save_policy(pi_p, tmp_path / "logging.json")
    save_policy(pi_t, tmp_path / "target.json")
    assert cli.main(["gen-log", "--env", str(tmp_path / "env.json"), "--n", "3000", "--seed", "7",
                     "--out", str(tmp_path / "log.txt")]) == 0
    return tmp_path


def strict_csv(path, header):
    """Header must match exactly; numeric cells must parse; writing back gives the same bytes."""
    text = path.read_text()
    rows = list(csv.reader(text.splitlines()))
    assert rows[0] == header
    for row in rows[1:]:
        assert len(row) == len(header)
    out = "".join(",".join(r) + "\n" for r in rows)
    assert out == text
    return [dict(zip(header, r)) for r in rows[1:]]


def test_gen_log_exports_scenario_policies(tmp_path):
    (tmp_path / "env.json").write_text(json.dumps({"scenario": "table1"}))
    assert cli.main(["gen-log", "--env", str(tmp_path / "env.json"), "--n", "10", "--seed", "1",
                     "--out", str(tmp_path / "log.txt"), "--policies-dir", str(tmp_path)]) == 0
    from offab.policy import load_policy
    from offab.simbench import table1_scenario
    _, pi_p, pi_t = table1_scenario()
    assert load_policy(tmp_path / "target.json").to_dict() == pi_t.to_dict()
    assert load_policy(tmp_path / "logging.json").to_dict() == pi_p.to_dict()
    assert cli.main(["gen-log", "--env", str(tmp_path / "env.json"), "--seed", "1", "--out", str(tmp_path / "x"),
                     "--policies-dir", str(tmp_path / "nowhere")]) == 2


def test_gen_log_is_byte_identical(workspace, capsys):
    env = str(workspace / "env.json")
    for name in ("a.txt", "b.txt"):
        assert cli.main(["gen-log", "--env", env, "--n", "1000", "--seed", "7", "--out", str(workspace / name)]) == 0
    assert (workspace / "a.txt").read_bytes() == (workspace / "b.txt").read_bytes()
    assert "n=1000 r_max=1.0 K=2" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["gen-log", "--n", "10", "--seed", "1", "--out", "x.txt"],                 # no environment
    ["gen-log", "--env", "missing.json", "--seed", "1", "--out", "x.txt"],
    ["estimate", "--log", "log.txt", "--target-policy", "missing.json", "--seed", "1"],
    ["estimate", "--log", "log.txt", "--target-policy", "target.json"],         # no seed
    ["estimate", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1", "--estimators", "ncis"],
    ["estimate", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1",
     "--estimators", "point-ncis", "--cap", "2"],                               # needs the logging policy
    ["estimate", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1", "--estimators", "magic"],
    ["estimate", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1", "--threads", "0"],
    ["sweep", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1", "--c-grid", "1,-2"],
    ["bench", "--seed", "1", "--estimators", "is"],
])
def test_usage_errors_exit_2(workspace, monkeypatch, argv):
    monkeypatch.chdir(workspace)
    assert cli.main(argv) == 2


def test_degenerate_estimate_exits_1(workspace, monkeypatch):
    monkeypatch.chdir(workspace)
    assert cli.main(["estimate", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1",
                     "--estimators", "ncis", "--cap-mode", "zero", "--cap", "1e-300", "--bootstrap", "0"]) == 1


def test_estimate_blocks_and_determinism(workspace, monkeypatch, capsys):
    monkeypatch.chdir(workspace)
    base = ["estimate", "--log", "log.txt", "--target-policy", "target.json", "--logging-policy", "logging.json",
            "--estimators", "is,ncis,point-ncis", "--cap", "2", "--n-mc", "5", "--bootstrap", "100", "--seed", "3"]
    assert cli.main(base + ["--out", "r1.jsonl"]) == 0
    out = capsys.readouterr().out
    assert [line for line in out.splitlines() if line.startswith("[")] == ["[is]", "[ncis]", "[point-ncis]"]
    assert cli.main(base + ["--out", "r2.jsonl", "--threads", "8"]) == 0
    assert (workspace / "r1.jsonl").read_bytes() == (workspace / "r2.jsonl").read_bytes()
    reps = read_reports(workspace / "r1.jsonl")
    assert [r.estimator_name for r in reps] == ["is", "ncis", "point-ncis"]


def test_estimate_piece_ncis(workspace, monkeypatch, capsys):
    monkeypatch.chdir(workspace)
    assert cli.main(["estimate", "--log", "log.txt", "--target-policy", "target.json", "--estimators",
                     "piece-ncis,cis", "--cap", "2", "--bootstrap", "20", "--seed", "1", "--uplift"]) == 0
    piece = capsys.readouterr().out.split("[cis]")[0]
    used = int(piece.split("n_used = ")[1].split()[0])
    assert 1300 < used < 1700  # evaluated on the held-out half only


def test_sweep_rows_and_monotone_capped_fraction(workspace, monkeypatch):
    monkeypatch.chdir(workspace)
    assert cli.main(["sweep", "--log", "log.txt", "--target-policy", "target.json", "--seed", "1",
                     "--c-grid", "1,10,100", "--out", "sweep.csv"]) == 0
    rows = strict_csv(workspace / "sweep.csv", cli.SWEEP_HEADER)
    assert len(rows) == 3
    frac = [float(r["capped_fraction"]) for r in rows]
    assert frac == sorted(frac, reverse=True)


def test_sweep_heavy_tail_shape(tmp_path):
    env, pi_p, pi_t = heavy_tail_scenario()
    from offab.logs import write_log
    from offab.simbench import simulate_log
    from offab.streams import RandomStream
    write_log(simulate_log(env, pi_p, 50_000, RandomStream(0)), tmp_path / "log.txt")
    save_policy(pi_t, tmp_path / "t.json")
    grid = ",".join(str(10 ** (k / 2)) for k in range(9))
    assert cli.main(["sweep", "--log", str(tmp_path / "log.txt"), "--target-policy", str(tmp_path / "t.json"),
                     "--seed", "1", "--c-grid", grid, "--out", str(tmp_path / "s.csv")]) == 0
    rows = strict_csv(tmp_path / "s.csv", cli.SWEEP_HEADER)
    bias = [float(r["bias_bound"]) for r in rows]
    var = [float(r["variance"]) for r in rows]
    assert bias == sorted(bias, reverse=True) and bias[0] > bias[-1]
    assert var == sorted(var) and var[0] < var[-1]


def test_quantiles_csv(workspace, monkeypatch):
    monkeypatch.chdir(workspace)
    args = ["quantiles", "--log", "log.txt", "--target-policy", "target.json", "--logging-policy", "logging.json",
            "--seed", "2", "--quantiles", "0.1,0.5,0.9"]
    assert cli.main(args + ["--out", "q1.csv"]) == 0
    assert cli.main(args + ["--out", "q2.csv", "--threads", "8"]) == 0
    rows = strict_csv(workspace / "q1.csv", cli.QUANTILE_HEADER)
    assert [float(r["quantile"]) for r in rows] == [0.1, 0.5, 0.9]
    w = [float(r["weight"]) for r in rows]
    assert w == sorted(w) and all(x > 0 for x in w)
    assert (workspace / "q1.csv").read_bytes() == (workspace / "q2.csv").read_bytes()


def test_bench_small_suite(tmp_path, capsys):
    spec = SuiteSpec(tests={"reg-deal": 2, "strong-neg": 2}, n_log=2000, n_online=2000, n_mc=3)
    (tmp_path / "suite.json").write_text(spec.to_json())
    args = ["bench", "--suite", str(tmp_path / "suite.json"), "--seed", "4", "--bootstrap", "30"]
    assert cli.main(args + ["--out", str(tmp_path / "b1.csv")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert sum(line.split()[0] in cli.CAPPED for line in table[2:]) == 4
    assert cli.main(args + ["--out", str(tmp_path / "b2.csv"), "--threads", "8"]) == 0
    for a, b in [("b1.csv", "b2.csv"), ("b1_summary.csv", "b2_summary.csv")]:
        assert (tmp_path / a).read_bytes() == (tmp_path / b).read_bytes()
    summary = strict_csv(tmp_path / "b1_summary.csv", cli.SUMMARY_HEADER)
    assert [r["estimator"] for r in summary] == ["cis", "ncis", "piece-ncis", "point-ncis"]
    for r in summary:
        for key in cli.SUMMARY_HEADER[1:]:
            float(r[key])
    header = next(csv.reader(open(tmp_path / "b1.csv")))
    records = strict_csv(tmp_path / "b1.csv", header)
    assert len(records) == 4
    assert {r["point-ncis_decision"] for r in records} <= {"positive", "neutral", "negative"}


def test_console_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "offab.cli", "sweep", "--log", str(workspace / "log.txt"),
                           "--target-policy", str(workspace / "target.json"), "--seed", "1", "--c-grid", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == ",".join(cli.SWEEP_HEADER)
    assert not math.isnan(float(proc.stdout.splitlines()[1].split(",")[1]))
