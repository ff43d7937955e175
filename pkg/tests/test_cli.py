import csv
import json

import numpy as np

from regmkt.cli import main


def toy_csv(path, n=100, entities=("A", "B"), seed=0):
    """A is driven by the previous value of B, so B's lag helps forecast A."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n)
    a = np.zeros(n)
    a[1:] = 0.8 * b[:-1] + 0.3 * rng.standard_normal(n - 1)
    cols = {"A": a, "B": b}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *entities])
        for i in range(n):
            stamp = np.datetime64("2019-01-01T00:00") + np.timedelta64(i, "D")
            w.writerow([str(stamp), *[repr(float(cols[e][i])) for e in entities]])
    return path


def run(argv):
    return main([str(a) for a in argv])


def test_usage_errors(tmp_path):
    assert run(["simulate", "--bogus"]) == 2
    assert run([]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiments": ["calibration"], "calibration": {"runs": 0}}))
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"]) == 2
    cfg.write_text("{not json")
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"]) == 2
    assert run(["simulate", "--config", tmp_path / "missing.json"]) == 2
    assert run(["shapley-audit", "--design", "vcg"]) == 2
    assert run(["replay", "--out", tmp_path / "o"]) == 2


def test_simulate_writes_tables_and_reruns_identically(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "seed": 3,
        "calibration": {"runs": 3, "sample_sizes": [10, 30], "n_test": 20},
        "convergence": {"runs": 3, "sample_sizes": [8, 16]},
        "risk": {"runs": 20, "sample_sizes": [30], "n_test": 30},
        "tracking": {"runs": 3, "n_steps": 60, "change_at": 30, "window": 20},
        "truthfulness": {"runs": 3, "n": 60},
        "moments": {"samples": 500},
    }))
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert run(["simulate", "--config", cfg, "--out", out1, "--jobs", "1"]) == 0
    names = sorted(p.name for p in out1.iterdir())
    assert names == sorted(["manifest.json", "posterior_traces.csv", "nll_ratio_vs_n.csv",
                            "shapley_vs_n.csv", "risk_by_design.csv", "tracking_traces.csv",
                            "tracking_mae.csv", "truthfulness.csv", "shapley_moments.csv"])
    assert run(["simulate", "--config", out1 / "manifest.json", "--out", out2, "--jobs", "2"]) == 0
    for name in names:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_simulate_design_and_setup_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiments": ["risk"], "risk": {"runs": 20, "sample_sizes": [20], "n_test": 20}}))
    assert run(["simulate", "--config", cfg, "--out", tmp_path, "--design", "blr_kl_m",
                "--setup", "noise", "--seed", "9", "--jobs", "1"]) == 0
    with open(tmp_path / "risk_by_design.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["design"] for r in rows} == {"blr_kl_m"}
    assert {r["setup"] for r in rows} == {"noise"}
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 9


def test_replay_toy(tmp_path, capsys):
    data = toy_csv(tmp_path / "toy.csv")
    out = tmp_path / "r"
    assert run(["replay", "--data", data, "--out", out]) == 0
    with open(out / "ledger_A.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(float(r["pi_a:B"]) for r in rows) > 0
    with open(out / "quarterly_summary.csv") as fh:
        q = list(csv.DictReader(fh))
    pairs = {(r["entity"], r["quarter"]) for r in q}
    assert len(q) == 2 * len(pairs)


def test_replay_single_entity_pays_nothing(tmp_path):
    data = toy_csv(tmp_path / "one.csv", entities=("A",))
    assert run(["replay", "--data", data, "--out", tmp_path / "r"]) == 0
    with open(tmp_path / "r" / "ledger_A.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["pi_c"]) == 0.0 for r in rows)


def test_replay_bad_data_is_runtime_failure(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,A\n2019-01-02,1\n2019-01-01,2\n")
    assert run(["replay", "--data", bad, "--out", tmp_path / "r"]) == 1
    assert not (tmp_path / "r" / "manifest.json").exists()


def test_shapley_audit(capsys):
    assert run(["shapley-audit"]) == 0
    assert run(["shapley-audit", "--design", "blr_kl_m"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    gap = float(line.split("budget_gap=")[1].split()[0])
    assert gap > 0
    assert run(["shapley-audit", "--tamper-weights", "0.05"]) == 1


def test_risk_report(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"risk": {"runs": 20, "sample_sizes": [25], "n_test": 25}}))
    assert run(["risk-report", "--config", cfg, "--out", tmp_path, "--setup", "baseline",
                "--jobs", "1"]) == 0
    with open(tmp_path / "risk_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 2 * 2  # designs x stages x agents
    assert "EV=" in capsys.readouterr().out


def test_log_env(monkeypatch, tmp_path):
    monkeypatch.setenv("REGMKT_LOG", "debug")
    assert run(["shapley-audit", "--design", "blr_nll"]) == 0
