import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import oracles
from servogate import __version__
from servogate.cli import DEFAULT_CONFIG, gate_report, main
from servogate.sim import Scenario, StepRecord, TrialRecord, read_trials_jsonl, write_trials_jsonl

DATA = Path(__file__).parent / "data"
SMALL_MIX = {"InDistribution": 6, "SuboptimalGrasp": 3, "NonLocalGoal": 3, "OODGeometry": 3}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def synth(vp, vr, needed, requested=False, kind="InDistribution", seed=0):
    steps = tuple(StepRecord(t, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), vp[t], vr[t]) for t in range(len(vp)))
    return TrialRecord(Scenario.sample(kind, seed), steps, False, None, "converged", len(vp) - 1, 0.001,
                       not needed or requested, needed, requested, 0.0, 5)


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--output-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def campaign(tmp_path_factory, models):
    out = tmp_path_factory.mktemp("sim")
    cfg = write_config(out / "c.json", {"scenarios": SMALL_MIX})
    assert main(["simulate", "--config", cfg, "--seed", "11", "--no-gate", "--output-dir", str(out),
                 "--model-dir", str(models / "models")]) == 0
    return out


def test_version():
    r = subprocess.run([sys.executable, "-m", "servogate", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout


def test_train_defaults(models):
    d = models / "models"
    manifest = json.loads((d / "manifest.json").read_text())
    assert len(manifest["members"]) == 5
    assert sorted(p.name for p in d.glob("member_*.txt")) == [f"member_{k}.txt" for k in range(5)]
    assert len({m["seed"] for m in manifest["members"]}) == 5
    echoed = json.loads((models / "config.train.json").read_text())
    assert echoed["predictor"]["n_members"] == 5 and echoed["seed"] == 0


def test_train_is_reproducible(tmp_path, models):
    assert main(["train", "--output-dir", str(tmp_path)]) == 0
    for f in ["manifest.json"] + [f"member_{k}.txt" for k in range(5)]:
        assert (tmp_path / "models" / f).read_bytes() == (models / "models" / f).read_bytes()


def test_train_rejects_single_member(tmp_path, capsys):
    assert main(["train", "--n-members", "1", "--output-dir", str(tmp_path)]) == 2
    assert "n_members" in capsys.readouterr().err
    assert not (tmp_path / "models").exists()


@pytest.mark.parametrize(
    "doc",
    [{"bogus": 1}, {"gate": {"tau": 0.1}}, {"scenarios": {"Unknown": 3}}, {"seed": -1},
     {"calibration": {"w": 1.5}}, {"gate": {"mode": "sideways"}}, {"predictor": {"dropout_rate": 1.0}}],
)
def test_bad_config_exits_2(tmp_path, doc):
    cfg = write_config(tmp_path / "c.json", doc)
    assert main(["train", "--config", cfg, "--output-dir", str(tmp_path)]) == 2


def test_config_file_problems(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2


def test_seed_precedence(tmp_path, monkeypatch):
    zero = write_config(tmp_path / "zero.json", {"scenarios": {k: 0 for k in SMALL_MIX}})
    seeded = write_config(tmp_path / "seeded.json", {"seed": 3, "scenarios": {k: 0 for k in SMALL_MIX}})

    def seed_of(*extra):
        out = tmp_path / "o"
        assert main(["simulate", "--no-gate", "--output-dir", str(out), "--model-dir", str(tmp_path), *extra]) == 0
        return json.loads((out / "config.simulate.json").read_text())["seed"]

    monkeypatch.setenv("SERVOGATE_SEED", "7")
    assert seed_of("--config", zero) == 7
    assert seed_of("--config", seeded) == 3
    assert seed_of("--config", seeded, "--seed", "5") == 5
    monkeypatch.setenv("SERVOGATE_SEED", "seven")
    assert main(["simulate", "--config", zero, "--output-dir", str(tmp_path / "o")]) == 2


def test_zero_trials(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"scenarios": {k: 0 for k in DEFAULT_CONFIG["scenarios"]}})
    # no models are needed when nothing runs
    assert main(["simulate", "--config", cfg, "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "trials.jsonl").read_text() == ""


def test_missing_models_exit_3(tmp_path, capsys):
    assert main(["simulate", "--output-dir", str(tmp_path), "--model-dir", str(tmp_path / "none")]) == 3
    assert "servogate train" in capsys.readouterr().err


def test_malformed_trials_exit_3(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"schema_version": 1}\n')
    assert main(["report", "--trials", str(p), "--output-dir", str(tmp_path)]) == 3
    assert main(["calibrate", "--trials", str(tmp_path / "nope.jsonl"), "--output-dir", str(tmp_path)]) == 3


def test_simulate_outputs(campaign):
    records = read_trials_jsonl(campaign / "trials.jsonl")
    assert len(records) == sum(SMALL_MIX.values())
    assert [r.scenario.kind.value for r in records] == [k for k, n in SMALL_MIX.items() for _ in range(n)]
    assert not any(r.gated or r.intervention_requested for r in records)
    assert all(r.anchor_max_displacement == 0.0 for r in records)
    # ungated: success is exactly the absence of a needed intervention
    assert all(r.success == (not r.intervention_needed) for r in records)
    echoed = json.loads((campaign / "config.simulate.json").read_text())
    assert echoed["seed"] == 11 and echoed["gate"]["enabled"] is False


def test_simulate_reproducible_across_workers(tmp_path, models, campaign):
    cfg = write_config(tmp_path / "c.json", {"scenarios": SMALL_MIX})
    for workers in ("1", "4"):
        out = tmp_path / workers
        assert main(["simulate", "--config", cfg, "--seed", "11", "--no-gate", "--workers", workers,
                     "--output-dir", str(out), "--model-dir", str(models / "models")]) == 0
        assert (out / "trials.jsonl").read_bytes() == (campaign / "trials.jsonl").read_bytes()


def test_export_traces(tmp_path, models):
    cfg = write_config(tmp_path / "c.json", {"scenarios": {"InDistribution": 2, "SuboptimalGrasp": 0,
                                                             "NonLocalGoal": 0, "OODGeometry": 0},
                                               "sim": {"export_traces": True}})
    assert main(["simulate", "--config", cfg, "--no-gate", "--output-dir", str(tmp_path),
                 "--model-dir", str(models / "models")]) == 0
    rows = list(csv.reader((tmp_path / "traces" / "trial_0000.csv").open()))
    assert rows[0] == ["t", "var_p", "var_r"] and rows[1][0] == "0"
    assert len(list((tmp_path / "traces").glob("*.csv"))) == 2


def test_calibrate_matches_brute_force(tmp_path, campaign):
    out = tmp_path / "cal"
    assert main(["calibrate", "--trials", str(campaign / "trials.jsonl"), "--w", "0.25",
                 "--output-dir", str(out)]) == 0
    th = json.loads((out / "thresholds.json").read_text())
    records = read_trials_jsonl(campaign / "trials.jsonl")
    records = [r for r in records if r.slope(1) is not None]
    needed = [r.intervention_needed for r in records]
    for key, attr in (("tau_p", "d_var_p"), ("tau_r", "d_var_r")):
        slopes = [getattr(r.slope(1), attr) for r in records]
        s = sorted(set(slopes))
        grid = [-math.inf] + [(a + b) / 2 for a, b in zip(s, s[1:])] + [math.inf]
        tau, obj = oracles.brute_force_threshold(slopes, needed, 0.25, grid)
        assert float(th[key]) == tau
        assert th[f"objective_{'position' if key == 'tau_p' else 'rotation'}"] == pytest.approx(obj)
    rows = list(csv.reader((out / "sweep_position.csv").open()))
    assert rows[0] == ["threshold", "fpr", "fnr"]
    assert float(rows[1][0]) == -math.inf and float(rows[-1][0]) == math.inf


def test_calibrate_separable_reaches_zero(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(12):
        need = i % 3 == 0
        d = rng.uniform(0.01, 0.1) * (1 if need else -1)
        recs.append(synth([0.5, 0.5 + d], [1.0, 1.0 + 2 * d], need, seed=i))
    p = tmp_path / "t.jsonl"
    write_trials_jsonl(recs, p)
    assert main(["calibrate", "--trials", str(p), "--output-dir", str(tmp_path)]) == 0
    th = json.loads((tmp_path / "thresholds.json").read_text())
    assert th["objective_position"] == 0 and th["objective_rotation"] == 0
    neg = max(r.slope(1).d_var_p for r in recs if not r.intervention_needed)
    pos = min(r.slope(1).d_var_p for r in recs if r.intervention_needed)
    assert neg <= th["tau_p"] < pos


def test_calibrate_single_component(tmp_path, campaign):
    assert main(["calibrate", "--trials", str(campaign / "trials.jsonl"), "--component", "rotation",
                 "--output-dir", str(tmp_path)]) == 0
    th = json.loads((tmp_path / "thresholds.json").read_text())
    assert "tau_r" in th and "tau_p" not in th
    assert not (tmp_path / "sweep_position.csv").exists()


def test_calibrate_single_class_exit_4(tmp_path, capsys):
    p = tmp_path / "t.jsonl"
    write_trials_jsonl([synth([0.5, 0.4], [1.0, 0.9], False, seed=i) for i in range(4)], p)
    assert main(["calibrate", "--trials", str(p), "--output-dir", str(tmp_path)]) == 4
    assert "simulate a mix" in capsys.readouterr().err


def test_report_golden(tmp_path):
    assert main(["report", "--trials", str(DATA / "report_trials.jsonl"), "--bins", "4",
                 "--output-dir", str(tmp_path)]) == 0
    got = json.loads((tmp_path / "report.json").read_text())
    want = json.loads((DATA / "report_golden.json").read_text())
    assert got["gating"] == want["gating"]
    for comp in ("position", "rotation"):
        for name in ("raw", "slope"):
            g, w = got["separation"][comp][name], want["separation"][comp][name]
            for k in ("kl_gaussian", "kl_histogram"):
                assert g[k] == pytest.approx(w[k], rel=1e-12)
            for cls in ("success", "failure"):
                for k in ("mean", "variance", "median"):
                    assert g[cls][k] == pytest.approx(w[cls][k], rel=1e-12, abs=1e-18)
    for comp in ("position", "rotation"):
        for name in ("raw", "slope"):
            rows = list(csv.reader((tmp_path / f"hist_{name}_{comp}.csv").open()))
            assert len(rows) == 5
            assert sum(int(r[2]) for r in rows[1:]) == 5 and sum(int(r[3]) for r in rows[1:]) == 3


def test_report_golden_is_independently_right():
    want = json.loads((DATA / "report_golden.json").read_text())
    recs = read_trials_jsonl(DATA / "report_trials.jsonl")
    tp, fp, fn, tn = oracles.count_confusion([r.intervention_needed for r in recs],
                                             [r.intervention_requested for r in recs])
    assert want["gating"]["confusion"] == {"tp": tp, "fp": fp, "fn": fn, "tn": tn} == {
        "tp": 2, "fp": 1, "fn": 1, "tn": 4}
    assert want["gating"]["fnr"] == pytest.approx(1 / 3) and want["gating"]["fpr"] == pytest.approx(0.2)
    assert want["gating"]["autonomy_rate"] == 5 / 8
    sep = want["separation"]
    assert sep["kl_direction"] == "failure||success"
    for comp, attr in (("position", "var_p"), ("rotation", "var_r")):
        for name in ("raw", "slope"):
            def value(r):
                v0, v1 = getattr(r.steps[0], attr), getattr(r.steps[1], attr)
                return v0 if name == "raw" else v1 - v0
            f = np.array([value(r) for r in recs if r.intervention_needed])
            s = np.array([value(r) for r in recs if not r.intervention_needed])
            e = sep[comp][name]
            assert e["failure"]["median"] == pytest.approx(np.median(f), rel=1e-12)
            assert e["success"]["variance"] == pytest.approx(np.var(s), rel=1e-12)
            kl = oracles.gaussian_kl_quadrature(f.mean(), f.var(), s.mean(), s.var())
            assert e["kl_gaussian"] == pytest.approx(kl, rel=1e-6)


def test_report_single_class_exit_4(tmp_path, capsys):
    p = tmp_path / "t.jsonl"
    write_trials_jsonl([synth([0.5, 0.4], [1.0, 0.9], True, seed=i) for i in range(3)], p)
    assert main(["report", "--trials", str(p), "--output-dir", str(tmp_path)]) == 4
    assert "both classes" in capsys.readouterr().err


def test_report_empty_file(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("")
    assert main(["report", "--trials", str(p), "--output-dir", str(tmp_path)]) == 3


def test_report_on_campaign(tmp_path, campaign):
    assert main(["report", "--trials", str(campaign / "trials.jsonl"), "--output-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["gating"]["autonomy_rate"] == 1.0
    assert rep["separation"]["n_success"] + rep["separation"]["n_failure"] <= sum(SMALL_MIX.values())


def gate_run(tmp_path, models, *extra, mix=SMALL_MIX, seed="11"):
    cfg = write_config(tmp_path / "g.json", {"scenarios": mix})
    code = main(["gate-run", "--config", cfg, "--seed", seed, "--output-dir", str(tmp_path),
                 "--model-dir", str(models / "models"), *extra])
    assert code == 0
    return json.loads((tmp_path / "gate_report.json").read_text())


def test_gate_run_injected_thresholds(tmp_path, models):
    gate_run(tmp_path, models, "--tau-p", "-0.310", "--tau-r", "-0.487")
    g = json.loads((tmp_path / "config.gate-run.json").read_text())["gate"]
    assert (g["tau_p"], g["tau_r"], g["enabled"]) == (-0.310, -0.487, True)
    recs = read_trials_jsonl(tmp_path / "gated_trials.jsonl")
    assert all(r.gated and r.gate is not None for r in recs if len(r.steps) > 1)


def test_gate_run_never_intervenes(tmp_path, models, campaign):
    rep = gate_run(tmp_path, models, "--tau-p", "inf", "--tau-r", "inf")
    assert rep["autonomy_rate"] == 1.0
    ungated = read_trials_jsonl(campaign / "trials.jsonl")
    assert rep["success_rate"] == sum(r.success for r in ungated) / len(ungated)


def test_gate_run_always_intervenes(tmp_path, models):
    rep = gate_run(tmp_path, models, "--tau-p=-inf", "--tau-r=-inf")
    assert rep["autonomy_rate"] == 0.0 and rep["success_rate"] == 1.0
    assert rep["confusion"]["fn"] == 0 and rep["confusion"]["tn"] == 0
    assert rep["fnr"] in (0.0, None)


def test_gate_run_thresholds_file_and_flag_override(tmp_path, models):
    (tmp_path / "th.json").write_text(json.dumps({"tau_p": "inf", "tau_r": 0.25}))
    gate_run(tmp_path, models, "--thresholds", str(tmp_path / "th.json"), "--tau-r", "-0.5")
    g = json.loads((tmp_path / "config.gate-run.json").read_text())["gate"]
    assert g["tau_p"] == "inf" and g["tau_r"] == -0.5


def test_report_recomputed_from_jsonl_matches_inline(tmp_path, models):
    rep = gate_run(tmp_path, models, "--tau-p", "0", "--tau-r", "0")
    recs = read_trials_jsonl(tmp_path / "gated_trials.jsonl")
    assert gate_report(recs) == rep


def test_gate_run_needs_scenarios(tmp_path, models):
    cfg = write_config(tmp_path / "g.json", {"scenarios": {k: 0 for k in SMALL_MIX}})
    assert main(["gate-run", "--config", cfg, "--output-dir", str(tmp_path),
                 "--model-dir", str(models / "models")]) == 3


def test_dropout_predictor_runs(tmp_path, models):
    mix = {"InDistribution": 2, "SuboptimalGrasp": 0, "NonLocalGoal": 0, "OODGeometry": 0}
    rep = gate_run(tmp_path, models, "--predictor-kind", "dropout", "--tau-p", "inf", "--tau-r", "inf", mix=mix)
    assert rep["n_trials"] == 2
    recs = read_trials_jsonl(tmp_path / "gated_trials.jsonl")
    assert all(r.n_predictions == DEFAULT_CONFIG["predictor"]["samples"] for r in recs)


def test_in_distribution_campaign_mostly_autonomous(tmp_path, models):
    # thresholds calibrated on a mixed, ungated campaign; then 60 fresh in-distribution trials
    cal = tmp_path / "cal"
    mix = {k: 2 * v for k, v in DEFAULT_CONFIG["scenarios"].items()}
    cfg = write_config(tmp_path / "c.json", {"scenarios": mix})
    assert main(["simulate", "--config", cfg, "--seed", "100", "--no-gate", "--workers", "4",
                 "--output-dir", str(cal), "--model-dir", str(models / "models")]) == 0
    assert main(["calibrate", "--trials", str(cal / "trials.jsonl"), "--output-dir", str(cal)]) == 0
    ids = {"InDistribution": 60, "SuboptimalGrasp": 0, "NonLocalGoal": 0, "OODGeometry": 0}
    rep = gate_run(tmp_path, models, "--thresholds", str(cal / "thresholds.json"), "--workers", "4",
                   mix=ids, seed="300")
    assert rep["autonomy_rate"] >= 0.9
