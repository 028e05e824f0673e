"""Command line entry point: train, simulate, calibrate, gate-run, report.

Configuration is one JSON document merged over DEFAULT_CONFIG; command-line
flags override config keys, and SERVOGATE_SEED supplies the global seed only
when neither a flag nor the config file sets it. The resolved config is
written next to every command's outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
degeneracy.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DistributionSummary,
    MetaObjectiveConfig,
    SlopeSample,
    TrialLabel,
    accuracy,
    calibrate,
    confusion,
    default_grid,
    false_negative_rate,
    false_positive_rate,
    kl_divergence_gaussian,
    kl_divergence_histogram,
    sweep_thresholds,
)
from .errors import ConfigError, DegenerateDistribution, EmptyInput, ServoGateError, UndefinedRate
from .gate import Component, GateConfig, Mode
from .predictors import (
    EnsemblePredictor,
    FEATURE_DIM,
    MODEL_MAGIC,
    MODEL_VERSION,
    StochasticPredictor,
    fit_ensemble,
    load_member,
    save_member,
)
from .sim import (
    Scenario,
    ScenarioKind,
    TrialRecord,
    generate_dataset,
    read_trials_jsonl,
    run_scenario,
    sub_seed,
    write_trace_csv,
)

SEED_ENV = "SERVOGATE_SEED"

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "servogate-out",
    "workers": 1,
    "scenarios": {
        "InDistribution": 16,
        "SuboptimalGrasp": 8,
        "NonLocalGoal": 8,
        "OODGeometry": 8,
        "Bimanual": 0,
    },
    "predictor": {
        "kind": "ensemble",
        "n_members": 5,
        "ridge_lambda": 1e-8,
        "train_tuples": 1000,
        "dropout_rate": 0.5,
        "samples": 100,
        "model_dir": None,
    },
    "gate": {
        "enabled": True,
        "tau_p": -0.310,
        "tau_r": -0.487,
        "mode": "both",
        "decision_step": 1,
        "monitor_continuously": False,
    },
    "sim": {
        "eps_succ": 0.003,
        "max_steps": 20,
        "noise_sigma": 0.0005,
        "subsample_n": None,
        "export_traces": False,
    },
    "calibration": {"w": 0.5},
}


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _num(v, name, lo=None, integer=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}, got {v!r}")
    return int(v) if integer else float(v)


def _tau(v, name):
    if isinstance(v, str) and v in ("inf", "-inf"):
        return float(v)
    v = _num(v, name)
    if math.isnan(v):
        raise ConfigError(f"{name} must not be NaN")
    return v


def _jsonable(obj):
    """Non-finite floats become the strings 'inf' / '-inf' so JSON stays strict."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def validate_config(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["seed"] = _num(cfg["seed"], "seed", 0, integer=True)
    cfg["workers"] = _num(cfg["workers"], "workers", 1, integer=True)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir must be a non-empty path")
    for kind in list(cfg["scenarios"]):
        ScenarioKind(kind)  # unknown kinds already rejected by the merge
        cfg["scenarios"][kind] = _num(cfg["scenarios"][kind], f"scenarios.{kind}", 0, integer=True)
    p = cfg["predictor"]
    if p["kind"] not in ("ensemble", "dropout"):
        raise ConfigError("predictor.kind must be 'ensemble' or 'dropout'")
    p["n_members"] = _num(p["n_members"], "predictor.n_members", integer=True)
    if p["n_members"] < 2:
        raise ConfigError("predictor.n_members must be >= 2: variance needs at least two members")
    p["ridge_lambda"] = _num(p["ridge_lambda"], "predictor.ridge_lambda")
    if not p["ridge_lambda"] > 0:
        raise ConfigError("predictor.ridge_lambda must be > 0")
    p["train_tuples"] = _num(p["train_tuples"], "predictor.train_tuples", FEATURE_DIM, integer=True)
    p["dropout_rate"] = _num(p["dropout_rate"], "predictor.dropout_rate")
    if not 0.0 < p["dropout_rate"] < 1.0:
        raise ConfigError("predictor.dropout_rate must lie strictly between 0 and 1")
    p["samples"] = _num(p["samples"], "predictor.samples", 2, integer=True)
    g = cfg["gate"]
    g["tau_p"] = _tau(g["tau_p"], "gate.tau_p")
    g["tau_r"] = _tau(g["tau_r"], "gate.tau_r")
    if g["mode"] not in [m.value for m in Mode]:
        raise ConfigError(f"gate.mode must be one of {[m.value for m in Mode]}")
    g["decision_step"] = _num(g["decision_step"], "gate.decision_step", 1, integer=True)
    for key in ("enabled", "monitor_continuously"):
        if not isinstance(g[key], bool):
            raise ConfigError(f"gate.{key} must be true or false")
    s = cfg["sim"]
    s["eps_succ"] = _num(s["eps_succ"], "sim.eps_succ")
    if not s["eps_succ"] > 0:
        raise ConfigError("sim.eps_succ must be > 0")
    s["max_steps"] = _num(s["max_steps"], "sim.max_steps", 2, integer=True)
    s["noise_sigma"] = _num(s["noise_sigma"], "sim.noise_sigma", 0.0)
    s["subsample_n"] = _num(s["subsample_n"], "sim.subsample_n", 1, integer=True, allow_none=True)
    if not isinstance(s["export_traces"], bool):
        raise ConfigError("sim.export_traces must be true or false")
    w = _num(cfg["calibration"]["w"], "calibration.w", 0.0)
    if w > 1.0:
        raise ConfigError("calibration.w must lie in [0, 1]")
    cfg["calibration"]["w"] = w
    return cfg


def resolve_config(args) -> dict:
    """defaults < SERVOGATE_SEED < config file < flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, doc)
    flag_map = {
        "seed": ("seed",),
        "output_dir": ("output_dir",),
        "workers": ("workers",),
        "model_dir": ("predictor", "model_dir"),
        "predictor_kind": ("predictor", "kind"),
        "n_members": ("predictor", "n_members"),
        "tau_p": ("gate", "tau_p"),
        "tau_r": ("gate", "tau_r"),
        "mode": ("gate", "mode"),
        "w": ("calibration", "w"),
    }
    for attr, keys in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            d = cfg
            for k in keys[:-1]:
                d = d[k]
            d[keys[-1]] = v
    if getattr(args, "no_gate", False):
        cfg["gate"]["enabled"] = False
    return validate_config(cfg)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _outdir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    return out


def _echo_config(cfg, out: Path, command: str) -> None:
    _dump(cfg, out / f"config.{command}.json")


def gate_config(cfg) -> GateConfig:
    g = cfg["gate"]
    return GateConfig(g["tau_p"], g["tau_r"], Mode(g["mode"]), g["decision_step"], g["monitor_continuously"])


def campaign_scenarios(cfg) -> list[Scenario]:
    """Scenario seeds depend on (global seed, kind, index) only."""
    out = []
    for ki, kind in enumerate(ScenarioKind):
        for i in range(cfg["scenarios"].get(kind.value, 0)):
            out.append(Scenario.sample(kind, sub_seed(cfg["seed"], ki, i)))
    return out


# ---------------------------------------------------------------- models

def _model_dir(cfg) -> Path:
    d = cfg["predictor"]["model_dir"]
    return Path(d) if d else Path(cfg["output_dir"]) / "models"


def train_models(cfg) -> tuple[EnsemblePredictor, dict]:
    p = cfg["predictor"]
    data = generate_dataset(p["train_tuples"], cfg["seed"], cfg["sim"]["noise_sigma"], cfg["sim"]["subsample_n"])
    ens = fit_ensemble(data, p["n_members"], cfg["seed"], p["ridge_lambda"])
    manifest = {
        "format": f"{MODEL_MAGIC} {MODEL_VERSION}",
        "dataset_seed": cfg["seed"],
        "train_tuples": p["train_tuples"],
        "feature_dim": FEATURE_DIM,
        "ridge_lambda": p["ridge_lambda"],
        "noise_sigma": cfg["sim"]["noise_sigma"],
        "members": [{"file": f"member_{k}.txt", "seed": m.seed} for k, m in enumerate(ens.members)],
    }
    return ens, manifest


def load_predictor(cfg):
    d = _model_dir(cfg)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no model manifest at {mpath}; run 'servogate train' first")
    manifest = json.loads(mpath.read_text())
    members = tuple(load_member(d / m["file"]) for m in manifest["members"])
    p = cfg["predictor"]
    if p["kind"] == "dropout":
        return StochasticPredictor(members[0], p["dropout_rate"], p["samples"])
    return EnsemblePredictor(members)


# ---------------------------------------------------------------- campaigns

_WORKER_STATE: dict = {}


def _init_worker(predictor, gate, sim_kw):
    _WORKER_STATE.update(predictor=predictor, gate=gate, sim_kw=sim_kw)


def _run_one(scenario: Scenario) -> str:
    st = _WORKER_STATE
    return run_scenario(st["predictor"], st["gate"], scenario, **st["sim_kw"]).to_json()


def run_campaign(predictor, gate: GateConfig | None, scenarios, sim: dict, workers: int = 1) -> list[str]:
    """JSON lines in scenario order; identical for any worker count."""
    sim_kw = {k: sim[k] for k in ("max_steps", "eps_succ", "noise_sigma", "subsample_n")}
    if workers <= 1 or len(scenarios) <= 1:
        _init_worker(predictor, gate, sim_kw)
        return [_run_one(s) for s in scenarios]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(predictor, gate, sim_kw)) as pool:
        return list(pool.map(_run_one, scenarios, chunksize=max(1, len(scenarios) // (4 * workers))))


def _write_lines(lines, path: Path) -> None:
    with path.open("w") as f:
        for line in lines:
            f.write(line + "\n")


def _export_traces(lines, out: Path) -> None:
    d = out / "traces"
    d.mkdir(exist_ok=True)
    for i, line in enumerate(lines):
        write_trace_csv(TrialRecord.from_dict(json.loads(line)).trace(), d / f"trial_{i:04d}.csv")


# ---------------------------------------------------------------- reports

def _rate(fn, cm):
    try:
        return fn(cm)
    except UndefinedRate:
        return None


def gate_report(records) -> dict:
    records = list(records)
    if not records:
        raise EmptyInput("no trials to report on")
    cm = confusion(TrialLabel(r.intervention_needed, r.intervention_requested) for r in records)
    n = len(records)
    return {
        "n_trials": n,
        "confusion": cm.as_dict(),
        "accuracy": accuracy(cm),
        "fpr": _rate(false_positive_rate, cm),
        "fnr": _rate(false_negative_rate, cm),
        "autonomy_rate": sum(not r.intervention_requested for r in records) / n,
        "success_rate": sum(r.success for r in records) / n,
        "ungated_success_rate": sum(not r.intervention_needed for r in records) / n,
    }


def slope_samples(records) -> tuple[list[SlopeSample], int]:
    """Slopes at t=1 with labels; also the number of trials that ended before t=1."""
    out, skipped = [], 0
    for r in records:
        u = r.slope(1)
        if u is None:
            skipped += 1
            continue
        out.append(SlopeSample(u.d_var_p, u.d_var_r, r.intervention_needed))
    return out, skipped


def _summary_json(s: DistributionSummary) -> dict:
    xs = np.asarray(s.samples)
    return {"n": len(xs), "mean": s.fitted_mean, "variance": s.fitted_variance, "median": float(np.median(xs))}


def separation_report(records, bins: int = 20) -> dict:
    """Raw variance (t=0) and slope (t=1) distributions split by outcome, with KL(failure || success)."""
    records = [r for r in records if r.slope(1) is not None]
    succ = [r for r in records if not r.intervention_needed]
    fail = [r for r in records if r.intervention_needed]
    if not succ or not fail:
        raise DegenerateDistribution("KL needs trials from both classes (successes and failures)")
    out = {"n_success": len(succ), "n_failure": len(fail), "kl_direction": "failure||success"}
    for comp, attr in ((Component.POSITION, "var_p"), (Component.ROTATION, "var_r")):
        entry = {}
        for name, get in (
            ("raw", lambda r: getattr(r.steps[0], attr)),
            ("slope", lambda r: getattr(r.steps[1], attr) - getattr(r.steps[0], attr)),
        ):
            s = DistributionSummary.fit([get(r) for r in succ])
            f = DistributionSummary.fit([get(r) for r in fail])
            entry[name] = {
                "success": _summary_json(s),
                "failure": _summary_json(f),
                "kl_gaussian": kl_divergence_gaussian(f, s),
                "kl_histogram": kl_divergence_histogram(f, s, bins=bins),
            }
        out[comp.value] = entry
    return out


def _histogram_rows(succ, fail, bins):
    lo = min(min(succ), min(fail))
    hi = max(max(succ), max(fail))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hs = np.histogram(succ, edges)[0]
    hf = np.histogram(fail, edges)[0]
    return [(repr(float(edges[i])), repr(float(edges[i + 1])), int(hs[i]), int(hf[i])) for i in range(bins)]


def write_histograms(records, out: Path, bins: int = 20) -> None:
    records = [r for r in records if r.slope(1) is not None]
    succ = [r for r in records if not r.intervention_needed]
    fail = [r for r in records if r.intervention_needed]
    if not succ or not fail:
        return
    for attr, comp in (("var_p", "position"), ("var_r", "rotation")):
        for name, get in (
            ("raw", lambda r: getattr(r.steps[0], attr)),
            ("slope", lambda r: getattr(r.steps[1], attr) - getattr(r.steps[0], attr)),
        ):
            rows = _histogram_rows([get(r) for r in succ], [get(r) for r in fail], bins)
            with (out / f"hist_{name}_{comp}.csv").open("w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["bin_lo", "bin_hi", "success", "failure"])
                w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(cfg)
    d = _model_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    ens, manifest = train_models(cfg)
    for k, m in enumerate(ens.members):
        save_member(m, d / f"member_{k}.txt")
    _dump(manifest, d / "manifest.json")
    _echo_config(cfg, out, "train")
    print(f"wrote {len(ens.members)} members to {d}")
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(cfg)
    scenarios = campaign_scenarios(cfg)
    gate = gate_config(cfg) if cfg["gate"]["enabled"] else None
    lines = run_campaign(load_predictor(cfg), gate, scenarios, cfg["sim"], cfg["workers"]) if scenarios else []
    path = out / (args.out_name or "trials.jsonl")
    _write_lines(lines, path)
    if cfg["sim"]["export_traces"]:
        _export_traces(lines, out)
    _echo_config(cfg, out, "simulate")
    print(f"wrote {len(lines)} trials to {path}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(cfg)
    samples, skipped = slope_samples(read_trials_jsonl(args.trials))
    if not samples:
        raise EmptyInput("no trials with a slope at t=1")
    n_pos = sum(s.intervention_needed for s in samples)
    if n_pos == 0 or n_pos == len(samples):
        raise UndefinedRate(
            "calibration needs trials where intervention was needed and trials where it was not; "
            "simulate a mix of in-distribution and out-of-distribution scenarios with the gate off"
        )
    comps = [Component.POSITION, Component.ROTATION] if args.component == "both" else [Component(args.component)]
    w = cfg["calibration"]["w"]
    result = {"w": w, "n_trials": len(samples), "skipped_trials": skipped}
    for comp in comps:
        tau, obj = calibrate(samples, comp, MetaObjectiveConfig(w))
        key = "tau_p" if comp is Component.POSITION else "tau_r"
        result[key] = tau
        result[f"objective_{comp.value}"] = obj
        with (out / f"sweep_{comp.value}.csv").open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["threshold", "fpr", "fnr"])
            for p in sweep_thresholds(samples, comp, default_grid(samples, comp)):
                wr.writerow([repr(p.threshold), repr(p.fpr), repr(p.fnr)])
    _dump(result, out / "thresholds.json")
    _echo_config(cfg, out, "calibrate")
    print(json.dumps(_jsonable(result), sort_keys=True))
    return 0


def cmd_gate_run(args) -> int:
    cfg = resolve_config(args)
    if args.thresholds:
        th = json.loads(Path(args.thresholds).read_text())
        # explicit flags still win over the thresholds file
        if args.tau_p is None and "tau_p" in th:
            cfg["gate"]["tau_p"] = _tau(th["tau_p"], "tau_p")
        if args.tau_r is None and "tau_r" in th:
            cfg["gate"]["tau_r"] = _tau(th["tau_r"], "tau_r")
    cfg["gate"]["enabled"] = True
    out = _outdir(cfg)
    scenarios = campaign_scenarios(cfg)
    if not scenarios:
        raise EmptyInput("gate-run needs at least one scenario")
    lines = run_campaign(load_predictor(cfg), gate_config(cfg), scenarios, cfg["sim"], cfg["workers"])
    _write_lines(lines, out / "gated_trials.jsonl")
    if cfg["sim"]["export_traces"]:
        _export_traces(lines, out)
    report = gate_report(TrialRecord.from_dict(json.loads(x)) for x in lines)
    _dump(report, out / "gate_report.json")
    _echo_config(cfg, out, "gate-run")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(cfg)
    records = read_trials_jsonl(args.trials)
    if not records:
        raise EmptyInput(f"{args.trials} holds no trials")
    report = {"gating": gate_report(records), "separation": separation_report(records, args.bins)}
    _dump(report, out / "report.json")
    write_histograms(records, out, args.bins)
    _echo_config(cfg, out, "report")
    print(json.dumps(report["separation"], sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="servogate", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        p.add_argument("--model-dir")
        p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="generate self-supervised data and fit ensemble members")
    common(p)
    p.add_argument("--n-members", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run a scenario campaign and write trials.jsonl")
    common(p)
    p.add_argument("--predictor-kind", choices=["ensemble", "dropout"])
    p.add_argument("--no-gate", action="store_true", help="fully autonomous runs (label generation)")
    p.add_argument("--tau-p", type=float)
    p.add_argument("--tau-r", type=float)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--out-name", help="file name for the trials (default trials.jsonl)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="select slope thresholds minimizing FN + w*FP")
    common(p)
    p.add_argument("--trials", required=True)
    p.add_argument("--w", type=float)
    p.add_argument("--component", choices=["position", "rotation", "both"], default="both")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gate-run", help="run a gated campaign and report confusion counts")
    common(p)
    p.add_argument("--predictor-kind", choices=["ensemble", "dropout"])
    p.add_argument("--thresholds", help="thresholds.json from 'calibrate'")
    p.add_argument("--tau-p", type=float)
    p.add_argument("--tau-r", type=float)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.set_defaults(func=cmd_gate_run)

    p = sub.add_parser("report", help="distribution summaries, KL values and histograms")
    common(p)
    p.add_argument("--trials", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return e.exit_code
    except ServoGateError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
