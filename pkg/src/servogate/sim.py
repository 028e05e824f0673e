"""Kernel-weighted deformable sheet, scenario generation and gated episodes.

A sheet is a rows x cols grid of nodes whose row 0 is anchored. Moving the
grasp node by a rigid transform moves every node by the same transform
(about the current grasp position) scaled by exp(-d^2 / sigma^2), d being the
rest distance to the grasp node.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ActionOutOfRange, GraspOnAnchor, ParseError
from .gate import Action, Component, GateConfig, GateDecision, UncertaintyVector, VarianceTrace, decide_at
from .pointcloud import PointCloud, chamfer, farthest_point_indices
from .predictors import (
    EnsemblePredictor,
    ShapeServoInput,
    StochasticPredictor,
    SupervisionTuple,
    dropout_params,
    ensemble_params,
    featurize,
    params_to_action,
)
from .se3 import EnsembleOutputs, RigidTransform, aggregate

MAX_STEP_TRANSLATION = 0.05
TERMINATION_NORM = 0.001
DEFAULT_EPS_SUCC = 0.003
DEFAULT_NOISE = 0.0005
DEFAULT_MAX_STEPS = 20
SERVO_STEP = 0.05  # per-step translation the controller will command


@dataclass
class DeformableSheet:
    rest: np.ndarray  # (rows, cols, 3)
    kernel_sigma: float
    displacement: np.ndarray = None

    def __post_init__(self):
        self.rest = np.asarray(self.rest, dtype=float)
        rows, cols, _ = self.rest.shape
        if rows < 4 or cols < 4:
            raise ValueError("a sheet needs at least a 4x4 grid")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be > 0")
        if self.displacement is None:
            self.displacement = np.zeros_like(self.rest)
        else:
            self.displacement = np.array(self.displacement, dtype=float)
        self.displacement[0] = 0.0

    @classmethod
    def grid(cls, rows: int, cols: int, spacing: float, kernel_sigma: float, curvature: float = 0.0):
        """Rest grid on z=0 with row 0 (y=0) anchored; ``curvature`` bows it along x."""
        ys, xs = np.meshgrid(np.arange(rows) * spacing, np.arange(cols) * spacing, indexing="ij")
        xc = xs - xs.mean()
        zs = curvature * xc**2
        return cls(np.stack([xs, ys, zs], axis=-1), kernel_sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rest.shape[:2]

    @property
    def n_nodes(self) -> int:
        return self.rest.shape[0] * self.rest.shape[1]

    def positions(self) -> np.ndarray:
        return (self.rest + self.displacement).reshape(-1, 3)

    def rest_positions(self) -> np.ndarray:
        return self.rest.reshape(-1, 3)

    def anchored(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0] = True
        return mask.ravel()

    def node(self, row: int, col: int) -> int:
        return row * self.shape[1] + col

    def copy(self) -> "DeformableSheet":
        return DeformableSheet(self.rest.copy(), self.kernel_sigma, self.displacement.copy())

    def reset(self) -> "DeformableSheet":
        return DeformableSheet(self.rest.copy(), self.kernel_sigma)


def kernel_weights(sheet: DeformableSheet, grasp_node: int) -> np.ndarray:
    rest = sheet.rest_positions()
    d2 = np.sum((rest - rest[grasp_node]) ** 2, axis=1)
    return np.exp(-d2 / sheet.kernel_sigma**2)


def apply_action(sheet: DeformableSheet, grasp_node: int, action: RigidTransform) -> DeformableSheet:
    if not 0 <= grasp_node < sheet.n_nodes:
        raise IndexError(f"grasp node {grasp_node} outside the grid")
    if sheet.anchored()[grasp_node]:
        raise GraspOnAnchor(f"node {grasp_node} is on the anchored edge")
    if np.linalg.norm(action.translation) > MAX_STEP_TRANSLATION + 1e-12:
        raise ActionOutOfRange(
            f"translation {np.linalg.norm(action.translation):.4f} m exceeds {MAX_STEP_TRANSLATION} m per step"
        )
    x = sheet.positions()
    g = x[grasp_node]
    moved = (x - g) @ action.rotation.T + g + action.translation
    w = kernel_weights(sheet, grasp_node)[:, None]
    new_x = x + w * (moved - x)
    disp = new_x.reshape(sheet.rest.shape) - sheet.rest
    disp[0] = 0.0
    return DeformableSheet(sheet.rest, sheet.kernel_sigma, disp)


def clip_action(action: RigidTransform, limit: float = MAX_STEP_TRANSLATION) -> RigidTransform:
    n = float(np.linalg.norm(action.translation))
    if n <= limit:
        return action
    return RigidTransform(action.rotation, action.translation * (limit / n))


def surface_indices(sheet: DeformableSheet) -> np.ndarray:
    """Nodes visible from above: not covered by a higher node within half a grid cell."""
    x = sheet.positions()
    rest = sheet.rest_positions()
    spacing = float(np.linalg.norm(rest[1] - rest[0]))
    dxy = np.linalg.norm(x[:, None, :2] - x[None, :, :2], axis=-1)
    higher = x[None, :, 2] > x[:, None, 2] + 0.5 * spacing
    occluded = np.any((dxy < 0.5 * spacing) & higher, axis=1)
    return np.flatnonzero(~occluded)


def sense_point_cloud(
    sheet: DeformableSheet, subsample_n: int | None = None, noise_sigma: float = DEFAULT_NOISE, seed: int = 0
) -> PointCloud:
    """Partial-view cloud: visible nodes, farthest-point subsampled, Gaussian noise."""
    pts = sheet.positions()[surface_indices(sheet)]
    n = len(pts) if subsample_n is None else min(int(subsample_n), len(pts))
    rng = np.random.default_rng(seed)
    start_seed = int(rng.integers(2**31))
    if n < len(pts):
        pts = pts[farthest_point_indices(pts, n, start_seed)]
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return PointCloud(pts)


def anchor_displacement(sheet: DeformableSheet) -> float:
    return float(np.max(np.abs(sheet.displacement[0])))


def sub_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a (seed, keys...) stream; order of use never matters."""
    return int(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(1)[0])


# ---------------------------------------------------------------- scenarios

SPACING = 0.01
GRID_RANGE = (8, 10)  # rows and cols, inclusive
TRAIN_SIGMA = (0.03, 0.045)
STIFF_SIGMA = (0.12, 0.2)  # kernels far wider than anything seen in training
GOAL_REACH = (0.004, 0.02)  # max node displacement of a sampled goal, log-uniform
DENT_DEPTH = (0.008, 0.02)
SAMPLE_TRANSLATION = (0.015, 0.015, 0.02)
SAMPLE_ROTATION = 0.08


class ScenarioKind(str, Enum):
    IN_DISTRIBUTION = "InDistribution"
    SUBOPTIMAL_GRASP = "SuboptimalGrasp"
    NON_LOCAL_GOAL = "NonLocalGoal"
    OOD_GEOMETRY = "OODGeometry"
    BIMANUAL = "Bimanual"


@dataclass(frozen=True)
class OracleStep:
    node: int
    action: RigidTransform


def sample_action(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    """Random small grasp motion: lateral +-15 mm, lift 0..20 mm, +-0.08 rad per axis."""
    tx, ty, tz = SAMPLE_TRANSLATION
    t = np.array([rng.uniform(-tx, tx), rng.uniform(-ty, ty), rng.uniform(0.0, tz)]) * scale
    w = rng.uniform(-SAMPLE_ROTATION, SAMPLE_ROTATION, 3) * scale
    return RigidTransform.from_rotvec(w, t)


def _reach_action(sheet: DeformableSheet, node: int, rng: np.random.Generator, reach) -> RigidTransform:
    """A sampled action rescaled so the largest node displacement is log-uniform in ``reach``."""
    a = sample_action(rng)
    d = math.exp(rng.uniform(math.log(reach[0]), math.log(reach[1])))
    cur = np.max(np.abs(apply_action(sheet, node, a).positions() - sheet.positions()))
    s = d / cur
    return clip_action(RigidTransform.from_rotvec(a.rotvec() * s, a.translation * s))


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    seed: int
    rows: int
    cols: int
    spacing: float
    kernel_sigma: float
    curvature: float
    grasp_node: int
    oracle_plan: tuple = ()
    left_grasp_node: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        object.__setattr__(self, "oracle_plan", tuple(self.oracle_plan))
        if int(self.seed) < 0:
            raise ValueError("scenario seeds are non-negative")
        if (self.kind is ScenarioKind.BIMANUAL) != (self.left_grasp_node is not None):
            raise ValueError("a left grasp node is given exactly for bimanual scenarios")

    def sheet(self) -> DeformableSheet:
        return DeformableSheet.grid(self.rows, self.cols, self.spacing, self.kernel_sigma, self.curvature)

    @property
    def oracle_actions(self) -> list[RigidTransform]:
        return [s.action for s in self.oracle_plan]

    @classmethod
    def sample(cls, kind, seed: int) -> "Scenario":
        kind = ScenarioKind(kind)
        rng = np.random.default_rng(seed)
        lo, hi = GRID_RANGE
        rows = int(rng.integers(lo, hi + 1))
        cols = int(rng.integers(lo, hi + 1)) + (2 if kind is ScenarioKind.BIMANUAL else 0)
        sigma_range = STIFF_SIGMA if kind is ScenarioKind.OOD_GEOMETRY else TRAIN_SIGMA
        sigma = float(rng.uniform(*sigma_range))
        sheet = DeformableSheet.grid(rows, cols, SPACING, sigma)
        col = int(rng.integers(cols // 3, cols - cols // 3))
        g = sheet.node(rows - 1, col)
        left = None
        if kind in (ScenarioKind.IN_DISTRIBUTION, ScenarioKind.OOD_GEOMETRY):
            plan = [OracleStep(g, _reach_action(sheet, g, rng, GOAL_REACH))]
        elif kind is ScenarioKind.SUBOPTIMAL_GRASP:
            # the goal is a dent pressed in from an interior node; the robot holds the free edge
            go = sheet.node(int(rng.integers(2, rows - 3)), col)
            press = RigidTransform.from_rotvec(
                [rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1), 0.0],
                [rng.uniform(-0.004, 0.004), rng.uniform(-0.004, 0.004), -rng.uniform(*DENT_DEPTH)],
            )
            plan = [OracleStep(go, press)]
        elif kind is ScenarioKind.NON_LOCAL_GOAL:
            lift = RigidTransform.from_rotvec([rng.uniform(0.5, 0.8), 0.0, 0.0], [0.0, -0.005, 0.02])
            place = RigidTransform.from_rotvec(
                [0.0, 0.0, rng.uniform(-0.2, 0.2)], [rng.uniform(-0.01, 0.01), -0.015, -0.02]
            )
            plan = [OracleStep(g, lift), OracleStep(g, place)]
        else:
            left = sheet.node(rows - 1, cols // 4)
            g = sheet.node(rows - 1, cols - 1 - cols // 4)
            plan = [
                OracleStep(left, _reach_action(sheet, left, rng, GOAL_REACH)),
                OracleStep(g, _reach_action(sheet, g, rng, GOAL_REACH)),
            ]
        return cls(kind, int(seed), rows, cols, SPACING, sigma, 0.0, g, tuple(plan), left)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": int(self.seed),
            "rows": int(self.rows),
            "cols": int(self.cols),
            "spacing": float(self.spacing),
            "kernel_sigma": float(self.kernel_sigma),
            "curvature": float(self.curvature),
            "grasp_node": int(self.grasp_node),
            "left_grasp_node": None if self.left_grasp_node is None else int(self.left_grasp_node),
            "oracle_plan": [
                {
                    "node": int(s.node),
                    "rotation": [float(v) for v in s.action.rotation.ravel()],
                    "translation": [float(v) for v in s.action.translation],
                }
                for s in self.oracle_plan
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        plan = tuple(
            OracleStep(int(s["node"]), RigidTransform(np.reshape(s["rotation"], (3, 3)), s["translation"]))
            for s in d["oracle_plan"]
        )
        return cls(
            ScenarioKind(d["kind"]), int(d["seed"]), int(d["rows"]), int(d["cols"]), float(d["spacing"]),
            float(d["kernel_sigma"]), float(d["curvature"]), int(d["grasp_node"]), plan, d.get("left_grasp_node"),
        )


def replay(sheet: DeformableSheet, plan: Iterable[OracleStep]) -> DeformableSheet:
    for step in plan:
        sheet = apply_action(sheet, step.node, step.action)
    return sheet


def make_goal(
    sheet: DeformableSheet, scenario: Scenario, noise_sigma: float = DEFAULT_NOISE, subsample_n: int | None = None
) -> tuple[PointCloud, list[RigidTransform]]:
    """Apply the scenario's oracle plan to ``sheet`` and sense the result as the goal."""
    goal_state = replay(sheet, scenario.oracle_plan)
    cloud = sense_point_cloud(goal_state, subsample_n, noise_sigma, sub_seed(scenario.seed, 0))
    return cloud, scenario.oracle_actions


# ---------------------------------------------------------------- training data

def training_scene(rng: np.random.Generator) -> tuple[DeformableSheet, int]:
    lo, hi = GRID_RANGE
    rows, cols = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    sheet = DeformableSheet.grid(rows, cols, SPACING, float(rng.uniform(*TRAIN_SIGMA)))
    col = int(rng.integers(cols // 3, cols - cols // 3))
    return sheet, sheet.node(rows - 1, col)


def generate_dataset(
    n: int, seed: int, noise_sigma: float = DEFAULT_NOISE, subsample_n: int | None = None
) -> list[SupervisionTuple]:
    """Self-supervised tuples: act on a (possibly pre-deformed) sheet, sense before and after."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        sheet, g = training_scene(rng)
        if rng.random() < 0.5:
            sheet = apply_action(sheet, g, sample_action(rng, 0.5))
        a = sample_action(rng)
        pc = sense_point_cloud(sheet, subsample_n, noise_sigma, int(rng.integers(2**31)))
        pg = sense_point_cloud(apply_action(sheet, g, a), subsample_n, noise_sigma, int(rng.integers(2**31)))
        out.append(SupervisionTuple(ShapeServoInput(pc, pg, sheet.positions()[g]), a))
    return out


# ---------------------------------------------------------------- episodes

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StepRecord:
    t: int
    translation: tuple
    rotvec: tuple
    var_p: float
    var_r: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "translation": list(self.translation),
            "rotvec": list(self.rotvec),
            "var_p": self.var_p,
            "var_r": self.var_r,
        }


def _decision_to_dict(d: GateDecision | None):
    if d is None:
        return None
    return {
        "action": d.action.value,
        "at_step": d.at_step,
        "d_var_p": d.u.d_var_p,
        "d_var_r": d.u.d_var_r,
        "triggered_by": sorted(c.value for c in d.triggered_by),
    }


def _decision_from_dict(d):
    if d is None:
        return None
    return GateDecision(
        Action(d["action"]),
        int(d["at_step"]),
        UncertaintyVector(float(d["d_var_p"]), float(d["d_var_r"])),
        frozenset(Component(c) for c in d["triggered_by"]),
    )


@dataclass(frozen=True)
class TrialRecord:
    scenario: Scenario
    steps: tuple
    gated: bool
    gate: GateDecision | None
    termination: str  # converged | max_steps | intervention | grasp_lost
    terminated_at_step: int
    final_chamfer: float
    success: bool
    intervention_needed: bool
    intervention_requested: bool
    anchor_max_displacement: float
    n_predictions: int

    def trace(self) -> VarianceTrace:
        return VarianceTrace.from_rows((s.t, s.var_p, s.var_r) for s in self.steps)

    def slope(self, t: int = 1) -> UncertaintyVector | None:
        """Variance change at ``t``, or None when the episode ended before it."""
        if len(self.steps) <= t:
            return None
        a, b = self.steps[t - 1], self.steps[t]
        return UncertaintyVector(b.var_p - a.var_p, b.var_r - a.var_r)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "gated": self.gated,
            "gate": _decision_to_dict(self.gate),
            "termination": self.termination,
            "terminated_at_step": self.terminated_at_step,
            "final_chamfer": self.final_chamfer,
            "success": self.success,
            "intervention_needed": self.intervention_needed,
            "intervention_requested": self.intervention_requested,
            "anchor_max_displacement": self.anchor_max_displacement,
            "n_predictions": self.n_predictions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        steps = tuple(
            StepRecord(int(s["t"]), tuple(s["translation"]), tuple(s["rotvec"]), float(s["var_p"]), float(s["var_r"]))
            for s in d["steps"]
        )
        return cls(
            Scenario.from_dict(d["scenario"]),
            steps,
            bool(d["gated"]),
            _decision_from_dict(d["gate"]),
            str(d["termination"]),
            int(d["terminated_at_step"]),
            float(d["final_chamfer"]),
            bool(d["success"]),
            bool(d["intervention_needed"]),
            bool(d["intervention_requested"]),
            float(d["anchor_max_displacement"]),
            int(d["n_predictions"]),
        )


def _predict(predictor, x: ShapeServoInput, seed: int) -> EnsembleOutputs:
    if isinstance(predictor, EnsemblePredictor):
        params = ensemble_params(predictor, featurize(x))
    elif isinstance(predictor, StochasticPredictor):
        params = dropout_params(predictor, featurize(x), seed)
    else:
        raise TypeError(f"unsupported predictor {type(predictor).__name__}")
    return EnsembleOutputs.from_transforms(params_to_action(p) for p in params)


def _n_predictions(predictor) -> int:
    return len(predictor) if isinstance(predictor, EnsemblePredictor) else predictor.sample_count


def _gate_checks(cfg: GateConfig, t: int) -> bool:
    return t >= 1 if cfg.monitor_continuously else t == cfg.decision_step


def _episode(predictor, gate_config, scenario, max_steps, eps_succ, noise_sigma, subsample_n, bimanual):
    if max_steps < 2:
        raise ValueError("max_steps must be >= 2 so the slope at t=1 exists")
    base = scenario.sheet()
    goal_state = replay(base, scenario.oracle_plan)
    goal_cloud = sense_point_cloud(goal_state, subsample_n, noise_sigma, sub_seed(scenario.seed, 0))
    left_plan = [s for s in scenario.oracle_plan if s.node == scenario.left_grasp_node] if bimanual else []
    g = scenario.grasp_node
    sheet = base
    anchor = 0.0
    steps: list[StepRecord] = []
    decision = None
    termination, t_end = "max_steps", max_steps - 1
    for t in range(max_steps):
        if t < len(left_plan):
            sheet = apply_action(sheet, left_plan[t].node, left_plan[t].action)
            anchor = max(anchor, anchor_displacement(sheet))
        pc = sense_point_cloud(sheet, subsample_n, noise_sigma, sub_seed(scenario.seed, 1, t))
        try:
            x = ShapeServoInput(pc, goal_cloud, sheet.positions()[g])
        except ValueError:
            # grasp folded out of view: the policy has nothing to act on
            termination, t_end = "grasp_lost", t
            break
        a, vp, vr = aggregate(_predict(predictor, x, sub_seed(scenario.seed, 2, t)))
        steps.append(StepRecord(t, tuple(a.translation.tolist()), tuple(a.rotvec().tolist()), vp, vr))
        if gate_config is not None and _gate_checks(gate_config, t):
            trace = VarianceTrace.from_rows((s.t, s.var_p, s.var_r) for s in steps)
            decision = decide_at(trace, t, gate_config)
            if decision.intervene:
                sheet = replay(base, scenario.oracle_plan)
                anchor = max(anchor, anchor_displacement(sheet))
                termination, t_end = "intervention", t
                break
        if t >= 1 and float(np.linalg.norm(a.translation)) < TERMINATION_NORM:
            termination, t_end = "converged", t
            break
        sheet = apply_action(sheet, g, clip_action(a, SERVO_STEP))
        anchor = max(anchor, anchor_displacement(sheet))
    final = chamfer(sheet.positions(), goal_state.positions())
    success = final < eps_succ
    requested = decision is not None and decision.intervene
    return TrialRecord(
        scenario, tuple(steps), gate_config is not None, decision, termination, t_end,
        final, success, not success, requested, anchor, _n_predictions(predictor),
    )


def _run(predictor, gate_config, scenario, max_steps, eps_succ, noise_sigma, subsample_n, bimanual):
    rec = _episode(predictor, gate_config, scenario, max_steps, eps_succ, noise_sigma, subsample_n, bimanual)
    if gate_config is None:
        return rec
    # ground truth: would the policy have failed on its own?
    cf = _episode(predictor, None, scenario, max_steps, eps_succ, noise_sigma, subsample_n, bimanual)
    return TrialRecord(**{**rec.__dict__, "intervention_needed": not cf.success})


def run_trial(
    predictor,
    gate_config: GateConfig | None,
    scenario: Scenario,
    max_steps: int = DEFAULT_MAX_STEPS,
    eps_succ: float = DEFAULT_EPS_SUCC,
    noise_sigma: float = DEFAULT_NOISE,
    subsample_n: int | None = None,
) -> TrialRecord:
    """One single-arm episode. ``gate_config=None`` runs fully autonomously."""
    if scenario.kind is ScenarioKind.BIMANUAL:
        raise ValueError("bimanual scenarios run through run_bimanual_trial")
    return _run(predictor, gate_config, scenario, max_steps, eps_succ, noise_sigma, subsample_n, False)


def run_bimanual_trial(
    predictor,
    gate_config: GateConfig | None,
    scenario: Scenario,
    max_steps: int = DEFAULT_MAX_STEPS,
    eps_succ: float = DEFAULT_EPS_SUCC,
    noise_sigma: float = DEFAULT_NOISE,
    subsample_n: int | None = None,
) -> TrialRecord:
    """Left grasp replays its oracle actions (one per step, before sensing); the right grasp is gated."""
    if scenario.kind is not ScenarioKind.BIMANUAL:
        raise ValueError("run_bimanual_trial needs a Bimanual scenario")
    return _run(predictor, gate_config, scenario, max_steps, eps_succ, noise_sigma, subsample_n, True)


def run_scenario(predictor, gate_config, scenario: Scenario, **kw) -> TrialRecord:
    fn = run_bimanual_trial if scenario.kind is ScenarioKind.BIMANUAL else run_trial
    return fn(predictor, gate_config, scenario, **kw)


# ---------------------------------------------------------------- files

def write_trials_jsonl(records: Iterable[TrialRecord], path, append: bool = False) -> None:
    with Path(path).open("a" if append else "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_trials_jsonl(path) -> list[TrialRecord]:
    out = []
    with Path(path).open() as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", lineno) from None
            if not isinstance(d, dict) or d.get("schema_version") != SCHEMA_VERSION:
                raise ParseError(f"expected schema_version {SCHEMA_VERSION}", lineno)
            try:
                out.append(TrialRecord.from_dict(d))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"malformed trial record: {e}", lineno) from None
    return out


def write_trace_csv(trace: VarianceTrace, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "var_p", "var_r"])
        for t, p, r in trace.rows():
            w.writerow([t, repr(p), repr(r)])


def read_trace_csv(path) -> VarianceTrace:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    if not rows or [c.strip() for c in rows[0]] != ["t", "var_p", "var_r"]:
        raise ParseError("expected header 't,var_p,var_r'", 1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.append((int(row[0]), float(row[1]), float(row[2])))
        except (IndexError, ValueError):
            raise ParseError(f"malformed row {row!r}", lineno) from None
    try:
        return VarianceTrace.from_rows(out)
    except ValueError as e:
        raise ParseError(str(e), len(rows)) from None
