"""Variance-slope uncertainty and the proceed / request-intervention decision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import MissingStep

REFERENCE_TAU_P = -0.310
REFERENCE_TAU_R = -0.487


class Component(str, Enum):
    POSITION = "position"
    ROTATION = "rotation"


class Mode(str, Enum):
    POSITION = "position"
    ROTATION = "rotation"
    BOTH = "both"

    def components(self) -> tuple[Component, ...]:
        if self is Mode.POSITION:
            return (Component.POSITION,)
        if self is Mode.ROTATION:
            return (Component.ROTATION,)
        return (Component.POSITION, Component.ROTATION)


class Action(str, Enum):
    PROCEED = "proceed"
    REQUEST_INTERVENTION = "request_intervention"


@dataclass(frozen=True)
class VarianceTrace:
    """Per-step (t, var_p, var_r); steps strictly increasing from 0."""

    steps: tuple[int, ...] = ()
    var_p: tuple[float, ...] = ()
    var_r: tuple[float, ...] = ()

    def __post_init__(self):
        steps = tuple(int(t) for t in self.steps)
        vp = tuple(float(v) for v in self.var_p)
        vr = tuple(float(v) for v in self.var_r)
        if not len(steps) == len(vp) == len(vr):
            raise ValueError("steps, var_p and var_r must have equal length")
        if steps and steps[0] != 0:
            raise ValueError("a variance trace starts at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("step indices must be strictly increasing")
        for p, r in zip(vp, vr):
            if not (math.isfinite(p) and p >= 0.0):
                raise ValueError(f"positional variance must be finite and >= 0, got {p}")
            if not (0.0 <= r <= math.pi):
                raise ValueError(f"rotational variance must lie in [0, pi], got {r}")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "var_p", vp)
        object.__setattr__(self, "var_r", vr)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, float, float]]) -> "VarianceTrace":
        rows = list(rows)
        return cls(tuple(r[0] for r in rows), tuple(r[1] for r in rows), tuple(r[2] for r in rows))

    @classmethod
    def from_series(cls, var_p, var_r) -> "VarianceTrace":
        return cls(tuple(range(len(var_p))), tuple(var_p), tuple(var_r))

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.steps, self.var_p, self.var_r))

    def __len__(self) -> int:
        return len(self.steps)

    def index(self, t: int) -> int:
        try:
            return self.steps.index(t)
        except ValueError:
            raise MissingStep(f"trace has no step {t}") from None


@dataclass(frozen=True)
class UncertaintyVector:
    d_var_p: float
    d_var_r: float

    def slope(self, component: Component) -> float:
        return self.d_var_p if component is Component.POSITION else self.d_var_r


@dataclass(frozen=True)
class GateConfig:
    tau_p: float = REFERENCE_TAU_P
    tau_r: float = REFERENCE_TAU_R
    mode: Mode = Mode.BOTH
    decision_step: int = 1
    monitor_continuously: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if int(self.decision_step) < 1:
            raise ValueError("decision_step must be >= 1")
        for tau in (self.tau_p, self.tau_r):
            if math.isnan(tau):
                raise ValueError("thresholds must not be NaN")

    def threshold(self, component: Component) -> float:
        return self.tau_p if component is Component.POSITION else self.tau_r


@dataclass(frozen=True)
class GateDecision:
    action: Action
    at_step: int
    u: UncertaintyVector
    triggered_by: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if bool(self.triggered_by) != (self.action is Action.REQUEST_INTERVENTION):
            raise ValueError("triggered_by must be non-empty exactly when intervention is requested")

    @property
    def intervene(self) -> bool:
        return self.action is Action.REQUEST_INTERVENTION


def uncertainty_vector(trace: VarianceTrace, t: int) -> UncertaintyVector:
    if t < 1:
        raise MissingStep(f"slope needs t >= 1, got {t}")
    i, j = trace.index(t), trace.index(t - 1)
    return UncertaintyVector(trace.var_p[i] - trace.var_p[j], trace.var_r[i] - trace.var_r[j])


def violations(u: UncertaintyVector, config: GateConfig) -> frozenset:
    """Components whose slope exceeds its threshold (ties proceed)."""
    return frozenset(c for c in config.mode.components() if u.slope(c) > config.threshold(c))


def decide_at(trace: VarianceTrace, t: int, config: GateConfig) -> GateDecision:
    u = uncertainty_vector(trace, t)
    trig = violations(u, config)
    action = Action.REQUEST_INTERVENTION if trig else Action.PROCEED
    return GateDecision(action, t, u, trig)


def evaluate_gate(trace: VarianceTrace, config: GateConfig) -> GateDecision:
    if not config.monitor_continuously:
        return decide_at(trace, config.decision_step, config)
    last = None
    for t in trace.steps:
        if t < 1:
            continue
        last = decide_at(trace, t, config)
        if last.intervene:
            return last
    if last is None:
        raise MissingStep("continuous monitoring needs at least steps 0 and 1")
    return last
