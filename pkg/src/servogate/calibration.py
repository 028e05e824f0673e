"""Confusion accounting, threshold sweeps and selection, and KL separation.

Positives are trials where an intervention is needed (the autonomous run
would fail). The gate requests an intervention when a slope is strictly
greater than its threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateDistribution, EmptyInput, ParseError, UndefinedRate
from .gate import Component

TIE_TOL = 1e-12


@dataclass(frozen=True)
class TrialLabel:
    intervention_needed: bool
    intervention_requested: bool


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


class Metrics(NamedTuple):
    accuracy: float
    fpr: float
    fnr: float


@dataclass(frozen=True)
class MetaObjectiveConfig:
    """``w`` is P(failure | FP): the cost of a needless intervention relative to a miss."""

    w: float

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {self.w}")


@dataclass(frozen=True)
class SlopeSample:
    slope_p: float
    slope_r: float
    intervention_needed: bool

    def __post_init__(self):
        if not (math.isfinite(self.slope_p) and math.isfinite(self.slope_r)):
            raise ValueError("slopes must be finite")

    def slope(self, component: Component) -> float:
        return self.slope_p if Component(component) is Component.POSITION else self.slope_r


class SweepPoint(NamedTuple):
    threshold: float
    fpr: float
    fnr: float


def confusion(labels: Iterable[TrialLabel]) -> ConfusionMatrix:
    labels = list(labels)
    if not labels:
        raise EmptyInput("no trial labels")
    tp = fp = fn = tn = 0
    for lab in labels:
        if lab.intervention_needed:
            if lab.intervention_requested:
                tp += 1
            else:
                fn += 1
        elif lab.intervention_requested:
            fp += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedRate("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


def false_positive_rate(cm: ConfusionMatrix) -> float:
    if cm.fp + cm.tn == 0:
        raise UndefinedRate("false positive rate undefined: no trials where intervention was not needed")
    return cm.fp / (cm.fp + cm.tn)


def false_negative_rate(cm: ConfusionMatrix) -> float:
    if cm.fn + cm.tp == 0:
        raise UndefinedRate("false negative rate undefined: no trials where intervention was needed")
    return cm.fn / (cm.fn + cm.tp)


def metrics(cm: ConfusionMatrix) -> Metrics:
    return Metrics(accuracy(cm), false_positive_rate(cm), false_negative_rate(cm))


def _confusion_at(samples: Sequence[SlopeSample], component: Component, tau: float) -> ConfusionMatrix:
    return confusion(
        TrialLabel(s.intervention_needed, s.slope(component) > tau) for s in samples
    )


def default_grid(samples: Sequence[SlopeSample], component: Component) -> list[float]:
    """Midpoints between distinct sorted slopes plus +-inf.

    The objective only changes where tau crosses a sample, so this grid
    reaches every achievable request set.
    """
    vals = np.unique([s.slope(component) for s in samples])
    mids = ((vals[:-1] + vals[1:]) / 2.0).tolist()
    return [-math.inf] + mids + [math.inf]


def sweep_thresholds(
    samples: Sequence[SlopeSample], component, grid: Iterable[float]
) -> list[SweepPoint]:
    samples = list(samples)
    if not samples:
        raise EmptyInput("no calibration samples")
    component = Component(component)
    out = []
    for tau in sorted(float(t) for t in grid):
        cm = _confusion_at(samples, component, tau)
        out.append(SweepPoint(tau, false_positive_rate(cm), false_negative_rate(cm)))
    return out


def meta_objective(cm: ConfusionMatrix, w: float) -> float:
    return cm.fn + w * cm.fp


def calibrate(
    samples: Sequence[SlopeSample],
    component,
    cfg: MetaObjectiveConfig,
    grid: Iterable[float] | None = None,
) -> tuple[float, float]:
    """Threshold minimizing FN + w*FP (in counts); ties go to the largest threshold."""
    samples = list(samples)
    if not samples:
        raise EmptyInput("no calibration samples")
    component = Component(component)
    grid = default_grid(samples, component) if grid is None else [float(t) for t in grid]
    if not grid:
        raise EmptyInput("empty threshold grid")
    best_tau, best_obj = None, math.inf
    for tau in sorted(grid, reverse=True):
        obj = meta_objective(_confusion_at(samples, component, tau), cfg.w)
        if obj < best_obj - TIE_TOL:
            best_tau, best_obj = tau, obj
    return best_tau, best_obj


def read_slope_samples(path) -> list[SlopeSample]:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    header = ["slope_p", "slope_r", "intervention_needed"]
    if not rows or [c.strip() for c in rows[0]] != header:
        raise ParseError("expected header 'slope_p,slope_r,intervention_needed'", 1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3 or row[2].strip() not in ("0", "1"):
            raise ParseError(f"malformed row {row!r}", lineno)
        try:
            out.append(SlopeSample(float(row[0]), float(row[1]), row[2].strip() == "1"))
        except ValueError as e:
            raise ParseError(str(e), lineno) from None
    return out


def write_slope_samples(samples: Iterable[SlopeSample], path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slope_p", "slope_r", "intervention_needed"])
        for s in samples:
            w.writerow([repr(s.slope_p), repr(s.slope_r), int(s.intervention_needed)])


@dataclass(frozen=True)
class DistributionSummary:
    """Samples plus their moment-matched Gaussian (population variance)."""

    samples: tuple
    fitted_mean: float
    fitted_variance: float

    @classmethod
    def fit(cls, samples) -> "DistributionSummary":
        xs = np.asarray(samples, dtype=float).ravel()
        if xs.size == 0:
            raise EmptyInput("cannot fit a distribution to no samples")
        mean = float(xs.mean())
        var = float(np.mean((xs - mean) ** 2))
        return cls(tuple(xs.tolist()), mean, var)


def kl_divergence_gaussian(p: DistributionSummary, q: DistributionSummary) -> float:
    """KL(p || q) between the two fitted univariate Gaussians."""
    if p.fitted_variance <= 0.0 or q.fitted_variance <= 0.0:
        raise DegenerateDistribution("KL needs both fitted variances to be positive")
    vp, vq = p.fitted_variance, q.fitted_variance
    dm = p.fitted_mean - q.fitted_mean
    return 0.5 * math.log(vq / vp) + (vp + dm * dm) / (2.0 * vq) - 0.5


def kl_divergence_histogram(
    p: DistributionSummary, q: DistributionSummary, bins: int = 20, eps: float = 1e-9
) -> float:
    """Discrete KL(p || q) over shared equal-width bins with additive smoothing."""
    xp, xq = np.asarray(p.samples, dtype=float), np.asarray(q.samples, dtype=float)
    if xp.size == 0 or xq.size == 0:
        raise DegenerateDistribution("histogram KL needs samples on both sides")
    lo = min(xp.min(), xq.min())
    hi = max(xp.max(), xq.max())
    if hi <= lo:
        raise DegenerateDistribution("all samples are identical")
    edges = np.linspace(lo, hi, bins + 1)
    hp = np.histogram(xp, edges)[0] + eps
    hq = np.histogram(xq, edges)[0] + eps
    hp, hq = hp / hp.sum(), hq / hq.sum()
    return float(np.sum(hp * np.log(hp / hq)))
