"""Linear stand-ins for the shape-servo policy, ensembles of them, and MC dropout.

A member maps a fixed feature vector of (current cloud, goal cloud,
manipulation point) to a 6-dof action: translation in meters followed by an
axis-angle rotation vector in radians.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyCloud, ParseError, RankDeficient, TooFewMembers
from .pointcloud import PointCloud
from .se3 import EnsembleOutputs, RigidTransform, exp_so3

ACTION_DIM = 6
MAX_ROTATION_ANGLE = np.pi - 1e-6
FEATURE_NAMES = (
    ["dc_x", "dc_y", "dc_z"]
    + ["dext_x", "dext_y", "dext_z"]
    + [f"off_{a}*dc_{b}" for a in "xyz" for b in "xyz"]
    + ["dcov_xx", "dcov_yy", "dcov_zz", "dcov_xy", "dcov_xz", "dcov_yz"]
)
FEATURE_DIM = len(FEATURE_NAMES)
FEATURE_LENGTH = 0.05  # meters; turns the quadratic blocks into lengths
MODEL_MAGIC = "servogate-member"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ShapeServoInput:
    current_cloud: PointCloud
    goal_cloud: PointCloud
    manipulation_point: np.ndarray

    def __post_init__(self):
        for name in ("current_cloud", "goal_cloud"):
            c = getattr(self, name)
            if not isinstance(c, PointCloud):
                c = PointCloud(c)
                object.__setattr__(self, name, c)
            if len(c) == 0:
                raise EmptyCloud(f"{name} is empty")
        m = np.asarray(self.manipulation_point, dtype=float)
        if m.shape != (3,) or not np.all(np.isfinite(m)):
            raise ValueError("manipulation point must be a finite 3-vector")
        pts = self.current_cloud.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        # 10% of the largest extent on every axis, so flat clouds still admit their own points
        pad = 0.1 * float(np.max(hi - lo))
        if np.any(m < lo - pad - 1e-12) or np.any(m > hi + pad + 1e-12):
            raise ValueError("manipulation point lies outside the current cloud's inflated bounding box")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "manipulation_point", m)


@dataclass(frozen=True)
class SupervisionTuple:
    input: ShapeServoInput
    action: RigidTransform


def featurize(x: ShapeServoInput) -> np.ndarray:
    """Feature vector of length FEATURE_DIM (see FEATURE_NAMES), meters.

    Blocks: centroid displacement goal - current; change of the per-axis
    extent (max - min); outer product of the manipulation point's offset from
    the current centroid with the displacement; change of the covariance
    (upper triangle). The last two blocks carry m^2 and are divided by
    FEATURE_LENGTH so every feature is in meters and one ridge penalty fits
    all. Every block is a goal-minus-current difference, so a met goal maps
    to the zero vector up to sensing noise.
    """
    pc, pg = x.current_cloud.points, x.goal_cloud.points
    if len(pc) == 0 or len(pg) == 0:
        raise EmptyCloud("featurize needs non-empty clouds")
    cc, cg = pc.mean(axis=0), pg.mean(axis=0)
    dc = cg - cc
    dext = np.ptp(pg, axis=0) - np.ptp(pc, axis=0)
    off = x.manipulation_point - cc
    cross = np.outer(off, dc).ravel()
    dcov = np.cov(pg.T, bias=True) - np.cov(pc.T, bias=True)
    iu = ([0, 1, 2, 0, 0, 1], [0, 1, 2, 1, 2, 2])
    return np.concatenate([dc, dext, cross / FEATURE_LENGTH, dcov[iu] / FEATURE_LENGTH])


def action_to_params(a: RigidTransform) -> np.ndarray:
    return np.concatenate([a.translation, a.rotvec()])


def params_to_action(v) -> RigidTransform:
    v = np.asarray(v, dtype=float)
    w = v[3:6]
    angle = float(np.linalg.norm(w))
    if angle > MAX_ROTATION_ANGLE:
        w = w * (MAX_ROTATION_ANGLE / angle)
    return RigidTransform(exp_so3(w), v[:3])


@dataclass(frozen=True)
class MemberModel:
    """``weights`` is (ACTION_DIM, F); ``bias`` the action at a zero feature vector."""

    weights: np.ndarray
    bias: np.ndarray
    seed: int
    ridge_lambda: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2 or w.shape[0] != ACTION_DIM:
            raise ValueError(f"weights must be ({ACTION_DIM}, F), got {w.shape}")
        if b.shape != (ACTION_DIM,):
            raise ValueError(f"bias must have length {ACTION_DIM}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("weights must be finite")
        if not self.ridge_lambda > 0:
            raise ValueError("ridge_lambda must be > 0")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def predict_params(self, features) -> np.ndarray:
        return self.weights @ np.asarray(features, dtype=float) + self.bias

    def predict(self, x: ShapeServoInput) -> RigidTransform:
        return params_to_action(self.predict_params(featurize(x)))


def design_matrix(data: Sequence[SupervisionTuple]) -> tuple[np.ndarray, np.ndarray]:
    phi = np.stack([featurize(d.input) for d in data])
    y = np.stack([action_to_params(d.action) for d in data])
    return phi, y


def fit_member_arrays(
    phi: np.ndarray, y: np.ndarray, seed: int, ridge_lambda: float, fit_intercept: bool = False
) -> MemberModel:
    """Ridge fit on a seeded bootstrap resample of the rows of (phi, y).

    With ``fit_intercept`` an unpenalized bias is fitted; by default the bias
    is zero so that a zero feature vector (goal met) predicts no motion.
    """
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float)
    n, f = phi.shape
    if n < f:
        raise RankDeficient(f"need at least {f} samples to fit {f} features, got {n}")
    if ridge_lambda <= 0:
        raise ValueError("ridge_lambda must be > 0")
    idx = np.random.default_rng(seed).integers(0, n, size=n)
    xb = phi[idx]
    yb = y[idx]
    penalty = np.full(f, ridge_lambda)
    if fit_intercept:
        xb = np.hstack([xb, np.ones((n, 1))])
        penalty = np.append(penalty, 0.0)
    gram = xb.T @ xb + np.diag(penalty)
    # normal equations on column-scaled features keeps the condition number honest
    scale = np.sqrt(np.diag(gram))
    if np.any(scale == 0):
        raise RankDeficient("a feature column is identically zero and unregularized")
    gram_s = gram / np.outer(scale, scale)
    if np.linalg.cond(gram_s) > 1e12:
        raise RankDeficient("normal equations are singular beyond ridge regularization")
    coef = np.linalg.solve(gram_s, (xb.T @ yb) / scale[:, None]) / scale[:, None]
    bias = coef[-1] if fit_intercept else np.zeros(y.shape[1])
    return MemberModel(coef[:f].T, bias, int(seed), float(ridge_lambda))


def fit_member(
    data: Sequence[SupervisionTuple], seed: int, ridge_lambda: float, fit_intercept: bool = False
) -> MemberModel:
    phi, y = design_matrix(data)
    return fit_member_arrays(phi, y, seed, ridge_lambda, fit_intercept)


@dataclass(frozen=True)
class EnsemblePredictor:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise TooFewMembers(f"an ensemble needs at least 2 members, got {len(members)}")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class StochasticPredictor:
    base: MemberModel
    dropout_rate: float = 0.5
    sample_count: int = 100

    def __post_init__(self):
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie strictly between 0 and 1")
        if self.sample_count < 2:
            raise TooFewMembers("need at least 2 dropout samples")


def fit_ensemble(
    data: Sequence[SupervisionTuple], n_members: int = 5, seed: int = 0, ridge_lambda: float = 1e-8
) -> EnsemblePredictor:
    if n_members < 2:
        raise TooFewMembers(f"an ensemble needs at least 2 members, got {n_members}")
    phi, y = design_matrix(data)
    return EnsemblePredictor(
        tuple(fit_member_arrays(phi, y, seed + k, ridge_lambda) for k in range(n_members))
    )


def _outputs_from_params(params: np.ndarray) -> EnsembleOutputs:
    return EnsembleOutputs.from_transforms(params_to_action(p) for p in params)


def ensemble_params(ens: EnsemblePredictor, features) -> np.ndarray:
    return np.stack([m.predict_params(features) for m in ens.members])


def predict_ensemble(ens: EnsemblePredictor, x: ShapeServoInput) -> EnsembleOutputs:
    phi = featurize(x)
    return _outputs_from_params(ensemble_params(ens, phi))


def dropout_params(sp: StochasticPredictor, features, rng_seed: int) -> np.ndarray:
    """K masked forward passes: each feature column kept with prob 1-rate, survivors scaled."""
    phi = np.asarray(features, dtype=float)
    rng = np.random.default_rng(rng_seed)
    keep = rng.random((sp.sample_count, phi.shape[0])) >= sp.dropout_rate
    mask = keep / (1.0 - sp.dropout_rate)
    return (mask * phi) @ sp.base.weights.T + sp.base.bias


def predict_stochastic(sp: StochasticPredictor, x: ShapeServoInput, rng_seed: int) -> EnsembleOutputs:
    return _outputs_from_params(dropout_params(sp, featurize(x), rng_seed))


def dropout_translation_variance(sp: StochasticPredictor, features) -> float:
    """Closed-form expected squared spread of the translation under the dropout mask.

    Each mask entry has variance rate/(1-rate) and masks are independent
    across features, so Var = sum_j ||W_t[:, j] phi_j||^2 * rate/(1-rate).
    """
    phi = np.asarray(features, dtype=float)
    cols = sp.base.weights[:3] * phi
    r = sp.dropout_rate
    return float(np.sum(cols**2) * r / (1.0 - r))


def save_member(model: MemberModel, path) -> None:
    """Text format: magic+version line, 'F A lambda seed' line, then A rows of F weights and the bias row."""
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"{model.feature_dim} {ACTION_DIM} {model.ridge_lambda!r} {model.seed}",
    ]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in model.weights]
    lines.append(" ".join(f"{v:.17g}" for v in model.bias))
    Path(path).write_text("\n".join(lines) + "\n")


def load_member(path) -> MemberModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != [MODEL_MAGIC, str(MODEL_VERSION)]:
        raise ParseError(f"not a {MODEL_MAGIC} v{MODEL_VERSION} file", 1)
    try:
        f, a, lam, seed = lines[1].split()
        f, a, lam, seed = int(f), int(a), float(lam), int(seed)
    except (IndexError, ValueError):
        raise ParseError("header must be 'F A lambda seed'", 2) from None
    if a != ACTION_DIM:
        raise ParseError(f"action dimension {a} != {ACTION_DIM}", 2)
    if len(lines) < 2 + a + 1:
        raise ParseError("truncated weight block", len(lines))
    rows = []
    for i in range(a + 1):
        lineno = 3 + i
        try:
            row = [float(v) for v in lines[2 + i].split()]
        except ValueError:
            raise ParseError("non-numeric weight", lineno) from None
        want = f if i < a else a
        if len(row) != want:
            raise ParseError(f"expected {want} values, got {len(row)}", lineno)
        rows.append(row)
    return MemberModel(np.array(rows[:a]), np.array(rows[a]), seed, lam)
