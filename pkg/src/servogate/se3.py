"""Rigid transforms and ensemble aggregation on SE(3).

Rotations are plain 3x3 numpy arrays that have passed :func:`validate_rotation`
(returned read-only). Translations are length-3 arrays in meters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateMean, EmptyInput, NotARotation, TooFewMembers

ROTATION_TOL = 1e-6
DEGENERACY_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def rotation_deviation(m: np.ndarray) -> float:
    """Largest of ||m^T m - I||_F and |det(m) - 1|."""
    ortho = np.linalg.norm(m.T @ m - np.eye(3))
    return float(max(ortho, abs(np.linalg.det(m) - 1.0)))


def validate_rotation(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise NotARotation(float("inf"), f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotARotation(float("inf"), "matrix has non-finite entries")
    dev = rotation_deviation(m)
    if dev > ROTATION_TOL:
        raise NotARotation(dev)
    return _frozen(m)


def _validate_rotations(rotations) -> np.ndarray:
    rs = np.asarray(rotations, dtype=float)
    if rs.ndim == 2:
        rs = rs[None]
    if rs.shape[0] == 0:
        raise EmptyInput("no rotations given")
    if rs.shape[1:] != (3, 3):
        raise NotARotation(float("inf"), f"expected (N, 3, 3) rotations, got {rs.shape}")
    if not np.all(np.isfinite(rs)):
        raise NotARotation(float("inf"), "rotation has non-finite entries")
    gram = np.einsum("nji,njk->nik", rs, rs) - np.eye(3)
    dev = np.maximum(np.linalg.norm(gram, axis=(1, 2)), np.abs(np.linalg.det(rs) - 1.0))
    if np.any(dev > ROTATION_TOL):
        raise NotARotation(float(dev.max()))
    return rs


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(rotvec) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector (radians) to rotation matrix."""
    w = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)


def log_so3(r) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    r = np.asarray(r, dtype=float)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(c))
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-4:
        # sin(theta) ~ 0: recover the axis from the symmetric part instead
        b = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / np.sqrt(b[i, i])
        if axis @ vee < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def rot_x(a: float) -> np.ndarray:
    return exp_so3([a, 0.0, 0.0])


def rot_y(a: float) -> np.ndarray:
    return exp_so3([0.0, a, 0.0])


def rot_z(a: float) -> np.ndarray:
    return exp_so3([0.0, 0.0, a])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", validate_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError(f"translation must be a finite 3-vector, got {self.translation!r}")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_so3(rotvec), translation)

    @classmethod
    def from_matrix(cls, h) -> "RigidTransform":
        h = np.asarray(h, dtype=float)
        if h.shape != (4, 4) or not np.allclose(h[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("expected a 4x4 homogeneous transform")
        return cls(h[:3, :3], h[:3, 3])

    def matrix(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.rotation
        h[:3, 3] = self.translation
        return h

    def rotvec(self) -> np.ndarray:
        return log_so3(self.rotation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True)
class EnsembleOutputs:
    """N member predictions stored column-wise: rotations (N,3,3), translations (N,3)."""

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        rs = _validate_rotations(self.rotations)
        ts = np.asarray(self.translations, dtype=float)
        if ts.ndim != 2 or ts.shape != (rs.shape[0], 3):
            raise ValueError(f"translations must be ({rs.shape[0]}, 3), got {ts.shape}")
        if not np.all(np.isfinite(ts)):
            raise ValueError("translations must be finite")
        if rs.shape[0] < 2:
            raise TooFewMembers(f"an ensemble needs at least 2 members, got {rs.shape[0]}")
        object.__setattr__(self, "rotations", _frozen(rs))
        object.__setattr__(self, "translations", _frozen(ts))

    @classmethod
    def from_transforms(cls, members: Iterable[RigidTransform]) -> "EnsembleOutputs":
        members = list(members)
        if len(members) < 2:
            raise TooFewMembers(f"an ensemble needs at least 2 members, got {len(members)}")
        return cls(
            np.stack([m.rotation for m in members]), np.stack([m.translation for m in members])
        )

    def __len__(self) -> int:
        return self.rotations.shape[0]

    @property
    def members(self) -> list[RigidTransform]:
        return [RigidTransform(r, t) for r, t in zip(self.rotations, self.translations)]

    def permuted(self, order: Sequence[int]) -> "EnsembleOutputs":
        order = np.asarray(order)
        return EnsembleOutputs(self.rotations[order], self.translations[order])


def mean_position(positions) -> np.ndarray:
    ps = np.asarray(positions, dtype=float)
    if ps.size == 0:
        raise EmptyInput("no positions given")
    ps = ps.reshape(-1, 3)
    return ps.sum(axis=0) / ps.shape[0]


def chordal_mean_rotation(rotations) -> np.ndarray:
    """Proper rotation nearest (Frobenius) to the arithmetic mean of ``rotations``.

    The projection U diag(1, 1, det(UV')) V' stays proper when det(S) < 0.
    Raises DegenerateMean when the nearest rotation is not unique, e.g. for
    antipodal pairs.
    """
    rs = _validate_rotations(rotations)
    s = rs.sum(axis=0) / rs.shape[0]
    u, d, vt = np.linalg.svd(s)
    sign = 1.0 if np.linalg.det(u @ vt) > 0 else -1.0
    # the objective d1 + d2 + sign*d3 has a flat direction iff d2 + sign*d3 == 0
    if d[1] + sign * d[2] <= DEGENERACY_TOL:
        raise DegenerateMean(
            f"mean rotation is not unique (singular values {d[0]:.3g}, {d[1]:.3g}, {d[2]:.3g})"
        )
    r = u @ np.diag([1.0, 1.0, sign]) @ vt
    return _frozen(r)


def geodesic_distance(a, b) -> float:
    """Rotation angle of a^T b, in [0, pi]."""
    a = validate_rotation(a)
    b = validate_rotation(b)
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _geodesic_to(rs: np.ndarray, r: np.ndarray) -> np.ndarray:
    # trace(R_i^T R) = sum_jk R_i[j,k] R[j,k]
    c = (np.einsum("njk,jk->n", rs, r) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def position_variance(outputs: EnsembleOutputs) -> float:
    ts = outputs.translations
    if ts.shape[0] < 2:
        raise TooFewMembers("position variance needs at least 2 members")
    diff = ts - mean_position(ts)
    return float(np.einsum("ij,ij->", diff, diff) / ts.shape[0])


def rotation_variance(outputs: EnsembleOutputs) -> float:
    """Mean geodesic distance (radians) of the members to their chordal mean."""
    rs = outputs.rotations
    if rs.shape[0] < 2:
        raise TooFewMembers("rotation variance needs at least 2 members")
    mean = chordal_mean_rotation(rs)
    return float(_geodesic_to(rs, mean).sum() / rs.shape[0])


def aggregate(outputs: EnsembleOutputs) -> tuple[RigidTransform, float, float]:
    """Mean action plus positional and rotational variance, from one pass."""
    if len(outputs) < 2:
        raise TooFewMembers("aggregation needs at least 2 members")
    rs, ts = outputs.rotations, outputs.translations
    p = mean_position(ts)
    r = chordal_mean_rotation(rs)
    diff = ts - p
    var_p = float(np.einsum("ij,ij->", diff, diff) / ts.shape[0])
    var_r = float(_geodesic_to(rs, r).sum() / rs.shape[0])
    return RigidTransform(r, p), var_p, var_r
