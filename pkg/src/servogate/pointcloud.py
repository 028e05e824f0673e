"""Point clouds: Chamfer distance, farthest-point subsampling, CSV/PLY I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadCount, EmptyCloud, ParseError


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("centroid of an empty cloud")
        return self.points.mean(axis=0)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=float))


def _points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def chamfer(a, b) -> float:
    """Average of the two directed mean nearest-neighbour distances (meters)."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def farthest_point_indices(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Indices chosen by farthest-point sampling; the start index is drawn from ``seed``."""
    m = len(points)
    if not 1 <= n <= m:
        raise BadCount(f"cannot sample {n} points from a cloud of {m}")
    start = int(np.random.default_rng(seed).integers(m))
    chosen = np.empty(n, dtype=int)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def downsample_farthest(cloud, n: int, seed: int) -> PointCloud:
    pts = _points(cloud)
    return PointCloud(pts[farthest_point_indices(pts, n, seed)])


def write_cloud(cloud, path, format: str = "csv") -> None:
    pts = _points(cloud)
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "z"])
            for p in pts:
                w.writerow([f"{v:.17g}" for v in p])
    elif format == "ply_ascii":
        lines = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(pts)}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
        lines += [" ".join(f"{v:.17g}" for v in p) for p in pts]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown cloud format {format!r}")


def read_cloud(path, format: str | None = None) -> PointCloud:
    path = Path(path)
    if format is None:
        format = "ply_ascii" if path.suffix.lower() == ".ply" else "csv"
    text = path.read_text()
    if format == "csv":
        return _parse_csv(text)
    if format == "ply_ascii":
        return _parse_ply(text)
    raise ValueError(f"unknown cloud format {format!r}")


def _parse_float(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite coordinate {tok!r}", line)
    return v


def _parse_csv(text: str) -> PointCloud:
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "z"]:
        raise ParseError("expected header 'x,y,z'", 1)
    pts = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", lineno)
        pts.append([_parse_float(c, lineno) for c in row])
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3))


def _parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    count = None
    props: list[str] = []
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise ParseError("only 'format ascii 1.0' is supported", i)
        elif tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex" or count is not None:
                raise ParseError("only a single 'element vertex N' is supported", i)
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"bad vertex count {tok[2]!r}", i) from None
        elif tok[0] == "property":
            if count is None or len(tok) != 3 or tok[1] not in ("float", "double", "float32", "float64"):
                raise ParseError(f"unsupported property line {raw.strip()!r}", i)
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i
            break
        else:
            raise ParseError(f"unexpected header line {raw.strip()!r}", i)
    if body_start is None:
        raise ParseError("missing 'end_header'", len(lines))
    if count is None:
        raise ParseError("missing 'element vertex'", body_start)
    if not {"x", "y", "z"} <= set(props):
        raise ParseError("vertex element must have x, y, z properties", body_start)
    cols = [props.index(c) for c in ("x", "y", "z")]
    pts = []
    lineno = body_start
    for raw in lines[body_start:]:
        lineno += 1
        if not raw.strip():
            continue
        if len(pts) == count:
            raise ParseError("more vertex rows than declared", lineno)
        tok = raw.split()
        if len(tok) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tok)}", lineno)
        vals = [_parse_float(t, lineno) for t in tok]
        pts.append([vals[c] for c in cols])
    if len(pts) != count:
        raise ParseError(f"declared {count} vertices, found {len(pts)}", lineno)
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3))
