"""Point-cloud container, geometric preprocessing, distance metrics, and file IO.

All distances here are the one-sided squared variants used for candidate
selection and evaluation: Chamfer and Hausdorff run from the perturbed cloud
to the original and square the Euclidean distances.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

Points = Union["PointCloud", np.ndarray, Sequence[Sequence[float]]]

MIN_POINTS = 4


class InvalidCloudError(ValueError):
    """Raised for non-finite coordinates, bad shapes, or size mismatches."""


def as_points(obj: Points) -> np.ndarray:
    """Coerce a PointCloud or array-like to a float64 (m, 3) array."""
    if isinstance(obj, PointCloud):
        return obj.points
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidCloudError(f"expected (m, 3) coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidCloudError("coordinates must be finite")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of n >= 4 finite 3D points with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidCloudError(f"points must be (n, 3), got shape {pts.shape}")
        if pts.shape[0] < MIN_POINTS:
            raise InvalidCloudError(f"need at least {MIN_POINTS} points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InvalidCloudError("coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray, name: Optional[str] = None) -> "PointCloud":
        return PointCloud(points, label=self.label, name=self.name if name is None else name)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.points.tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and self.label == other.label
        )


@dataclass(frozen=True)
class DistanceReport:
    """All perturbation metrics between a source cloud and its perturbed twin."""

    d_hausdorff: float
    d_chamfer: float
    d_norm: float
    d_combined: float
    max_pointwise: float


def centroid(cloud: Points) -> np.ndarray:
    return as_points(cloud).mean(axis=0)


def normalize_unit_ball(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point sits at norm 1.

    A cloud whose points all coincide is only centered.
    """
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1).max())
    if radius > 0.0:
        centered = centered / radius
    return cloud.with_points(centered)


def d_norm(source: Points, adv: Points) -> float:
    """Frobenius norm of the index-aligned displacement between two clouds."""
    s = as_points(source)
    a = as_points(adv)
    if s.shape != a.shape:
        raise InvalidCloudError(f"size mismatch: {s.shape} vs {a.shape}")
    return float(np.linalg.norm(a - s))


def _nearest_sq_dists(source: np.ndarray, adv: np.ndarray) -> np.ndarray:
    # Squared distance from each adv point to its nearest source point.
    diff = adv[:, None, :] - source[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)


def d_chamfer(source: Points, adv: Points) -> float:
    """Mean squared distance from each perturbed point to its nearest original point."""
    s, a = as_points(source), as_points(adv)
    if len(s) == 0 or len(a) == 0:
        raise InvalidCloudError("empty cloud")
    return float(_nearest_sq_dists(s, a).mean())


def d_hausdorff(source: Points, adv: Points) -> float:
    """Max squared distance from any perturbed point to its nearest original point."""
    s, a = as_points(source), as_points(adv)
    if len(s) == 0 or len(a) == 0:
        raise InvalidCloudError("empty cloud")
    return float(_nearest_sq_dists(s, a).max())


def combined_distance(
    source: Points, adv: Points, gamma1: float = 2.0, gamma2: float = 0.5
) -> DistanceReport:
    """Weighted sum of Chamfer, Hausdorff, and displacement-norm distances.

    ``max_pointwise`` carries the plain (non-squared) worst nearest-neighbor
    distance used by the per-point outlier cap during candidate selection.
    """
    if gamma1 < 0 or gamma2 < 0:
        raise ValueError("metric weights must be nonnegative")
    s, a = as_points(source), as_points(adv)
    if len(s) == 0 or len(a) == 0:
        raise InvalidCloudError("empty cloud")
    nearest_sq = _nearest_sq_dists(s, a)
    dc = float(nearest_sq.mean())
    dh = float(nearest_sq.max())
    dn = d_norm(s, a)
    return DistanceReport(
        d_hausdorff=dh,
        d_chamfer=dc,
        d_norm=dn,
        d_combined=dc + gamma1 * dh + gamma2 * dn,
        max_pointwise=float(np.sqrt(nearest_sq.max())),
    )


def knn_indices(cloud: Points, k: int) -> np.ndarray:
    """Indices of each point's k nearest neighbors (self excluded).

    Distance ties break toward the lower point index so repeated calls are
    reproducible. Exact all-pairs search; intended for n <= 4096.
    """
    pts = as_points(cloud)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the point count {n}")
    sq = np.einsum("ij,ij->i", pts, pts)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps the lower index first on exact ties
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def resample(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform subsample without replacement down to exactly n points."""
    if cloud.n == n:
        return cloud
    if cloud.n < n:
        raise InvalidCloudError(f"cannot upsample {cloud.n} points to {n} without repetition")
    keep = np.sort(rng.choice(cloud.n, size=n, replace=False))
    return cloud.with_points(cloud.points[keep])


# --- file IO ----------------------------------------------------------------
#
# PLY (ascii, vertex-only) and plain XYZ text. Coordinates are written with 17
# significant digits in positional decimal notation, which round-trips float64
# exactly.


def fmt17(x: float) -> str:
    return np.format_float_positional(x, precision=17, unique=False, fractional=False)


def write_xyz(cloud: Points, path: Union[str, Path]) -> None:
    pts = as_points(cloud)
    lines = [" ".join(fmt17(c) for c in p) for p in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path: Union[str, Path], label: Optional[int] = None) -> PointCloud:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidCloudError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return PointCloud(np.array(rows, dtype=np.float64), label=label, name=Path(path).stem)


def write_ply(cloud: Points, path: Union[str, Path]) -> None:
    pts = as_points(cloud)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [" ".join(fmt17(c) for c in p) for p in pts]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path: Union[str, Path], label: Optional[int] = None) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise InvalidCloudError(f"{path}: not a PLY file")
    n = None
    props = []
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise InvalidCloudError(f"{path}: only ascii PLY is supported")
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise InvalidCloudError(f"{path}: unsupported element {tok[1]!r}")
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[2])
        elif tok[0] == "end_header":
            break
    if n is None or props[:3] != ["x", "y", "z"]:
        raise InvalidCloudError(f"{path}: malformed PLY header")
    rows = []
    for line in lines[i : i + n]:
        parts = line.split()
        rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
    if len(rows) != n:
        raise InvalidCloudError(f"{path}: expected {n} vertices, found {len(rows)}")
    return PointCloud(np.array(rows, dtype=np.float64), label=label, name=Path(path).stem)


def read_cloud(path: Union[str, Path], label: Optional[int] = None) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path, label=label)
    return read_xyz(path, label=label)


def write_cloud(cloud: Points, path: Union[str, Path]) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(cloud, path)
    else:
        write_xyz(cloud, path)
