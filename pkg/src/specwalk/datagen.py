"""Synthetic labeled shape datasets for desk-scale experiments.

Six analytic surface families (sphere, box, cylinder, torus, cone, plane
patch) sampled uniformly by area, jittered, optionally rotated, and scaled
into the unit ball. Generation is fully determined by the SyntheticDatasetSpec
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cloud import PointCloud, normalize_unit_ball, read_cloud, write_xyz

SHAPES = ("sphere", "box", "cylinder", "torus", "cone", "plane")


@dataclass
class SyntheticDatasetSpec:
    classes: Sequence[str] = SHAPES
    n_points: int = 256
    instances: int = 25
    jitter: float = 0.02
    rotate: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if self.n_points < 64:
            raise ValueError("need n_points >= 64 for meaningful spectra")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shapes {unknown}; available: {SHAPES}")


def _sample_sphere(n: int, rng) -> np.ndarray:
    # antithetic pairs keep the sample centroid at exactly zero for even n,
    # so unit-ball normalization leaves every point at norm 1
    half = (n + 1) // 2
    v = rng.standard_normal((half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    paired = np.empty((2 * half, 3))
    paired[0::2] = v
    paired[1::2] = -v
    return paired[:n]


def _sample_box(n: int, rng) -> np.ndarray:
    half = np.array([0.9, 0.55, 0.3])
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)  # two faces per axis
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face // 2
    side = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def _sample_cylinder(n: int, rng) -> np.ndarray:
    r, h = 0.45, 1.6
    lateral = 2 * np.pi * r * h
    cap = np.pi * r * r
    which = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    on_side = which == 0
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-h / 2, h / 2, size=on_side.sum())
    on_cap = ~on_side
    rad = r * np.sqrt(rng.uniform(0, 1, size=on_cap.sum()))
    pts[on_cap, 0] = rad * np.cos(theta[on_cap])
    pts[on_cap, 1] = rad * np.sin(theta[on_cap])
    pts[on_cap, 2] = np.where(which[on_cap] == 1, h / 2, -h / 2)
    return pts


def _sample_torus(n: int, rng) -> np.ndarray:
    big, small = 0.7, 0.25
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled)
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to big + small*cos(v): rejection-sample v
        keep = rng.uniform(0, 1, size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        take = min(len(u), n - filled)
        ring = big + small * np.cos(v[:take])
        pts[filled : filled + take, 0] = ring * np.cos(u[:take])
        pts[filled : filled + take, 1] = ring * np.sin(u[:take])
        pts[filled : filled + take, 2] = small * np.sin(v[:take])
        filled += take
    return pts


def _sample_cone(n: int, rng) -> np.ndarray:
    r, h = 0.7, 1.4
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.uniform(0, 1, size=n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    s = np.sqrt(rng.uniform(0, 1, size=n))  # area-uniform along the slant
    side_rad = s * r
    pts[on_side, 0] = (side_rad * np.cos(theta))[on_side]
    pts[on_side, 1] = (side_rad * np.sin(theta))[on_side]
    pts[on_side, 2] = (h / 2 - s * h)[on_side]
    base_rad = r * np.sqrt(rng.uniform(0, 1, size=n))
    off = ~on_side
    pts[off, 0] = (base_rad * np.cos(theta))[off]
    pts[off, 1] = (base_rad * np.sin(theta))[off]
    pts[off, 2] = -h / 2
    return pts


def _sample_plane(n: int, rng) -> np.ndarray:
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
    "plane": _sample_plane,
}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform SO(3) rotation via normalized quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def generate_cloud(shape: str, n_points: int, jitter: float, rotate: bool,
                   rng: np.random.Generator, label: int, name: str) -> PointCloud:
    pts = _SAMPLERS[shape](n_points, rng)
    if jitter > 0:
        pts = pts + rng.standard_normal(pts.shape) * jitter
    if rotate:
        pts = pts @ random_rotation(rng).T
    return normalize_unit_ball(PointCloud(pts, label=label, name=name))


def generate_dataset(
    spec: SyntheticDatasetSpec,
) -> Tuple[List[PointCloud], List[PointCloud]]:
    """Labeled train/test clouds, split 80/20 per class, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for label, shape in enumerate(spec.classes):
        n_train = int(round(spec.instances * 0.8))
        for idx in range(spec.instances):
            cloud = generate_cloud(
                shape, spec.n_points, spec.jitter, spec.rotate, rng, label,
                name=f"{shape}_{idx:03d}",
            )
            (train if idx < n_train else test).append(cloud)
    return train, test


# --- mesh ingestion --------------------------------------------------------------


def read_off(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Vertices and triangulated faces of an OFF mesh (fan triangulation for
    polygons with more than three vertices)."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise ValueError(f"{path}: not an OFF file")
    # some exporters glue the counts onto the OFF keyword line
    rest = tokens[1:] if tokens[0] == "OFF" else [tokens[0][3:]] + tokens[1:]
    n_vert, n_face = int(rest[0]), int(rest[1])
    cursor = 3
    vertices = np.array(rest[cursor : cursor + 3 * n_vert], dtype=np.float64).reshape(n_vert, 3)
    cursor += 3 * n_vert
    faces = []
    for _ in range(n_face):
        count = int(rest[cursor])
        idx = [int(v) for v in rest[cursor + 1 : cursor + 1 + count]]
        cursor += 1 + count
        for i in range(1, count - 1):
            faces.append([idx[0], idx[i], idx[i + 1]])
    return vertices, np.array(faces, dtype=np.intp)


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Area-uniform surface samples of a triangle mesh."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no surface area")
    chosen = rng.choice(len(faces), size=n, p=areas / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    return (a[chosen] + u[:, None] * (b[chosen] - a[chosen])
            + v[:, None] * (c[chosen] - a[chosen]))


def load_off_cloud(path: Union[str, Path], n_points: int = 1024,
                   seed: int = 0, label: Optional[int] = None) -> PointCloud:
    """Uniform surface sample of an OFF mesh, scaled into the unit ball."""
    vertices, faces = read_off(path)
    pts = sample_mesh_surface(vertices, faces, n_points, np.random.default_rng(seed))
    return normalize_unit_ball(PointCloud(pts, label=label, name=Path(path).stem))


# --- on-disk dataset layout ----------------------------------------------------
#
# <dir>/manifest.json plus one XYZ file per cloud under <dir>/train/ and
# <dir>/test/.


def save_dataset(train: Sequence[PointCloud], test: Sequence[PointCloud],
                 directory: Union[str, Path], spec: Optional[SyntheticDatasetSpec] = None) -> None:
    directory = Path(directory)
    manifest: Dict = {"classes": list(spec.classes) if spec else [], "splits": {}}
    if spec is not None:
        manifest["spec"] = {
            "n_points": spec.n_points, "instances": spec.instances,
            "jitter": spec.jitter, "rotate": spec.rotate, "seed": spec.seed,
        }
    for split, clouds in (("train", train), ("test", test)):
        (directory / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for cloud in clouds:
            fname = f"{cloud.name}.xyz"
            write_xyz(cloud, directory / split / fname)
            entries.append({"file": fname, "label": cloud.label, "name": cloud.name})
        manifest["splits"][split] = entries
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory: Union[str, Path]) -> Tuple[List[PointCloud], List[PointCloud], Dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for split in ("train", "test"):
        clouds = []
        for entry in manifest["splits"][split]:
            cloud = read_cloud(directory / split / entry["file"], label=entry["label"])
            clouds.append(PointCloud(cloud.points, label=entry["label"], name=entry["name"]))
        out[split] = clouds
    return out["train"], out["test"], manifest
