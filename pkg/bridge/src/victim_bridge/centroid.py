"""Self-contained nearest-centroid point-cloud classifier.

This mirrors the attack engine's built-in desk-scale victim bit for bit:
identical feature arithmetic and identical training order produce identical
float64 centroids, so a bridge serving this classifier is indistinguishable
from the in-process one. The model source is either a dataset directory
(manifest.json plus XYZ files, trained at load time) or a JSON centroid file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Union

import numpy as np

HIST_BINS = 8
FEATURE_DIM = 13


def cloud_features(points: np.ndarray, use_aspect: bool = True) -> np.ndarray:
    """13-dim descriptor: covariance eigenvalues, radial histogram in the unit
    ball, bounding-box aspect ratios."""
    pts = points - points.mean(axis=0)
    sq_norms = np.einsum("ij,ij->i", pts, pts)
    radius = np.sqrt(sq_norms.max())
    if radius > 0.0:
        pts = pts / radius
        sq_norms = sq_norms / (radius * radius)
    n = len(pts)
    cov = (pts.T @ pts) / n
    eigvals = np.linalg.eigvalsh(cov)
    width = (1.0 + 1e-9) / HIST_BINS
    bins = np.minimum((np.sqrt(sq_norms) / width).astype(np.intp), HIST_BINS - 1)
    hist = np.bincount(bins, minlength=HIST_BINS) / n
    if use_aspect:
        extents = np.sort(pts.max(axis=0) - pts.min(axis=0))[::-1]
        if extents[0] <= 0.0:
            aspect = np.array([1.0, 1.0])
        else:
            aspect = extents[1:] / extents[0]
    else:
        aspect = np.zeros(2)
    return np.concatenate([eigvals, hist, aspect])


class CentroidClassifier:
    def __init__(self, centroids: Dict[int, np.ndarray], use_aspect: bool = True):
        self.class_ids = sorted(centroids)
        self.centroids = np.stack([np.asarray(centroids[c], dtype=np.float64)
                                   for c in self.class_ids])
        self.use_aspect = use_aspect

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def classify(self, points: np.ndarray) -> int:
        feats = cloud_features(points, use_aspect=self.use_aspect)
        dists = np.linalg.norm(self.centroids - feats, axis=1)
        return self.class_ids[int(np.argmin(dists))]


def read_xyz(path: Union[str, Path]) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split()])
    return np.array(rows, dtype=np.float64)


def train_from_dataset(directory: Union[str, Path]) -> CentroidClassifier:
    """Train centroids from the engine's on-disk dataset layout, walking the
    train split in manifest order so centroids match the engine's exactly."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    use_aspect = not bool(manifest.get("spec", {}).get("rotate", False))
    feats_by_class: Dict[int, list] = {}
    for entry in manifest["splits"]["train"]:
        points = read_xyz(directory / "train" / entry["file"])
        feats_by_class.setdefault(int(entry["label"]), []).append(
            cloud_features(points, use_aspect=use_aspect)
        )
    if len(feats_by_class) < 2:
        raise ValueError("dataset must contain at least two classes")
    centroids = {c: np.mean(f, axis=0) for c, f in feats_by_class.items()}
    return CentroidClassifier(centroids, use_aspect=use_aspect)


def load_model_json(path: Union[str, Path]) -> CentroidClassifier:
    doc = json.loads(Path(path).read_text())
    centroids = {int(c): np.array([float(v) for v in vec])
                 for c, vec in doc["centroids"].items()}
    return CentroidClassifier(centroids, use_aspect=bool(doc.get("use_aspect", True)))


def load_centroid_model(spec: Union[str, Path]) -> CentroidClassifier:
    path = Path(spec)
    if path.is_dir():
        return train_from_dataset(path)
    return load_model_json(path)
