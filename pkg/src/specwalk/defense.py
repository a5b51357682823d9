"""Input-purification defenses: statistical outlier removal and random sampling.

Both defenses return verbatim subsets of the input cloud. When wrapping an
oracle they are applied to every query before classification; random sampling
derives its subset from a hash of the queried points so the wrapped oracle
stays a deterministic function of its input.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, knn_indices
from .oracle import HardLabelOracle


class DefenseError(RuntimeError):
    """Degenerate defense output (nothing left to classify)."""


@dataclass
class DefenseConfig:
    sor_k: int = 2
    sor_alpha: float = 1.1
    srs_drop_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.sor_k < 1:
            raise ValueError("sor_k must be >= 1")
        if not 0.0 < self.srs_drop_fraction < 1.0:
            raise ValueError("srs_drop_fraction must lie in (0, 1)")


def sor_filter(cloud: PointCloud, config: DefenseConfig = DefenseConfig()) -> PointCloud:
    """Drop points whose mean distance to their sor_k nearest neighbors exceeds
    the cloud-wide mean by more than sor_alpha standard deviations."""
    if cloud.n <= config.sor_k:
        raise ValueError(f"need more than sor_k={config.sor_k} points, got {cloud.n}")
    nbr = knn_indices(cloud, config.sor_k)
    diffs = cloud.points[nbr] - cloud.points[:, None, :]
    mean_dist = np.sqrt(np.einsum("ijk,ijk->ij", diffs, diffs)).mean(axis=1)
    threshold = mean_dist.mean() + config.sor_alpha * mean_dist.std()
    keep = mean_dist <= threshold
    if not keep.any():
        raise DefenseError("statistical threshold removed every point")
    return cloud.with_points(cloud.points[keep])


def srs_drop(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Keep a seeded uniform subset of ceil(n * (1 - fraction)) points, order
    preserved."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("drop fraction must lie in (0, 1)")
    m = math.ceil(cloud.n * (1.0 - fraction))
    if m < 4:
        raise DefenseError(f"dropping {fraction:.0%} of {cloud.n} points leaves fewer than 4")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(cloud.n, size=m, replace=False))
    return cloud.with_points(cloud.points[keep])


def _cloud_seed(cloud: PointCloud, base_seed: int) -> int:
    digest = hashlib.sha256(cloud.points.tobytes()).digest()
    return (int.from_bytes(digest[:8], "little") ^ base_seed) & 0x7FFFFFFFFFFFFFFF


class DefendedOracle(HardLabelOracle):
    """Victim wrapper applying a defense to every query before classification.

    mode "sor" filters outliers; "srs" drops a random fraction with a seed
    derived from the query itself, keeping predictions deterministic.
    """

    def __init__(self, inner: HardLabelOracle, mode: str, config: DefenseConfig = DefenseConfig()):
        if mode not in ("sor", "srs"):
            raise ValueError(f"unknown defense mode {mode!r}")
        self.inner = inner
        self.mode = mode
        self.config = config

    def apply(self, cloud: PointCloud) -> PointCloud:
        if self.mode == "sor":
            return sor_filter(cloud, self.config)
        return srs_drop(cloud, self.config.srs_drop_fraction, _cloud_seed(cloud, self.config.seed))

    def predict(self, cloud: PointCloud) -> int:
        return self.inner.predict(self.apply(cloud))


def make_defended_oracle(inner: HardLabelOracle, name: str, seed: int = 0) -> HardLabelOracle:
    """Build the oracle for a named defense: none, sor, srs30, or srs50."""
    if name in (None, "none"):
        return inner
    if name == "sor":
        return DefendedOracle(inner, "sor", DefenseConfig(seed=seed))
    if name == "srs30":
        return DefendedOracle(inner, "srs", DefenseConfig(srs_drop_fraction=0.3, seed=seed))
    if name == "srs50":
        return DefendedOracle(inner, "srs", DefenseConfig(srs_drop_fraction=0.5, seed=seed))
    raise ValueError(f"unknown defense {name!r}; expected none, sor, srs30, or srs50")
