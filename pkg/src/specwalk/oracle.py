"""Hard-label victim interface, query accounting, and built-in victims.

The only channel to a victim is ``predict(cloud) -> label``. Victims must be
deterministic within a session; the boundary bisection steps assume a stable
decision function.
"""

from __future__ import annotations

import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import requests

from .cloud import PointCloud, fmt17

PHASES = ("generation", "projection", "normal_estimation", "semicircle_search")


class HardLabelOracle(ABC):
    """A victim classifier exposing nothing but its top-1 label."""

    @abstractmethod
    def predict(self, cloud: PointCloud) -> int:
        ...


class QueryCounter:
    """Thread-safe per-phase query tallies. Total is always the phase sum."""

    def __init__(self):
        self._lock = threading.Lock()
        self._phases: Dict[str, int] = {p: 0 for p in PHASES}

    def record(self, phase: str) -> None:
        if phase not in self._phases:
            raise ValueError(f"unknown phase {phase!r}, expected one of {PHASES}")
        with self._lock:
            self._phases[phase] += 1

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._phases.values())

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            out = dict(self._phases)
        out["total"] = sum(out[p] for p in PHASES)
        return out


def indicator(
    oracle: HardLabelOracle,
    cloud: PointCloud,
    ground_truth: int,
    counter: Optional[QueryCounter] = None,
    phase: str = "generation",
) -> int:
    """+1 if the victim's label differs from the ground truth, else -1."""
    label = oracle.predict(cloud)
    if counter is not None:
        counter.record(phase)
    return 1 if label != ground_truth else -1


class CountingOracle(HardLabelOracle):
    """Wrapper that counts raw predict() calls; used to audit query accounting."""

    def __init__(self, inner: HardLabelOracle):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def predict(self, cloud: PointCloud) -> int:
        with self._lock:
            self.calls += 1
        return self.inner.predict(cloud)


# --- native desk-scale victim -------------------------------------------------

FEATURE_DIM = 13
_HIST_BINS = 8


def cloud_features(cloud: PointCloud, use_aspect: bool = True) -> np.ndarray:
    """Fixed 13-dim shape descriptor: covariance spectrum, radial histogram,
    and bounding-box aspect ratios (zeroed when ``use_aspect`` is off).

    Computed on the unit-ball-normalized cloud. Permutation-invariant by
    construction; the first two groups are also rotation-invariant.
    """
    pts = cloud.points
    pts = pts - pts.mean(axis=0)
    sq_norms = np.einsum("ij,ij->i", pts, pts)
    radius = np.sqrt(sq_norms.max())
    if radius > 0.0:
        pts = pts / radius
        sq_norms = sq_norms / (radius * radius)
    n = len(pts)
    cov = (pts.T @ pts) / n  # points are centered, so this is the covariance
    eigvals = np.linalg.eigvalsh(cov)
    width = (1.0 + 1e-9) / _HIST_BINS
    bins = np.minimum((np.sqrt(sq_norms) / width).astype(np.intp), _HIST_BINS - 1)
    hist = np.bincount(bins, minlength=_HIST_BINS) / n
    if use_aspect:
        extents = np.sort(pts.max(axis=0) - pts.min(axis=0))[::-1]
        if extents[0] <= 0.0:
            aspect = np.array([1.0, 1.0])
        else:
            aspect = extents[1:] / extents[0]
    else:
        aspect = np.zeros(2)
    return np.concatenate([eigvals, hist, aspect])


class NativeCentroidClassifier(HardLabelOracle):
    """Nearest-centroid classifier over the fixed shape descriptor.

    Intentionally weak (linear decision regions in feature space) so that
    desk-scale attacks succeed with small perturbations. Ties go to the
    lower class id.
    """

    def __init__(self, centroids: Dict[int, np.ndarray], use_aspect: bool = True):
        self.class_ids = sorted(centroids)
        self.centroids = np.stack([np.asarray(centroids[c], dtype=np.float64) for c in self.class_ids])
        self.use_aspect = use_aspect
        self.training_accuracy: Optional[float] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def predict(self, cloud: PointCloud) -> int:
        feats = cloud_features(cloud, use_aspect=self.use_aspect)
        dists = np.linalg.norm(self.centroids - feats, axis=1)
        return self.class_ids[int(np.argmin(dists))]

    def to_dict(self) -> dict:
        return {
            "use_aspect": self.use_aspect,
            "centroids": {
                str(c): [fmt17(v) for v in self.centroids[i]]
                for i, c in enumerate(self.class_ids)
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "NativeCentroidClassifier":
        centroids = {
            int(c): np.array([float(v) for v in vec]) for c, vec in payload["centroids"].items()
        }
        return cls(centroids, use_aspect=bool(payload.get("use_aspect", True)))


def train_native_classifier(
    dataset: Sequence[PointCloud], use_aspect: bool = True
) -> NativeCentroidClassifier:
    """Per-class mean of the shape descriptor. Every class must be non-empty
    and labeled; at least two classes are required."""
    by_class: Dict[int, list] = {}
    for cloud in dataset:
        if cloud.label is None:
            raise ValueError(f"unlabeled cloud {cloud.name!r} in training set")
        by_class.setdefault(cloud.label, []).append(cloud_features(cloud, use_aspect=use_aspect))
    if len(by_class) < 2:
        raise ValueError(f"need at least 2 classes, got {len(by_class)}")
    centroids = {c: np.mean(feats, axis=0) for c, feats in by_class.items()}
    clf = NativeCentroidClassifier(centroids, use_aspect=use_aspect)
    hits = sum(1 for cloud in dataset if clf.predict(cloud) == cloud.label)
    clf.training_accuracy = hits / len(dataset)
    return clf


# --- remote victims -----------------------------------------------------------


class OracleProtocolError(RuntimeError):
    """The endpoint answered, but not with the agreed wire format."""


class OracleTransportError(RuntimeError):
    """The endpoint could not be reached after the configured retries."""


def encode_predict_request(cloud: PointCloud) -> bytes:
    """JSON body for POST /predict with coordinates at 17 significant digits."""
    rows = ",".join(
        "[" + ",".join(fmt17(c) for c in p) + "]" for p in cloud.points
    )
    return ('{"points": [' + rows + "]}").encode("ascii")


@dataclass
class RetryPolicy:
    max_retries: int = 4
    backoff_base: float = 0.2
    timeout: float = 10.0


def remote_predict(
    endpoint: str, cloud: PointCloud, retry: Optional[RetryPolicy] = None
) -> int:
    """Query a remote hard-label victim over the wire protocol.

    Transport failures (connection errors, timeouts, victim 5xx) are retried
    with exponential backoff up to the policy cap; malformed responses raise
    immediately as protocol errors.
    """
    retry = retry or RetryPolicy()
    url = endpoint.rstrip("/") + "/predict"
    body = encode_predict_request(cloud)
    last_exc: Optional[Exception] = None
    for attempt in range(retry.max_retries + 1):
        try:
            resp = requests.post(
                url,
                data=body,
                headers={"Content-Type": "application/json"},
                timeout=retry.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_exc = exc
            if attempt < retry.max_retries:
                time.sleep(retry.backoff_base * (2.0**attempt))
            continue
        if resp.status_code == 200:
            try:
                payload = resp.json()
                label = payload["label"]
            except (ValueError, KeyError, TypeError) as exc:
                raise OracleProtocolError(f"malformed /predict response: {resp.text[:200]!r}") from exc
            if not isinstance(label, int) or isinstance(label, bool):
                raise OracleProtocolError(f"label must be an integer, got {label!r}")
            return label
        if resp.status_code >= 500:
            # victim failure: possibly transient, retry
            last_exc = OracleTransportError(f"victim failure HTTP {resp.status_code}")
            if attempt < retry.max_retries:
                time.sleep(retry.backoff_base * (2.0**attempt))
            continue
        raise OracleProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]!r}")
    raise OracleTransportError(
        f"endpoint {endpoint} unreachable after {retry.max_retries + 1} attempts: {last_exc}"
    )


class RemoteOracle(HardLabelOracle):
    """Hard-label oracle backed by an HTTP endpoint speaking the wire protocol."""

    def __init__(self, endpoint: str, retry: Optional[RetryPolicy] = None):
        self.endpoint = endpoint.rstrip("/")
        self.retry = retry or RetryPolicy()

    def predict(self, cloud: PointCloud) -> int:
        return remote_predict(self.endpoint, cloud, self.retry)

    def health(self) -> dict:
        resp = requests.get(self.endpoint + "/health", timeout=self.retry.timeout)
        if resp.status_code != 200:
            raise OracleTransportError(f"health check failed: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise OracleProtocolError("health check returned non-JSON body") from exc
