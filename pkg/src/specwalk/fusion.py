"""Spectrum fusion, the benign/fused discriminator, and learned fusion weights.

Fusing two clouds happens band-wise in their own graph-frequency bases:
each cloud is transformed under its own KNN-graph eigenbasis, low and high
bands are mixed with scalar weights, and the result is inverted with the
SOURCE basis so that alpha = (1, 1) reproduces the source exactly.

Fusion weights are learned against a small point-cloud discriminator trained
to tell benign clouds from randomly fused ones; the learned weights per class
accumulate in a weight bank that the attack samples from.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cloud import InvalidCloudError, PointCloud
from .spectral import (
    BandSplit,
    BasisCache,
    GraphBasis,
    Spectrum,
    build_basis,
    default_cutoff,
    gft,
)


class TrainingError(RuntimeError):
    """Raised when a training run produces non-finite losses."""


@dataclass(frozen=True)
class FusionWeights:
    """Per-band fusion scalars in [0, 1]; 1 keeps the source band untouched."""

    alpha_low: float
    alpha_high: float
    class_id: int = -1

    def __post_init__(self):
        for name in ("alpha_low", "alpha_high"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, min(1.0, max(0.0, v)))


def fuse_coefficients(
    source_spec: Spectrum,
    target_spec: Spectrum,
    weights: FusionWeights,
    split: BandSplit,
) -> np.ndarray:
    s, t = source_spec.coefficients, target_spec.coefficients
    if s.shape != t.shape:
        raise InvalidCloudError(f"spectrum shapes differ: {s.shape} vs {t.shape}")
    fused = np.empty_like(s)
    fused[split.low] = weights.alpha_low * s[split.low] + (1.0 - weights.alpha_low) * t[split.low]
    fused[split.high] = (
        weights.alpha_high * s[split.high] + (1.0 - weights.alpha_high) * t[split.high]
    )
    return fused


def fuse_spectra(
    source: PointCloud,
    target: PointCloud,
    weights: FusionWeights,
    split: Optional[BandSplit] = None,
    k: int = 10,
    cache: Optional[BasisCache] = None,
) -> PointCloud:
    """Band-wise spectral blend of two equally sized clouds.

    Each cloud is transformed under its own basis and the blend is inverted
    with the source basis, so the result lives on the source's graph geometry
    and keeps its point ordering.
    """
    if source.n != target.n:
        raise InvalidCloudError(
            f"fusion needs equal point counts, got {source.n} vs {target.n}; resample first"
        )
    basis_s = cache.get(source, k) if cache else build_basis(source, k)
    basis_t = cache.get(target, k) if cache else build_basis(target, k)
    for name, basis in (("source", basis_s), ("target", basis_t)):
        if basis.num_components() > 1:
            warnings.warn(f"{name} KNN graph is disconnected ({basis.num_components()} components)")
    split = split or BandSplit(default_cutoff(source.n), source.n)
    fused = fuse_coefficients(gft(source, basis_s), gft(target, basis_t), weights, split)
    points = basis_s.eigenvectors @ fused
    return PointCloud(points, label=None, name=f"fused({source.name},{target.name})")


def low_freq_reg(
    source: PointCloud, fused: PointCloud, split: BandSplit, basis: GraphBasis
) -> float:
    """Frobenius norm of the low-band coefficient deviation under the source basis."""
    if source.n != fused.n:
        raise InvalidCloudError(f"size mismatch: {source.n} vs {fused.n}")
    u_low = basis.eigenvectors[:, split.low]
    gap = u_low.T @ (fused.points - source.points)
    return float(np.linalg.norm(gap))


# --- discriminator -------------------------------------------------------------

_PARAM_SHAPES = [
    ("w1", (3, 64)),
    ("b1", (64,)),
    ("w2", (64, 128)),
    ("b2", (128,)),
    ("w3", (128, 64)),
    ("b3", (64,)),
    ("w4", (64, 32)),
    ("b4", (32,)),
    ("w5", (32, 1)),
    ("b5", (1,)),
]


class Discriminator:
    """Tiny point-cloud two-sample classifier.

    Per-point shared encoder 3 -> 64 -> 128 with ReLU, global max-pool, then a
    three-layer head 128 -> 64 -> 32 -> 1 producing a single logit. Max-pooling
    makes the logit invariant to point order.
    """

    def __init__(self, params: Dict[str, np.ndarray]):
        self.params = params
        self.training_loss: List[float] = []

    @classmethod
    def initialize(cls, seed: int = 0) -> "Discriminator":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _PARAM_SHAPES:
            if name.startswith("w"):
                fan_in = shape[0]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:
                params[name] = np.zeros(shape)
        return cls(params)

    def _forward(self, x: np.ndarray):
        p = self.params
        h1p = x @ p["w1"] + p["b1"]
        h1 = np.maximum(h1p, 0.0)
        h2p = h1 @ p["w2"] + p["b2"]
        h2 = np.maximum(h2p, 0.0)
        amax = h2.argmax(axis=1)  # (B, 128)
        g = np.take_along_axis(h2, amax[:, None, :], axis=1)[:, 0, :]
        f1p = g @ p["w3"] + p["b3"]
        f1 = np.maximum(f1p, 0.0)
        f2p = f1 @ p["w4"] + p["b4"]
        f2 = np.maximum(f2p, 0.0)
        logit = (f2 @ p["w5"] + p["b5"])[:, 0]
        return logit, (x, h1p, h1, h2p, amax, g, f1p, f1, f2p, f2)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        """Logits for a (B, n, 3) stack of clouds."""
        return self._forward(np.asarray(batch, dtype=np.float64))[0]

    def logit(self, cloud: PointCloud) -> float:
        return float(self.logits(cloud.points[None])[0])

    def score(self, cloud: PointCloud) -> float:
        """Probability that the cloud is benign."""
        return float(1.0 / (1.0 + np.exp(-self.logit(cloud))))

    def _backward(self, cache, dlogit: np.ndarray) -> Dict[str, np.ndarray]:
        p = self.params
        x, h1p, h1, h2p, amax, g, f1p, f1, f2p, f2 = cache
        grads = {}
        grads["w5"] = f2.T @ dlogit[:, None]
        grads["b5"] = np.array([dlogit.sum()])
        df2 = dlogit[:, None] * p["w5"][:, 0][None, :]
        df2p = df2 * (f2p > 0)
        grads["w4"] = f1.T @ df2p
        grads["b4"] = df2p.sum(axis=0)
        df1 = df2p @ p["w4"].T
        df1p = df1 * (f1p > 0)
        grads["w3"] = g.T @ df1p
        grads["b3"] = df1p.sum(axis=0)
        dg = df1p @ p["w3"].T
        dh2 = np.zeros_like(h2p)
        np.put_along_axis(dh2, amax[:, None, :], dg[:, None, :], axis=1)
        dh2p = dh2 * (h2p > 0)
        flat = lambda a: a.reshape(-1, a.shape[-1])
        grads["w2"] = flat(h1).T @ flat(dh2p)
        grads["b2"] = dh2p.sum(axis=(0, 1))
        dh1 = dh2p @ p["w2"].T
        dh1p = dh1 * (h1p > 0)
        grads["w1"] = flat(x).T @ flat(dh1p)
        grads["b1"] = dh1p.sum(axis=(0, 1))
        return grads

    # --- serialization: flat little-endian float64 tensors with a shape header

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<q", len(_PARAM_SHAPES)))
            for name, _ in _PARAM_SHAPES:
                arr = self.params[name]
                fh.write(struct.pack("<q", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            for name, _ in _PARAM_SHAPES:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Discriminator":
        raw = Path(path).read_bytes()
        offset = 8
        (count,) = struct.unpack_from("<q", raw, 0)
        if count != len(_PARAM_SHAPES):
            raise ValueError(f"expected {len(_PARAM_SHAPES)} tensors, file has {count}")
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<q", raw, offset)
            offset += 8
            shape = struct.unpack_from(f"<{ndim}q", raw, offset)
            offset += 8 * ndim
            shapes.append(shape)
        params = {}
        for (name, expected), shape in zip(_PARAM_SHAPES, shapes):
            if tuple(shape) != expected:
                raise ValueError(f"tensor {name} has shape {shape}, expected {expected}")
            size = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
            offset += size * 8
        return cls(params)


def _bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    # stable binary cross-entropy; returns (mean loss, dL/dlogit)
    z, y = logits, labels
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    dz = (1.0 / (1.0 + np.exp(-z)) - y) / len(z)
    return float(loss.mean()), dz


@dataclass
class DiscTrainConfig:
    epochs: int = 100
    learning_rate: float = 0.002
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1**self.t)
            vhat = self.v[k] / (1 - self.beta2**self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_discriminator(
    positives: Sequence[PointCloud],
    negatives: Sequence[PointCloud],
    config: Optional[DiscTrainConfig] = None,
) -> Discriminator:
    """Fit the benign-vs-fused classifier with minibatch adaptive-moment descent.

    Positives are benign clouds (label 1), negatives are fused clouds
    (label 0). Mean epoch losses are recorded on the returned model.
    """
    if not positives or not negatives:
        raise ValueError("both training sets must be non-empty")
    cfg = config or DiscTrainConfig()
    sizes = {c.n for c in list(positives) + list(negatives)}
    if len(sizes) != 1:
        raise InvalidCloudError(f"all training clouds must share a point count, got {sorted(sizes)}")
    x = np.stack([c.points for c in list(positives) + list(negatives)])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    disc = Discriminator.initialize(seed=cfg.seed)
    opt = _Adam(disc.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits, fw_cache = disc._forward(x[idx])
            loss, dlogit = _bce_with_logits(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {loss}")
            grads = disc._backward(fw_cache, dlogit)
            opt.step(disc.params, grads)
            total += loss * len(idx)
            seen += len(idx)
        disc.training_loss.append(total / seen)
    return disc


def discriminator_accuracy(
    disc: Discriminator, positives: Sequence[PointCloud], negatives: Sequence[PointCloud]
) -> float:
    logits_p = disc.logits(np.stack([c.points for c in positives])) if positives else np.array([])
    logits_n = disc.logits(np.stack([c.points for c in negatives])) if negatives else np.array([])
    hits = (logits_p > 0).sum() + (logits_n <= 0).sum()
    return float(hits) / (len(logits_p) + len(logits_n))


# --- 1-NNA style distance loss --------------------------------------------------


def _pairwise_chamfer(fused_pts: np.ndarray, other_pts: np.ndarray) -> np.ndarray:
    """Symmetric Chamfer distances between two stacks of clouds.

    fused_pts: (a, n, 3), other_pts: (b, m, 3) -> (a, b) matrix.
    """
    a, n, _ = fused_pts.shape
    b, m, _ = other_pts.shape
    f2 = np.einsum("ank,ank->an", fused_pts, fused_pts)
    o2 = np.einsum("bmk,bmk->bm", other_pts, other_pts)
    cross = (fused_pts.reshape(a * n, 3) @ other_pts.reshape(b * m, 3).T).reshape(a, n, b, m)
    d2 = f2[:, :, None, None] + o2[None, None, :, :] - 2.0 * cross  # (a, n, b, m)
    np.maximum(d2, 0.0, out=d2)
    return d2.min(axis=3).mean(axis=1) + d2.min(axis=1).mean(axis=2)


def one_nna_loss(
    fused: Sequence[PointCloud], benign: Sequence[PointCloud], disc: Discriminator
) -> float:
    """Soft distance constraint: negated mean discriminator score of each
    fused cloud's nearest neighbor in the pooled set (self excluded).

    Neighbors are found under symmetric Chamfer distance.
    """
    fused, benign = list(fused), list(benign)
    union = fused + benign
    if len(union) < 2:
        raise ValueError("need at least two clouds across both sets")
    f_stack = np.stack([c.points for c in fused])
    u_stack = np.stack([c.points for c in union])
    dists = _pairwise_chamfer(f_stack, u_stack)
    for i in range(len(fused)):
        dists[i, i] = np.inf  # fused[i] appears at union index i
    nn_idx = dists.argmin(axis=1)
    scores = 1.0 / (1.0 + np.exp(-disc.logits(u_stack[nn_idx])))
    return float(-scores.mean())


def one_nna_accuracy(set_a: Sequence[PointCloud], set_b: Sequence[PointCloud]) -> float:
    """Two-sample 1-NN accuracy under symmetric Chamfer; 0.5 means the sets
    are indistinguishable."""
    union = list(set_a) + list(set_b)
    if len(union) < 2:
        raise ValueError("need at least two clouds across both sets")
    labels = np.array([0] * len(set_a) + [1] * len(set_b))
    stack = np.stack([c.points for c in union])
    dists = _pairwise_chamfer(stack, stack)
    np.fill_diagonal(dists, np.inf)
    nn_idx = dists.argmin(axis=1)
    return float((labels[nn_idx] == labels).mean())


# --- learning the fusion weights -------------------------------------------------


@dataclass
class WeightTrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    fd_step: float = 1e-3
    pairs: int = 4
    k: int = 10
    cutoff: Optional[int] = None
    seed: int = 0


class _FusionPair:
    """Precomputed transforms for one (source, target) pair so that loss
    evaluations at different weights cost only small matrix products."""

    def __init__(self, source: PointCloud, target: PointCloud, k: int, split: BandSplit,
                 cache: BasisCache):
        self.source = source
        basis_s = cache.get(source, k)
        basis_t = cache.get(target, k)
        self.u_s = basis_s.eigenvectors
        self.s_coeff = gft(source, basis_s).coefficients
        self.t_coeff = gft(target, basis_t).coefficients
        self.split = split
        self.low_gap = float(np.linalg.norm(self.s_coeff[split.low] - self.t_coeff[split.low]))

    def fuse_points(self, alpha_low: float, alpha_high: float) -> np.ndarray:
        fused = np.empty_like(self.s_coeff)
        s, t, sp = self.s_coeff, self.t_coeff, self.split
        fused[sp.low] = alpha_low * s[sp.low] + (1.0 - alpha_low) * t[sp.low]
        fused[sp.high] = alpha_high * s[sp.high] + (1.0 - alpha_high) * t[sp.high]
        return self.u_s @ fused

    def low_band_deviation(self, alpha_low: float) -> float:
        # || (1 - a_low) (S_L - T_L) ||_F, exact closed form
        return (1.0 - alpha_low) * self.low_gap


def learn_fusion_weights(
    source_class: int,
    sources: Sequence[PointCloud],
    targets: Sequence[PointCloud],
    disc: Discriminator,
    config: Optional[WeightTrainConfig] = None,
) -> FusionWeights:
    """Optimize the two band weights by projected gradient descent.

    The loss pushes fused clouds to (a) be scored benign by the discriminator,
    (b) sit near benign clouds in the pooled nearest-neighbor sense, and
    (c) deviate from the source only in the high band. Gradients over the
    two scalars come from central finite differences, which sidesteps the
    non-differentiable nearest-neighbor assignment.
    """
    if not sources or not targets:
        raise ValueError("need non-empty source and target sets")
    cfg = config or WeightTrainConfig()
    n = sources[0].n
    split = BandSplit(cfg.cutoff or default_cutoff(n), n)
    cache = BasisCache()
    count = min(cfg.pairs, max(len(sources), len(targets)))
    pairs = [
        _FusionPair(sources[i % len(sources)], targets[i % len(targets)], cfg.k, split, cache)
        for i in range(count)
    ]
    benign = [p.source for p in pairs]

    def loss_at(alpha_low: float, alpha_high: float) -> float:
        fused_pts = np.stack([p.fuse_points(alpha_low, alpha_high) for p in pairs])
        logits = disc.logits(fused_pts)
        l_class, _ = _bce_with_logits(logits, np.ones(len(pairs)))
        fused_clouds = [PointCloud(pts) for pts in fused_pts]
        l_dis = one_nna_loss(fused_clouds, benign, disc)
        l_reg = float(np.mean([p.low_band_deviation(alpha_low) for p in pairs]))
        total = l_class + l_dis + l_reg
        if not np.isfinite(total):
            raise TrainingError(f"non-finite fusion loss at alpha=({alpha_low}, {alpha_high})")
        return total

    alpha = np.array([0.5, 0.5])
    h = cfg.fd_step
    opt = _Adam({"alpha": alpha}, cfg.learning_rate)
    params = {"alpha": alpha}
    for step in range(cfg.epochs):
        grad = np.zeros(2)
        for dim in range(2):
            lo = max(0.0, params["alpha"][dim] - h)
            hi = min(1.0, params["alpha"][dim] + h)
            a_lo, a_hi = params["alpha"].copy(), params["alpha"].copy()
            a_lo[dim], a_hi[dim] = lo, hi
            grad[dim] = (loss_at(*a_hi) - loss_at(*a_lo)) / (hi - lo)
        if step == 0 and np.all(grad == 0.0):
            warnings.warn("fusion loss is flat in the weights; returning the initialization")
            return FusionWeights(0.5, 0.5, class_id=source_class)
        opt.step(params, {"alpha": grad})
        params["alpha"] = np.clip(params["alpha"], 0.0, 1.0)
    return FusionWeights(float(params["alpha"][0]), float(params["alpha"][1]),
                         class_id=source_class)


# --- weight bank ---------------------------------------------------------------


class WeightBank:
    """Per-class store of learned fusion weights sampled at attack time."""

    def __init__(self, provenance: Optional[dict] = None):
        self.entries: Dict[int, List[FusionWeights]] = {}
        self.provenance = provenance or {}

    def add(self, weights: FusionWeights) -> None:
        self.entries.setdefault(weights.class_id, []).append(weights)

    def classes(self) -> List[int]:
        return sorted(self.entries)

    def save(self, path: Union[str, Path]) -> None:
        doc = {
            "provenance": self.provenance,
            "classes": {
                str(c): [
                    {"alpha_low": w.alpha_low, "alpha_high": w.alpha_high}
                    for w in entries
                ]
                for c, entries in sorted(self.entries.items())
            },
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WeightBank":
        doc = json.loads(Path(path).read_text())
        bank = cls(provenance=doc.get("provenance", {}))
        for cid, entries in doc.get("classes", {}).items():
            for entry in entries:
                bank.add(
                    FusionWeights(
                        float(entry["alpha_low"]), float(entry["alpha_high"]), class_id=int(cid)
                    )
                )
        return bank


def sample_weights(bank: WeightBank, class_id: int, rng: np.random.Generator) -> FusionWeights:
    """Uniformly random bank entry for the class, deterministic under the rng."""
    entries = bank.entries.get(class_id)
    if not entries:
        raise KeyError(
            f"weight bank has no entries for class {class_id}; available: {bank.classes()}"
        )
    return entries[int(rng.integers(len(entries)))]
