"""KNN-graph Laplacian eigenbases and the graph Fourier transform.

The graph is the symmetrized unweighted KNN graph (an edge exists if either
endpoint lists the other as a neighbor) and the operator is the combinatorial
Laplacian L = D - W. Eigenvectors ordered by ascending eigenvalue give the
frequency basis: low indices encode smooth shape, high indices fine detail.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg

from .cloud import PointCloud, knn_indices

EIG_CLAMP = -1e-10


class SpectralError(RuntimeError):
    """Eigendecomposition failure with diagnostics."""


@dataclass(frozen=True)
class GraphBasis:
    """Orthonormal Laplacian eigenbasis of one cloud's KNN graph."""

    eigenvectors: np.ndarray  # (n, n), columns by ascending eigenvalue
    eigenvalues: np.ndarray  # (n,), ascending, >= 0
    source_fingerprint: str
    k: int

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def num_components(self, tol: float = 1e-8) -> int:
        """Connected components of the graph = multiplicity of eigenvalue 0."""
        return int((self.eigenvalues < tol).sum())


@dataclass(frozen=True)
class Spectrum:
    """GFT coefficients of a cloud, one (x, y, z) triple per graph frequency."""

    coefficients: np.ndarray  # (n, 3)
    basis_fingerprint: str

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class BandSplit:
    """Partition of the frequency axis into [0, cutoff) and [cutoff, n)."""

    cutoff: int
    n: int

    def __post_init__(self):
        if not 1 <= self.cutoff < self.n:
            raise ValueError(f"cutoff must satisfy 1 <= c < n, got c={self.cutoff}, n={self.n}")

    @property
    def low(self) -> slice:
        return slice(0, self.cutoff)

    @property
    def high(self) -> slice:
        return slice(self.cutoff, self.n)


def default_cutoff(n: int) -> int:
    return max(1, n // 10)


def build_adjacency(cloud: PointCloud, k: int,
                    gaussian_sigma: Optional[float] = None) -> np.ndarray:
    """Symmetrized KNN adjacency matrix.

    Unweighted by default; with ``gaussian_sigma`` set, KNN edges carry
    exp(-d^2 / (2 sigma^2)) weights instead.
    """
    nbr = knn_indices(cloud, k)
    n = cloud.n
    w = np.zeros((n, n), dtype=np.float64)
    rows = np.repeat(np.arange(n), k)
    cols = nbr.ravel()
    if gaussian_sigma is None:
        w[rows, cols] = 1.0
    else:
        diffs = cloud.points[rows] - cloud.points[cols]
        d2 = np.einsum("ij,ij->i", diffs, diffs)
        w[rows, cols] = np.exp(-d2 / (2.0 * gaussian_sigma**2))
    return np.maximum(w, w.T)


def build_basis(cloud: PointCloud, k: int,
                gaussian_sigma: Optional[float] = None) -> GraphBasis:
    """Eigendecompose the combinatorial Laplacian of the cloud's KNN graph.

    Eigenvalues within -1e-10 of zero are clamped to zero; each eigenvector's
    sign is fixed so its largest-magnitude entry is positive, making the basis
    reproducible across runs and platforms.
    """
    w = build_adjacency(cloud, k, gaussian_sigma)
    lap = np.diag(w.sum(axis=1)) - w
    try:
        eigenvalues, eigenvectors = scipy.linalg.eigh(lap, driver="evd")
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise SpectralError(f"eigendecomposition failed for n={cloud.n}, k={k}: {exc}") from exc
    if eigenvalues[0] < EIG_CLAMP:
        raise SpectralError(
            f"Laplacian produced eigenvalue {eigenvalues[0]:.3e} below the clamp window"
        )
    eigenvalues = np.where(eigenvalues < 0.0, 0.0, eigenvalues)
    # deterministic sign: largest-magnitude entry of each column positive
    pivot = np.abs(eigenvectors).argmax(axis=0)
    signs = np.sign(eigenvectors[pivot, np.arange(cloud.n)])
    signs[signs == 0] = 1.0
    eigenvectors = eigenvectors * signs
    eigenvalues.flags.writeable = False
    eigenvectors.flags.writeable = False
    return GraphBasis(
        eigenvectors=eigenvectors,
        eigenvalues=eigenvalues,
        source_fingerprint=cloud.fingerprint(),
        k=k,
    )


def gft(cloud: PointCloud, basis: GraphBasis) -> Spectrum:
    if cloud.n != basis.n:
        raise ValueError(f"cloud size {cloud.n} does not match basis dimension {basis.n}")
    coeff = basis.eigenvectors.T @ cloud.points
    return Spectrum(coefficients=coeff, basis_fingerprint=basis.source_fingerprint)


def igft(spectrum: Spectrum, basis: GraphBasis, label: Optional[int] = None) -> PointCloud:
    if spectrum.n != basis.n:
        raise ValueError(f"spectrum size {spectrum.n} does not match basis dimension {basis.n}")
    if spectrum.basis_fingerprint != basis.source_fingerprint:
        warnings.warn("inverting a spectrum against a different basis (cross-basis fusion)")
    return PointCloud(basis.eigenvectors @ spectrum.coefficients, label=label)


def split_bands(spectrum: Spectrum, split: BandSplit) -> Tuple[np.ndarray, np.ndarray]:
    if split.n != spectrum.n:
        raise ValueError(f"band split sized {split.n} applied to spectrum of {spectrum.n}")
    coeff = spectrum.coefficients
    return coeff[split.low].copy(), coeff[split.high].copy()


# --- basis cache -------------------------------------------------------------

_HEADER = struct.Struct("<qq")  # n, k


def save_basis(basis: GraphBasis, path: Union[str, Path]) -> None:
    n = basis.n
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(n, basis.k))
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvectors, dtype="<f8").tobytes())


def load_basis(path: Union[str, Path], source_fingerprint: str) -> GraphBasis:
    raw = Path(path).read_bytes()
    n, k = _HEADER.unpack_from(raw)
    offset = _HEADER.size
    eigenvalues = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
    offset += n * 8
    eigenvectors = (
        np.frombuffer(raw, dtype="<f8", count=n * n, offset=offset).reshape(n, n).copy()
    )
    eigenvalues.flags.writeable = False
    eigenvectors.flags.writeable = False
    return GraphBasis(
        eigenvectors=eigenvectors,
        eigenvalues=eigenvalues,
        source_fingerprint=source_fingerprint,
        k=int(k),
    )


class BasisCache:
    """Memoizes bases by cloud fingerprint, optionally persisted to a directory."""

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict = {}

    def _path(self, fingerprint: str, k: int) -> Optional[Path]:
        if self.directory is None:
            return None
        return self.directory / f"{fingerprint}_k{k}.basis"

    def get(self, cloud: PointCloud, k: int) -> GraphBasis:
        key = (cloud.fingerprint(), k)
        hit = self._mem.get(key)
        if hit is not None:
            return hit
        path = self._path(*key)
        if path is not None and path.exists():
            basis = load_basis(path, key[0])
        else:
            basis = build_basis(cloud, k)
            if path is not None:
                save_basis(basis, path)
        self._mem[key] = basis
        return basis
