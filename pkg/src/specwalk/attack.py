"""Two-stage hard-label attack: boundary-cloud generation and geometry-aware
joint coordinate-spectrum walking.

Stage 1 fuses the source with a pool of target clouds using bank weights,
keeps the adversarial candidate with the smallest combined distance, and
projects it onto the decision boundary by bisecting the connecting segment.

Stage 2 repeatedly slides the boundary cloud along a semicircular path whose
chord runs from the source to the current boundary cloud. Every probe on the
path is at most as far from the source as the current boundary cloud, so each
accepted step strictly shrinks the perturbation. When a coordinate-domain step
stalls, the same step is retried in the spectrum of the current boundary
cloud's own KNN-graph basis, which redraws the search geometry and helps
escape local optima.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import DistanceReport, PointCloud, combined_distance, d_norm, resample
from .fusion import WeightBank, fuse_spectra, sample_weights
from .oracle import (
    HardLabelOracle,
    OracleProtocolError,
    OracleTransportError,
    QueryCounter,
    indicator,
)
from .spectral import BandSplit, BasisCache, GraphBasis, build_basis, default_cutoff

QueryFn = Callable[[np.ndarray], int]


class GenerationError(RuntimeError):
    """No usable boundary candidate; retry with a larger target pool."""


class EstimationError(RuntimeError):
    """Normal estimation degenerated (probe contributions cancelled)."""


class ContractError(RuntimeError):
    """The oracle violated the deterministic hard-label contract."""


class AttackAborted(RuntimeError):
    """Oracle became unusable mid-attack; carries the partial result."""

    def __init__(self, message: str, partial: Optional["AttackResult"] = None):
        super().__init__(message)
        self.partial = partial


@dataclass
class AttackConfig:
    """Knobs for both attack stages. Defaults follow the evaluation setup:
    distance weights (2.0, 0.5), outlier cap 0.2, 10-NN graphs, 100 walking
    rounds, and a normal-probe budget of ceil(30 * sqrt(t)) per round."""

    gamma1: float = 2.0
    gamma2: float = 0.5
    epsilon: float = 0.2
    k: int = 10
    rounds: int = 100
    normal_budget: float = 30.0
    cutoff: Optional[int] = None
    beta_tolerance: float = 1e-3
    angle_tolerance: float = 1e-2
    query_cap: int = 30000
    seed: int = 0
    target_pool: int = 10
    probe_scale: float = 1e-2
    improvement_tol: float = 1e-4
    max_halvings: int = 10
    max_bisect_steps: int = 30

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("distance weights must be nonnegative")
        for name in ("epsilon", "beta_tolerance", "angle_tolerance", "probe_scale"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite")
        for name in ("k", "normal_budget", "query_cap", "target_pool"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")


@dataclass
class AttackResult:
    """Everything one attack run produced, traces included."""

    cloud: PointCloud
    report: DistanceReport
    queries: Dict[str, int]
    iterations: int
    trace: List[dict]
    success: bool
    status: str
    seed: int
    initial_candidate_dnorm: float
    boundary_dnorm: float
    best_dnorms: List[float]
    semicircle_log: List[Tuple[float, float]] = field(default_factory=list)

    def to_record(self, instance: str) -> dict:
        return {
            "instance": instance,
            "success": self.success,
            "status": self.status,
            "metrics": {
                "d_hausdorff": self.report.d_hausdorff,
                "d_chamfer": self.report.d_chamfer,
                "d_norm": self.report.d_norm,
                "d_combined": self.report.d_combined,
                "max_pointwise": self.report.max_pointwise,
                "initial_d_norm": self.initial_candidate_dnorm,
            },
            "queries": self.queries,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def _unit(arr: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(arr)
    if norm < 1e-300:
        raise ValueError("cannot normalize a zero direction")
    return arr / norm


def point_on_semicircle(
    source: np.ndarray, boundary: np.ndarray, xi: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Point on the circular arc between the source-to-boundary chord endpoints.

    ``xi`` and ``u`` must be unit directions under the Frobenius inner product.
    The returned point is never farther from the source than the boundary.
    """
    dist = np.linalg.norm(boundary - source)
    return source + dist * float((xi * u).sum()) * xi


# --- stage 1 -------------------------------------------------------------------


def select_best_candidate(
    source: PointCloud,
    candidates: Sequence[PointCloud],
    oracle: HardLabelOracle,
    config: Optional[AttackConfig] = None,
    counter: Optional[QueryCounter] = None,
) -> PointCloud:
    """Keep adversarial candidates without per-point outliers, return the one
    with the smallest combined distance (ties to the lowest index)."""
    cfg = config or AttackConfig()
    if source.label is None:
        raise ValueError("source cloud must carry its ground-truth label")
    best = None
    best_d = math.inf
    rejected_phi = rejected_eps = 0
    for cand in candidates:
        if indicator(oracle, cand, source.label, counter, phase="generation") != 1:
            rejected_phi += 1
            continue
        report = combined_distance(source, cand, cfg.gamma1, cfg.gamma2)
        if report.max_pointwise > cfg.epsilon:
            rejected_eps += 1
            continue
        if report.d_combined < best_d:
            best, best_d = cand, report.d_combined
    if best is None:
        raise GenerationError(
            f"all {len(candidates)} candidates rejected "
            f"({rejected_phi} non-adversarial, {rejected_eps} over the {cfg.epsilon} outlier cap); "
            "retry with a larger target pool"
        )
    return best


def binary_project(
    source: PointCloud,
    adversarial: PointCloud,
    ground_truth: int,
    oracle: HardLabelOracle,
    tolerance: float = 1e-3,
    counter: Optional[QueryCounter] = None,
    check_endpoints: bool = False,
) -> PointCloud:
    """Bisect the segment between source and adversarial cloud down to the
    decision boundary; returns the adversarial-side endpoint.

    ``beta`` is the fraction of the source in the blend, so beta=0 is the
    adversarial cloud and beta=1 the source.
    """
    if check_endpoints:
        if indicator(oracle, adversarial, ground_truth, counter, phase="projection") != 1:
            raise ContractError("projection endpoint is not adversarial")
        if indicator(oracle, source, ground_truth, counter, phase="projection") != -1:
            raise ContractError("source endpoint is not classified as its own label")
    beta_adv, beta_src = 0.0, 1.0
    src, adv = source.points, adversarial.points
    while beta_src - beta_adv > tolerance:
        mid = 0.5 * (beta_adv + beta_src)
        blend = PointCloud(mid * src + (1.0 - mid) * adv, label=adversarial.label)
        if indicator(oracle, blend, ground_truth, counter, phase="projection") == 1:
            beta_adv = mid
        else:
            beta_src = mid
    if beta_adv == 0.0:
        return adversarial
    return PointCloud(beta_adv * src + (1.0 - beta_adv) * adv, label=adversarial.label)


# --- stage 2 -------------------------------------------------------------------


def normal_probe_count(t: int, budget: float = 30.0) -> int:
    return int(math.ceil(budget * math.sqrt(t)))


def estimate_normal(
    boundary: PointCloud,
    ground_truth: int,
    oracle: HardLabelOracle,
    t: int,
    rng: np.random.Generator,
    radius: float,
    config: Optional[AttackConfig] = None,
    domain: str = "coordinate",
    basis: Optional[GraphBasis] = None,
    counter: Optional[QueryCounter] = None,
) -> np.ndarray:
    """Monte-Carlo estimate of the boundary normal at the current cloud.

    Draws ceil(30 * sqrt(t)) Gaussian probes scaled by ``radius``, queries the
    victim on each displaced cloud, and returns the indicator-weighted probe
    sum normalized to unit Frobenius norm. In the spectral domain the probes
    displace the GFT coefficients of the boundary cloud under ``basis`` and
    the displaced spectrum is inverted before each query; the returned
    direction then lives in coefficient space.
    """
    cfg = config or AttackConfig()
    if domain not in ("coordinate", "spectral"):
        raise ValueError(f"unknown domain {domain!r}")
    if domain == "spectral" and basis is None:
        raise ValueError("spectral normal estimation needs the boundary basis")
    b = normal_probe_count(t, cfg.normal_budget)
    n = boundary.n
    for attempt in range(2):
        probes = rng.standard_normal((b, n, 3)) * radius
        acc = np.zeros((n, 3))
        for v in probes:
            if domain == "coordinate":
                displaced = PointCloud(boundary.points + v)
            else:
                displaced = PointCloud(boundary.points + basis.eigenvectors @ v)
            phi = indicator(oracle, displaced, ground_truth, counter, phase="normal_estimation")
            acc += phi * v
        norm = np.linalg.norm(acc)
        if norm >= 1e-12:
            return acc / norm
    raise EstimationError(
        f"normal probes cancelled twice in a row (B={b}, radius={radius:.3e})"
    )


def initial_search_direction(
    u: np.ndarray,
    m: np.ndarray,
    query: QueryFn,
    source: np.ndarray,
    boundary: np.ndarray,
    config: Optional[AttackConfig] = None,
    log: Optional[List[Tuple[float, float]]] = None,
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Blend the outward chord direction with the estimated normal, halving the
    chord coefficient until the semicircle probe turns non-adversarial.

    Returns (direction, probe point) of the first non-adversarial probe, or
    (None, None) when every probe up to the halving cap stayed adversarial.
    """
    cfg = config or AttackConfig()
    dist = float(np.linalg.norm(boundary - source))
    for q in range(cfg.max_halvings + 1):
        mix = (2.0**-q) * u + m
        norm = np.linalg.norm(mix)
        if norm < 1e-12:
            continue  # normal estimate anti-parallel to the chord at this k
        xi = mix / norm
        pc = point_on_semicircle(source, boundary, xi, u)
        if log is not None:
            log.append((float(np.linalg.norm(pc - source)), dist))
        if query(pc) == -1:
            return xi, pc
    return None, None


def bisect_direction(
    xi_lower: np.ndarray,
    xi_upper: np.ndarray,
    query: QueryFn,
    source: np.ndarray,
    boundary: np.ndarray,
    tolerance: float = 1e-2,
    max_steps: int = 30,
    log: Optional[List[Tuple[float, float]]] = None,
) -> np.ndarray:
    """Shrink the angular bracket between a non-adversarial lower direction and
    an adversarial upper direction; returns the probe point of the final upper
    direction, which is adversarial and no farther from the source than the
    boundary cloud."""
    u = _unit(boundary - source)
    dist = float(np.linalg.norm(boundary - source))
    pc_upper = boundary
    steps = 0
    while steps < max_steps:
        cos = float(np.clip((xi_lower * xi_upper).sum(), -1.0, 1.0))
        if math.acos(cos) < tolerance:
            break
        mid = xi_lower + xi_upper
        norm = np.linalg.norm(mid)
        if norm < 1e-12:
            break  # bracket spans a straight angle; cannot bisect further
        xi = mid / norm
        pc = point_on_semicircle(source, boundary, xi, u)
        if log is not None:
            log.append((float(np.linalg.norm(pc - source)), dist))
        if query(pc) == 1:
            xi_upper, pc_upper = xi, pc
        else:
            xi_lower = xi
        steps += 1
    return pc_upper


class _WalkSpace:
    """One walking step's working space: raw coordinates, or the spectrum of
    the current boundary cloud under its own graph basis."""

    def __init__(self, domain: str, source: PointCloud, boundary: PointCloud,
                 basis: Optional[GraphBasis] = None):
        self.domain = domain
        if domain == "spectral":
            self.u_mat = basis.eigenvectors
            self.source = self.u_mat.T @ source.points
            self.boundary = self.u_mat.T @ boundary.points
        else:
            self.u_mat = None
            self.source = source.points
            self.boundary = boundary.points

    def to_cloud(self, arr: np.ndarray) -> PointCloud:
        if self.domain == "spectral":
            return PointCloud(self.u_mat @ arr)
        return PointCloud(arr)


def _walk_step(
    source: PointCloud,
    boundary: PointCloud,
    ground_truth: int,
    oracle: HardLabelOracle,
    t: int,
    domain: str,
    rng: np.random.Generator,
    cfg: AttackConfig,
    counter: QueryCounter,
    log: List[Tuple[float, float]],
    basis: Optional[GraphBasis] = None,
) -> Optional[PointCloud]:
    """One semicircular walking attempt. Returns the new boundary cloud, or
    None when no non-adversarial probe could anchor the search."""
    space = _WalkSpace(domain, source, boundary, basis)
    gap = space.boundary - space.source
    dist = float(np.linalg.norm(gap))
    u = gap / dist
    radius = cfg.probe_scale * dist
    try:
        m = estimate_normal(
            boundary, ground_truth, oracle, t, rng, radius,
            config=cfg, domain=domain, basis=basis, counter=counter,
        )
    except EstimationError:
        return None

    def query(arr: np.ndarray) -> int:
        return indicator(oracle, space.to_cloud(arr), ground_truth, counter,
                         phase="semicircle_search")

    xi_lower, _ = initial_search_direction(
        u, m, query, space.source, space.boundary, cfg, log
    )
    if xi_lower is None:
        return None
    pc = bisect_direction(
        xi_lower, u, query, space.source, space.boundary,
        tolerance=cfg.angle_tolerance, max_steps=cfg.max_bisect_steps, log=log,
    )
    return space.to_cloud(pc)


def walk_boundary(
    source: PointCloud,
    boundary: PointCloud,
    ground_truth: int,
    oracle: HardLabelOracle,
    cfg: AttackConfig,
    counter: QueryCounter,
    rng: np.random.Generator,
) -> Tuple[List[PointCloud], List[float], List[dict], List[Tuple[float, float]], str]:
    """Stage-2 optimizer: iterate coordinate walking with a spectral fallback.

    Returns (best clouds, their displacement norms, per-iteration trace,
    semicircle query log, status)."""
    best = [boundary]
    best_dnorms = [d_norm(source, boundary)]
    trace: List[dict] = []
    log: List[Tuple[float, float]] = []
    status = "converged"
    current = boundary
    basis_cache: Optional[GraphBasis] = None
    basis_fp = None
    for t in range(1, cfg.rounds + 1):
        if counter.total >= cfg.query_cap:
            status = "unconverged"
            break
        d_cur = best_dnorms[-1]
        if d_cur < 1e-9:
            break  # boundary cloud collapsed onto the source
        domain_used = "none"
        candidate = _walk_step(
            source, current, ground_truth, oracle, t, "coordinate", rng, cfg, counter, log
        )
        accepted = None
        if candidate is not None:
            d_new = d_norm(source, candidate)
            if (d_cur - d_new) / d_cur >= cfg.improvement_tol:
                accepted, domain_used = (candidate, d_new), "coordinate"
        if accepted is None:
            fp = current.fingerprint()
            if basis_fp != fp:
                basis_cache = build_basis(current, cfg.k)
                basis_fp = fp
            candidate = _walk_step(
                source, current, ground_truth, oracle, t, "spectral", rng, cfg, counter,
                log, basis=basis_cache,
            )
            if candidate is not None:
                d_new = d_norm(source, candidate)
                if (d_cur - d_new) / d_cur >= cfg.improvement_tol:
                    accepted, domain_used = (candidate, d_new), "spectral"
        if accepted is not None:
            current, d_cur = accepted
            best.append(current)
            best_dnorms.append(d_cur)
        trace.append(
            {"t": t, "domain": domain_used, "d_norm": d_cur, "queries": counter.total}
        )
    return best, best_dnorms, trace, log, status


def run_attack(
    source: PointCloud,
    targets: Sequence[PointCloud],
    oracle: HardLabelOracle,
    bank: WeightBank,
    config: Optional[AttackConfig] = None,
) -> AttackResult:
    """Full attack pipeline against one source cloud.

    Stage 1 fuses the source with up to ``target_pool`` other-class targets
    using weights sampled from the bank, selects the best adversarial
    candidate, and projects it to the boundary. Stage 2 walks the boundary
    cloud toward the source. The result carries the complete trace and
    phase-tagged query accounting, and is bit-reproducible for a fixed seed.
    """
    cfg = config or AttackConfig()
    if source.label is None:
        raise ValueError("source cloud must carry its ground-truth label")
    gt = source.label
    rng = np.random.default_rng(cfg.seed)
    counter = QueryCounter()

    def finish(cloud, status, *, iterations=0, trace=None, best_dnorms=None,
               log=None, init_d=math.nan, boundary_d=math.nan, success=None):
        report = combined_distance(source, cloud, cfg.gamma1, cfg.gamma2)
        return AttackResult(
            cloud=cloud,
            report=report,
            queries=counter.snapshot(),
            iterations=iterations,
            trace=trace or [],
            success=(status in ("converged", "unconverged")) if success is None else success,
            status=status,
            seed=cfg.seed,
            initial_candidate_dnorm=init_d,
            boundary_dnorm=boundary_d,
            best_dnorms=best_dnorms or [],
            semicircle_log=log or [],
        )

    try:
        if indicator(oracle, source, gt, counter, phase="generation") == 1:
            return finish(source, "source_misclassified", success=False)

        # stage 1: boundary-cloud generation
        cache = BasisCache()
        split = BandSplit(cfg.cutoff or default_cutoff(source.n), source.n)
        pool = [t for t in targets if t.label is None or t.label != gt][: cfg.target_pool]
        if not pool:
            raise GenerationError("no targets from other classes were supplied")
        candidates = []
        for target in pool:
            target = resample(target, source.n, rng) if target.n != source.n else target
            weights = sample_weights(bank, gt, rng)
            candidates.append(fuse_spectra(source, target, weights, split, cfg.k, cache))
        best_cand = select_best_candidate(source, candidates, oracle, cfg, counter)
        init_d = d_norm(source, best_cand)
        boundary = binary_project(source, best_cand, gt, oracle, cfg.beta_tolerance, counter)
        boundary_d = d_norm(source, boundary)

        if boundary_d < 1e-9:
            return finish(boundary, "converged", init_d=init_d, boundary_d=boundary_d,
                          best_dnorms=[boundary_d])

        # stage 2: walking along the decision boundary
        best, best_dnorms, trace, log, status = walk_boundary(
            source, boundary, gt, oracle, cfg, counter, rng
        )
    except (OracleProtocolError, OracleTransportError) as exc:
        partial = finish(source, "aborted", success=False)
        raise AttackAborted(f"oracle became unusable: {exc}", partial) from exc
    reports = [combined_distance(source, c, cfg.gamma1, cfg.gamma2) for c in best]
    winner = int(np.argmin([r.d_combined for r in reports]))
    return finish(
        best[winner], status,
        iterations=len(trace), trace=trace, best_dnorms=best_dnorms, log=log,
        init_d=init_d, boundary_d=boundary_d,
    )
