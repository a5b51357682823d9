"""Batch attack evaluation: eligibility filtering, parallel attack runs,
JSON-lines records, and the aggregate metrics table."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .attack import AttackAborted, AttackConfig, GenerationError, run_attack
from .cloud import PointCloud, write_ply
from .fusion import WeightBank
from .oracle import HardLabelOracle, indicator


@dataclass
class EvaluationReport:
    """Aggregate row for one victim/defense combination."""

    victim: str
    defense: str
    attempted: int
    succeeded: int
    asr: float  # percent
    mean_d_hausdorff: float
    mean_d_chamfer: float
    mean_d_norm: float
    mean_queries: float
    mean_seconds: float

    def table(self) -> str:
        header = (
            f"{'victim':<12} {'defense':<8} {'ASR(%)':>7} {'D_h':>10} {'D_c':>10} "
            f"{'D_norm':>10} {'queries':>9} {'sec':>7}"
        )
        row = (
            f"{self.victim:<12} {self.defense:<8} {self.asr:>7.1f} "
            f"{self.mean_d_hausdorff:>10.4f} {self.mean_d_chamfer:>10.4f} "
            f"{self.mean_d_norm:>10.4f} {self.mean_queries:>9.1f} {self.mean_seconds:>7.2f}"
        )
        return header + "\n" + row

    @classmethod
    def from_records(
        cls, records: Sequence[dict], victim: str = "", defense: str = "none",
        mean_seconds: float = float("nan"),
    ) -> "EvaluationReport":
        """Recompute every aggregate (except wall time) from per-instance records."""
        attempted = len(records)
        successes = [r for r in records if r["success"]]
        def mean_of(key):
            return float(np.mean([r["metrics"][key] for r in successes])) if successes else float("nan")
        return cls(
            victim=victim,
            defense=defense,
            attempted=attempted,
            succeeded=len(successes),
            asr=100.0 * len(successes) / attempted if attempted else 0.0,
            mean_d_hausdorff=mean_of("d_hausdorff"),
            mean_d_chamfer=mean_of("d_chamfer"),
            mean_d_norm=mean_of("d_norm"),
            mean_queries=float(np.mean([r["queries"]["total"] for r in successes])) if successes else float("nan"),
            mean_seconds=mean_seconds,
        )


def _failure_record(instance: str, seed: int, reason: str) -> dict:
    return {
        "instance": instance,
        "success": False,
        "status": reason,
        "metrics": {k: float("nan") for k in (
            "d_hausdorff", "d_chamfer", "d_norm", "d_combined", "max_pointwise", "initial_d_norm")},
        "queries": {"generation": 0, "projection": 0, "normal_estimation": 0,
                    "semicircle_search": 0, "total": 0},
        "iterations": 0,
        "seed": seed,
    }


def instance_seed(master_seed: int, index: int) -> int:
    """Stable per-instance seed, independent of worker scheduling."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def evaluate(
    test_clouds: Sequence[PointCloud],
    targets_by_class: Dict[int, Sequence[PointCloud]],
    oracle: HardLabelOracle,
    bank: WeightBank,
    config: AttackConfig,
    victim_name: str = "native",
    defense_name: str = "none",
    workers: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
    limit: Optional[int] = None,
):
    """Attack every correctly classified test instance and aggregate metrics.

    Targets for each instance are the pooled clouds of every other class.
    Instances the oracle misclassifies up front are excluded; attacks that
    abort are recorded as failures, never dropped. Returns
    (EvaluationReport, records, results).
    """
    eligible: List[PointCloud] = []
    for cloud in test_clouds:
        if cloud.label is None:
            raise ValueError(f"test cloud {cloud.name!r} is unlabeled")
        if indicator(oracle, cloud, cloud.label) == -1:
            eligible.append(cloud)
    if not eligible:
        raise RuntimeError("no correctly classified instances to attack")
    if limit is not None:
        eligible = eligible[:limit]

    def one(index_cloud):
        index, cloud = index_cloud
        seed = instance_seed(config.seed, index)
        cfg = replace(config, seed=seed)
        pool = [t for lbl, ts in sorted(targets_by_class.items()) if lbl != cloud.label for t in ts]
        t0 = time.perf_counter()
        try:
            result = run_attack(cloud, pool, oracle, bank, cfg)
            record = result.to_record(cloud.name or f"instance_{index}")
        except GenerationError:
            result = None
            record = _failure_record(cloud.name or f"instance_{index}", seed, "generation_failed")
        except AttackAborted:
            result = None
            record = _failure_record(cloud.name or f"instance_{index}", seed, "aborted")
        return index, result, record, time.perf_counter() - t0

    items = list(enumerate(eligible))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            outcomes = list(pool_exec.map(one, items))
    else:
        outcomes = [one(item) for item in items]
    outcomes.sort(key=lambda o: o[0])

    records = [o[2] for o in outcomes]
    results = [o[1] for o in outcomes]
    seconds = [o[3] for o in outcomes]
    report = EvaluationReport.from_records(
        records, victim=victim_name, defense=defense_name,
        mean_seconds=float(np.mean(seconds)),
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_records(records, out_dir / "results.jsonl")
        for (index, result, record, _), cloud in zip(outcomes, eligible):
            if result is not None and result.success:
                write_ply(result.cloud, out_dir / f"{record['instance']}.ply")
    return report, records, results


def write_records(records: Sequence[dict], path: Union[str, Path]) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path: Union[str, Path]) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
