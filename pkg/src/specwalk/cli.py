"""Command-line surface: dataset generation, discriminator and weight training,
attacks, evaluation, and PLY export.

Every verb accepts --config pointing at a flat key=value text file; explicit
flags override file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .attack import AttackConfig, GenerationError, run_attack
from .cloud import read_cloud, write_cloud
from .datagen import SHAPES, SyntheticDatasetSpec, generate_dataset, load_dataset, save_dataset
from .defense import make_defended_oracle
from .evaluate import evaluate, write_records
from .fusion import (
    DiscTrainConfig,
    Discriminator,
    FusionWeights,
    WeightBank,
    WeightTrainConfig,
    fuse_spectra,
    learn_fusion_weights,
    train_discriminator,
)
from .oracle import RemoteOracle, train_native_classifier


def load_config_file(path) -> Dict[str, str]:
    """Flat key = value lines; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _merge(args: argparse.Namespace, defaults: Dict) -> argparse.Namespace:
    """defaults < config file < explicit flags (flags parse with default=None)."""
    file_values = load_config_file(args.config) if args.config else {}
    for key, default in defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_values:
            raw = file_values[key]
            if isinstance(default, bool):
                setattr(args, key, raw.lower() in ("1", "true", "yes", "on"))
            elif isinstance(default, int):
                setattr(args, key, int(raw))
            elif isinstance(default, float):
                setattr(args, key, float(raw))
            else:
                setattr(args, key, raw)
        else:
            setattr(args, key, default)
    return args


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)


ATTACK_DEFAULTS = dict(
    gamma1=2.0, gamma2=0.5, epsilon=0.2, k=10, rounds=100, normal_budget=30.0,
    beta_tolerance=1e-3, angle_tolerance=1e-2, query_cap=30000, target_pool=10,
    probe_scale=1e-2, improvement_tol=1e-4, seed=0,
)


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma1", type=float, default=None)
    p.add_argument("--gamma2", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--normal-budget", dest="normal_budget", type=float, default=None)
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--beta-tolerance", dest="beta_tolerance", type=float, default=None)
    p.add_argument("--angle-tolerance", dest="angle_tolerance", type=float, default=None)
    p.add_argument("--query-cap", dest="query_cap", type=int, default=None)
    p.add_argument("--target-pool", dest="target_pool", type=int, default=None)
    p.add_argument("--probe-scale", dest="probe_scale", type=float, default=None)
    p.add_argument("--improvement-tol", dest="improvement_tol", type=float, default=None)


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        gamma1=args.gamma1, gamma2=args.gamma2, epsilon=args.epsilon, k=args.k,
        rounds=args.rounds, normal_budget=args.normal_budget, cutoff=args.cutoff,
        beta_tolerance=args.beta_tolerance, angle_tolerance=args.angle_tolerance,
        query_cap=args.query_cap, seed=args.seed, target_pool=args.target_pool,
        probe_scale=args.probe_scale, improvement_tol=args.improvement_tol,
    )


def _build_victim(args, train_clouds, manifest):
    if args.victim == "native":
        rotate = bool(manifest.get("spec", {}).get("rotate", False))
        return train_native_classifier(train_clouds, use_aspect=not rotate)
    return RemoteOracle(args.victim)


def _targets_by_class(train_clouds) -> Dict[int, List]:
    by_class: Dict[int, List] = {}
    for cloud in train_clouds:
        by_class.setdefault(cloud.label, []).append(cloud)
    return by_class


def cmd_gen_data(args) -> int:
    args = _merge(args, dict(classes=",".join(SHAPES), points=256, instances=25,
                             jitter=0.02, rotate=False, seed=0))
    spec = SyntheticDatasetSpec(
        classes=tuple(args.classes.split(",")), n_points=args.points,
        instances=args.instances, jitter=args.jitter, rotate=args.rotate, seed=args.seed,
    )
    train, test = generate_dataset(spec)
    save_dataset(train, test, args.out, spec)
    print(f"wrote {len(train)} train / {len(test)} test clouds to {args.out}")
    return 0


def _random_fused_negatives(sources, others, k, rng):
    negatives = []
    for i, src in enumerate(sources):
        tgt = others[int(rng.integers(len(others)))]
        weights = FusionWeights(float(rng.uniform()), float(rng.uniform()), class_id=-1)
        negatives.append(fuse_spectra(src, tgt, weights, k=k))
    return negatives


def cmd_train_disc(args) -> int:
    args = _merge(args, dict(epochs=100, lr=0.002, batch_size=16, k=10, seed=0, shared=False))
    train, _, _ = load_dataset(args.data)
    by_class = _targets_by_class(train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    cfg = DiscTrainConfig(epochs=args.epochs, learning_rate=args.lr,
                          batch_size=args.batch_size, seed=args.seed)
    class_ids = sorted(by_class) if not args.shared else [None]
    for cid in class_ids:
        if cid is None:
            positives = train
            others = train
        else:
            positives = by_class[cid]
            others = [c for c in train if c.label != cid]
        negatives = _random_fused_negatives(positives, others, args.k, rng)
        disc = train_discriminator(positives, negatives, cfg)
        name = "disc_shared.bin" if cid is None else f"disc_class{cid}.bin"
        disc.save(out / name)
        print(f"{name}: final loss {disc.training_loss[-1]:.4f}")
    return 0


def cmd_learn_weights(args) -> int:
    args = _merge(args, dict(epochs=50, lr=0.001, entries=3, pairs=4, k=10,
                             seed=0, shared=False))
    train, _, _ = load_dataset(args.data)
    by_class = _targets_by_class(train)
    bank = WeightBank(provenance=dict(epochs=args.epochs, learning_rate=args.lr,
                                      seed=args.seed, entries=args.entries))
    disc_dir = Path(args.disc)
    cfg = WeightTrainConfig(epochs=args.epochs, learning_rate=args.lr,
                            pairs=args.pairs, k=args.k, seed=args.seed)
    for cid in sorted(by_class):
        disc_path = disc_dir / ("disc_shared.bin" if args.shared else f"disc_class{cid}.bin")
        disc = Discriminator.load(disc_path)
        sources = by_class[cid]
        others = [c for c in train if c.label != cid]
        for entry in range(args.entries):
            targets = others[entry::args.entries] or others
            weights = learn_fusion_weights(cid, sources, targets, disc, cfg)
            bank.add(weights)
        alphas = [(w.alpha_low, w.alpha_high) for w in bank.entries[cid]]
        print(f"class {cid}: {alphas}")
    bank.save(args.out)
    print(f"wrote weight bank to {args.out}")
    return 0


def cmd_attack(args) -> int:
    args = _merge(args, dict(defense="none", **ATTACK_DEFAULTS))
    train, test, manifest = load_dataset(args.data)
    oracle = make_defended_oracle(_build_victim(args, train, manifest), args.defense,
                                  seed=args.seed)
    bank = WeightBank.load(args.bank)
    by_name = {c.name: c for c in test}
    if args.instance not in by_name:
        print(f"unknown instance {args.instance!r}; choose from {sorted(by_name)[:10]}...",
              file=sys.stderr)
        return 2
    source = by_name[args.instance]
    targets = [c for c in train if c.label != source.label]
    cfg = _attack_config(args)
    try:
        result = run_attack(source, targets, oracle, bank, cfg)
    except GenerationError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = result.to_record(args.instance)
    write_records([record], out / f"{args.instance}.jsonl")
    write_cloud(result.cloud, out / f"{args.instance}.ply")
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    args = _merge(args, dict(defense="none", defense_mode="per-query", workers=1,
                             limit=0, **ATTACK_DEFAULTS))
    train, test, manifest = load_dataset(args.data)
    victim = _build_victim(args, train, manifest)
    if args.defense_mode == "per-query":
        oracle = make_defended_oracle(victim, args.defense, seed=args.seed)
        post = None
    else:
        oracle = victim
        post = make_defended_oracle(victim, args.defense, seed=args.seed)
    bank = WeightBank.load(args.bank)
    cfg = _attack_config(args)
    report, records, results = evaluate(
        test, _targets_by_class(train), oracle, bank, cfg,
        victim_name=args.victim if args.victim == "native" else "remote",
        defense_name=args.defense, workers=args.workers,
        out_dir=args.out, limit=args.limit or None,
    )
    if post is not None:
        from .evaluate import EvaluationReport
        from .oracle import indicator  # post-hoc single application

        by_name = {c.name: c for c in test}
        for record, result in zip(records, results):
            if result is not None and result.success:
                src = by_name[record["instance"]]
                record["success"] = indicator(post, result.cloud, src.label) == 1
        write_records(records, Path(args.out) / "results.jsonl")
        report = EvaluationReport.from_records(
            records, victim=report.victim, defense=f"{args.defense} (post-hoc)",
            mean_seconds=report.mean_seconds)
    print(report.table())
    return 0


def cmd_export_ply(args) -> int:
    cloud = read_cloud(args.infile)
    write_cloud(cloud, args.outfile)
    print(f"{args.infile} -> {args.outfile} ({cloud.n} points)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specwalk",
                                     description="hard-label point-cloud attack engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--rotate", action="store_const", const=True, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-disc", help="train benign-vs-fused discriminators")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--shared", action="store_const", const=True, default=None,
                   help="train one discriminator over all classes")
    _add_common(p)
    p.set_defaults(func=cmd_train_disc)

    p = sub.add_parser("learn-weights", help="learn fusion weights into a bank")
    p.add_argument("--data", required=True)
    p.add_argument("--disc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--entries", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--shared", action="store_const", const=True, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_learn_weights)

    p = sub.add_parser("attack", help="attack a single test instance")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--victim", default="native", help="'native' or an http endpoint")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--defense", choices=["none", "sor", "srs30", "srs50"], default=None)
    _add_attack_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="attack the whole eligible test split")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--victim", default="native")
    p.add_argument("--out", required=True)
    p.add_argument("--defense", choices=["none", "sor", "srs30", "srs50"], default=None)
    p.add_argument("--defense-mode", dest="defense_mode",
                   choices=["per-query", "post-hoc"], default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    _add_attack_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-ply", help="convert between XYZ and PLY")
    p.add_argument("infile")
    p.add_argument("outfile")
    p.set_defaults(func=cmd_export_ply)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
