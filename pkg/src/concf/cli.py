"""Command-line pipeline: prepare data, train, evaluate, analyze overlap.

    concf prepare interactions.txt --out-dir runs/
    concf train runs/split.json --set mode=single --set heads=A --seeds 0,1
    concf evaluate runs/run-seed0/checkpoint.npz --split runs/split.json \
        --queue runs/run-seed0/queue.npz --top-n 20,50
    concf analyze ckpt1.npz ckpt2.npz --split runs/split.json

Training hyperparameters come from an optional "key = value" config file
plus repeatable --set overrides; defaults reproduce the standard recipe
(dim 64, lr 0.01, batch 1024, alpha 0.01, T 10, N 50, period 20, queue 5).
The output directory falls back to $CONCF_OUT_DIR, then the cwd.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .consensus import ConsensusError, ConsensusSettings, load_queue, save_queue
from .data import (
    DataError,
    load_interactions,
    read_split_manifest,
    split_user_history,
    write_split_manifest,
)
from .evaluation import (
    complementary_hit_ratio,
    evaluate_ranking,
    hit_set,
    per_matrix,
    rank_all_users,
    user_chr_cdf,
    write_cdf_csv,
    write_metrics_json,
    write_per_matrix_csv,
)
from .model import ModelError, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainerError, infer_consensus, train

ENV_OUT_DIR = "CONCF_OUT_DIR"


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        _limit_threads(args.threads)
    try:
        return args.func(args)
    except (DataError, ModelError, ConsensusError, TrainerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concf",
        description="multi-objective collaborative filtering with consensus learning",
    )
    parser.add_argument(
        "--threads", type=int, default=0,
        help="cap BLAS/OpenMP worker threads (0 = leave unchanged)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load interactions, split, write manifest")
    p.add_argument("interactions", help="text file with one 'user<sep>item' per line")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.6,0.2,0.2",
                   help="train,val,test fractions (default 0.6,0.2,0.2)")
    p.add_argument("--min-interactions", type=int, default=10,
                   help="users below this keep all pairs in train")
    p.add_argument("--delimiter", default=None, help="field separator (default: auto)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one run per seed from a split manifest")
    p.add_argument("split", help="split manifest from `concf prepare`")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--mode", choices=("concf", "single"), default=None)
    p.add_argument("--heads", default=None, help="head subset, e.g. A,B,C,D,E or A")
    p.add_argument("--seeds", default="0", help="comma-separated seeds, one run each")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics for trained checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--split", required=True)
    p.add_argument("--queue", default=None, help="queue dump for consensus metrics")
    p.add_argument("--consensus", action="store_true",
                   help="require consensus metrics (error without --queue)")
    p.add_argument("--r-only", action="store_true",
                   help="rank-only consensus (drop the consistency term)")
    p.add_argument("--top-n", default="20,50", help="cutoffs, e.g. 20,50")
    p.add_argument("--on", choices=("val", "test"), default="test")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="hit overlap: exclusive ratios, CHR, CDFs")
    p.add_argument("checkpoints", nargs="+",
                   help="model family; multi-head checkpoints expand per head")
    p.add_argument("--split", required=True)
    p.add_argument("--top-n", type=int, default=50)
    p.add_argument("--on", choices=("val", "test"), default="test")
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass  # env vars still apply to pools initialized later


def _out_dir(args) -> Path:
    out = args.out_dir or os.environ.get(ENV_OUT_DIR) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_prepare(args) -> int:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    data = load_interactions(args.interactions, delimiter=args.delimiter)
    split = split_user_history(
        data, ratios=ratios, min_interactions=args.min_interactions, seed=args.seed
    )
    out = _out_dir(args)
    manifest = out / "split.json"
    write_split_manifest(split, manifest)
    stats = {
        "users": data.num_users,
        "items": data.num_items,
        "interactions": data.num_pairs,
        "density_percent": round(100.0 * data.density(), 3),
        "train_pairs": split.train.num_pairs,
        "val_pairs": split.val.num_pairs,
        "test_pairs": split.test.num_pairs,
        "split_seed": args.seed,
    }
    write_metrics_json(out / "stats.json", stats)
    print(
        f"{data.num_users} users, {data.num_items} items, "
        f"{data.num_pairs} interactions, {100.0 * data.density():.3f}% density"
    )
    print(f"wrote {manifest}")
    return 0


def _parse_config_file(path) -> dict:
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _build_config(args, seed: int) -> TrainConfig:
    mapping = _parse_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    if args.mode:
        mapping["mode"] = args.mode
    if args.heads:
        mapping["heads"] = args.heads
    mapping["seed"] = seed
    return TrainConfig.from_mapping(mapping)


def cmd_train(args) -> int:
    split = read_split_manifest(args.split)
    seeds = [int(s) for s in args.seeds.replace(",", " ").split()]
    if not seeds:
        raise ValueError("--seeds must name at least one seed")
    out = _out_dir(args)
    best_metrics = []
    for seed in seeds:
        config = _build_config(args, seed)
        result = train(config, split)
        run_dir = out / f"run-{config.mode}-seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        extra = {
            "config": asdict(config),
            "best_epoch": result.history.best_epoch,
            "best_metric": _none_if_nan(result.history.best_metric),
        }
        save_checkpoint(run_dir / "checkpoint.npz", result.params, extra=extra)
        if result.queue.snapshots:
            save_queue(run_dir / "queue.npz", result.queue)
        result.history.to_csv(run_dir / "history.csv")
        result.history.to_json(run_dir / "history.json")
        metric = _none_if_nan(result.history.best_metric)
        best_metrics.append(metric)
        shown = "n/a" if metric is None else f"{metric:.4f}"
        print(
            f"seed {seed}: stopped at epoch {result.history.stopped_epoch}, "
            f"best epoch {result.history.best_epoch}, "
            f"val recall@{config.top_n} {shown}  -> {run_dir}"
        )
    known = [m for m in best_metrics if m is not None]
    summary = {
        "seeds": seeds,
        "best_val_recall": best_metrics,
        "mean": float(np.mean(known)) if known else None,
        "std": float(np.std(known)) if known else None,
    }
    write_metrics_json(out / "summary.json", summary)
    if known:
        print(f"mean best val recall {summary['mean']:.4f}, std {summary['std']:.4f}")
    return 0


def _none_if_nan(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else float(x)


def _checkpoint_settings(extra: dict, top_n: int, r_only: bool) -> ConsensusSettings:
    cfg = extra.get("config", {})
    return ConsensusSettings(
        top_n=top_n,
        temperature=cfg.get("temperature", 10.0),
        snapshot_size=max(cfg.get("snapshot_size", 300), top_n),
        use_consistency=False if r_only else cfg.get("use_consistency", True),
    )


def cmd_evaluate(args) -> int:
    if args.consensus and not args.queue:
        raise ValueError("--consensus requires --queue (the training queue dump)")
    split = read_split_manifest(args.split)
    held_out = split.test if args.on == "test" else split.val
    cutoffs = sorted({int(n) for n in args.top_n.replace(",", " ").split()})
    if not cutoffs:
        raise ValueError("--top-n must name at least one cutoff")
    max_n = cutoffs[-1]
    out = _out_dir(args)
    queue = load_queue(args.queue) if args.queue else None
    for ckpt_path in args.checkpoints:
        params, _, extra = load_checkpoint(ckpt_path)
        rankings = {
            h: rank_all_users(params, h, split.train, n=max_n) for h in params.heads
        }
        if queue is not None:
            settings = _checkpoint_settings(extra, max_n, args.r_only)
            tag = "consensus_r" if args.r_only else "consensus"
            rankings[tag] = infer_consensus(
                params, queue, split.train, top_n=max_n, settings=settings
            )
        rows = []
        for n in cutoffs:
            for tag, topn in rankings.items():
                metrics = evaluate_ranking(topn[:, :n], held_out)
                rows.append({"model": tag, "n": n, "recall": metrics.recall,
                             "ndcg": metrics.ndcg})
        stem = Path(ckpt_path).stem
        payload = {
            "checkpoint": str(ckpt_path),
            "split": str(args.split),
            "evaluated_on": args.on,
            "best_epoch": extra.get("best_epoch"),
            "seed": extra.get("config", {}).get("seed"),
            "results": rows,
        }
        if args.format == "json":
            target = out / f"metrics-{stem}.json"
            write_metrics_json(target, payload)
        else:
            target = out / f"metrics-{stem}.csv"
            with open(target, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["model", "n", "recall", "ndcg"])
                for row in rows:
                    writer.writerow(
                        [row["model"], row["n"], f"{row['recall']:.6f}", f"{row['ndcg']:.6f}"]
                    )
        print(f"{stem} ({args.on}):")
        for row in rows:
            print(
                f"  {row['model']:<12} R@{row['n']:<3} {row['recall']:.4f}   "
                f"N@{row['n']:<3} {row['ndcg']:.4f}"
            )
        print(f"wrote {target}")
    return 0


def cmd_analyze(args) -> int:
    split = read_split_manifest(args.split)
    held_out = split.test if args.on == "test" else split.val
    out = _out_dir(args)
    hit_sets = []
    for ckpt_path in args.checkpoints:
        params, _, _ = load_checkpoint(ckpt_path)
        stem = Path(ckpt_path).stem
        for h in params.heads:
            tag = f"{stem}:{h}" if len(params.heads) > 1 else stem
            topn = rank_all_users(params, h, split.train, n=args.top_n)
            hit_sets.append(hit_set(tag, topn, held_out))
    tags, matrix = per_matrix(hit_sets)
    write_per_matrix_csv(out / "per-matrix.csv", tags, matrix)
    chr_rows = []
    for hs in hit_sets:
        value = complementary_hit_ratio(hs, hit_sets)
        chr_rows.append({"model": hs.tag, "chr": value})
        if len(hit_sets) >= 2:
            cdf = user_chr_cdf(hs, hit_sets)
            write_cdf_csv(out / f"chr-cdf-{hs.tag.replace(':', '-')}.csv", cdf)
    if args.format == "json":
        write_metrics_json(
            out / "chr.json",
            {"family_size": len(hit_sets), "top_n": args.top_n, "results": chr_rows},
        )
    else:
        with open(out / "chr.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "chr"])
            for row in chr_rows:
                value = "" if row["chr"] is None else f"{row['chr']:.6f}"
                writer.writerow([row["model"], value])
    print(f"family of {len(hit_sets)} models; hit overlap on {args.on} top-{args.top_n}")
    for row in chr_rows:
        shown = "n/a" if row["chr"] is None else f"{row['chr']:.4f}"
        print(f"  CHR {row['model']:<20} {shown}")
    print(f"wrote {out / 'per-matrix.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
