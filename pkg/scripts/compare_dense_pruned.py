"""Run a config with and without pruning over several seeds and tabulate the gap.

    python3 scripts/compare_dense_pruned.py scripts/configs/desk.yaml --seeds 0 1 2 --out runs/compare
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from fedklpr import cli


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = cli.load_config(args.config, env={})
    print("seed  rank1_pruned  rank1_dense  gap_pts  clients>=0.60  upload_reduction")
    for seed in args.seeds:
        pruned_cfg = replace(base, seed=seed)
        dense_cfg = replace(pruned_cfg, prune=replace(base.prune, enabled=False))
        p = cli.run_to_dir(pruned_cfg, args.out / f"seed{seed}" / "pruned", args.workers)
        d = cli.run_to_dir(dense_cfg, args.out / f"seed{seed}" / "dense", args.workers)
        hit = sum(c["pruning_ratio"] >= 0.60 for c in p["clients"])
        saved = 1 - p["total_upload_bytes"] / d["total_upload_bytes"]
        gap = 100 * (d["mean_rank1"] - p["mean_rank1"])
        print(f"{seed:4d}  {p['mean_rank1']:12.4f}  {d['mean_rank1']:11.4f}  {gap:7.2f}"
              f"  {hit:>6d}/{len(p['clients'])}  {saved:16.1%}")


if __name__ == "__main__":
    main()
