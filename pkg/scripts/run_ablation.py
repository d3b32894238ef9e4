"""Train ablation variants over seeds on the desk dataset and print seed-mean metrics.

Usage: python scripts/run_ablation.py [--variants full +mma baseline] [--seeds 0 1 2] [--epochs 60] [--set tau=0.5]
"""

import argparse
import json
import logging

from mmaseg.config import TrainConfig
from mmaseg.experiments import DEFAULT_CACHE, SEEDS, aggregate, desk_dataset, known_variants, run_variant


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variants", nargs="+", default=["full", "+mma", "baseline", "full-no-ncw"], choices=known_variants())
    ap.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--cache", default=str(DEFAULT_CACHE))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    data = desk_dataset()
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    if args.set:
        extra = TrainConfig.from_mapping(dict(kv.split("=", 1) for kv in args.set))
        overrides.update({k: getattr(extra, k) for k in (kv.split("=", 1)[0] for kv in args.set)})
    for name in args.variants:
        runs = []
        for seed in args.seeds:
            r = run_variant(name, seed, data, args.cache, progress=lambda row: print(name, seed, row, flush=True), **overrides)
            print(f"{name} seed={seed} miou={r['miou']:.4f} map={r['map']:.4f} ({r['seconds']:.0f}s)", flush=True)
            runs.append(r)
        print(name, json.dumps(aggregate(runs)), flush=True)


if __name__ == "__main__":
    main()
