"""Run the four training modes over several seeds and tabulate local/global HV.

    python scripts/run_ablation.py --seeds 0,1,2,3,4 --out ablation.json
"""

import argparse
import json
import time

import numpy as np

from hetpfl.config import ExperimentConfig, config_from_dict, load_config, load_datasets
from hetpfl.federated import MODES, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment config (JSON); defaults to the desk-scale synthetic setup")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--modes", default=",".join(MODES))
    ap.add_argument("--eval-points", type=int)
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.eval_points:
        cfg = config_from_dict({**cfg.to_dict(), "eval_points": args.eval_points})
    seeds = [int(s) for s in args.seeds.split(",")]
    results = {}
    for mode in args.modes.split(","):
        rows = []
        for seed in seeds:
            t0 = time.perf_counter()
            art = run_experiment(load_datasets(cfg, seed), cfg.round_config(seed), mode, cfg.eval_points)
            rows.append(
                {
                    "seed": seed,
                    "local_hv": art.mean_local_hv,
                    "global_hv": art.global_hv,
                    "final_val_tch": art.final_val_tch(),
                    "alphas": [c.alpha.tolist() for c in art.clients],
                    "seconds": time.perf_counter() - t0,
                }
            )
            print(f"{mode:<12} seed {seed}: local {rows[-1]['local_hv']:.4f} global {rows[-1]['global_hv']:.4f} "
                  f"val_tch {rows[-1]['final_val_tch']:.4f} ({rows[-1]['seconds']:.0f}s)", flush=True)
        results[mode] = rows

    print(f"\n{'mode':<12} {'local HV':>16} {'global HV':>16} {'val tch @T':>16}")
    for mode, rows in results.items():
        cols = [np.array([r[k] for r in rows]) for k in ("local_hv", "global_hv", "final_val_tch")]
        print(f"{mode:<12} " + " ".join(f"{c.mean():>8.4f}+/-{c.std(ddof=1) if len(c) > 1 else 0:.4f}" for c in cols))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"config_hash": cfg.hash(), "seeds": seeds, "results": results}, f, indent=2)


if __name__ == "__main__":
    main()
