"""Pretrained vs random init, FT vs FR, and SD-scoped noise augmentation over several seeds.

    python3 scripts/e2e_experiment.py --seeds 0 1 2 --out runs/e2e
"""

import argparse
import json
from pathlib import Path

import torch

from hearthside.experiments import ARMS, ExperimentConfig, median_over, run_seed
from hearthside.nncore import set_deterministic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--arms", nargs="+", default=list(ARMS), choices=ARMS)
    ap.add_argument("--hop", type=float, default=0.2)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    set_deterministic(1)
    cfg = ExperimentConfig(hop_s=args.hop, pretrain_steps=args.steps, arms=tuple(args.arms))
    out = Path(args.out)
    summaries = []
    for seed in args.seeds:
        summaries.append(run_seed(seed, out / f"seed{seed}", cfg, log=lambda s: print(s, flush=True)))
    table = {arm: {cond: {t: median_over(summaries, arm, t, cond) for t in ("sd", "chn", "adu")}
                   for cond in ("clean", "noisy")} for arm in args.arms}
    (out / "medians.json").write_text(json.dumps(table, indent=2) + "\n")
    for arm, row in table.items():
        print(f"{arm:16s} clean " + " ".join(f"{t}={v:.3f}" for t, v in row["clean"].items())
              + "  noisy " + " ".join(f"{t}={v:.3f}" for t, v in row["noisy"].items()))


if __name__ == "__main__":
    torch.set_num_threads(1)
    main()
