"""Contrastive-loss curve of the default encoder on a corpus's unlabeled audio.

    python3 scripts/pretrain_curve.py runs/e2e/seed0/corpus/manifest.jsonl --steps 2000
"""

import argparse
import json

import numpy as np
import torch

from hearthside.corpus import read_manifest, read_wav
from hearthside.model import EncoderConfig
from hearthside.pipeline import unlabeled_segments
from hearthside.training import PretrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("manifest")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--out", default=None, help="write the per-step curve as JSON lines")
    args = ap.parse_args()
    entries = read_manifest(args.manifest)
    _, rate = read_wav(next(e for e in entries if not e.labeled).audio_path)
    segs = unlabeled_segments(entries)
    curve = []

    def progress(d):
        curve.append({k: d[k] for k in ("step", "contrastive", "diversity", "temperature")})
        if d["step"] % 250 == 1 or d["step"] == args.steps:
            print(f"step {d['step']:5d}  contrastive {d['contrastive']:.3f}  diversity {d['diversity']:.3f}",
                  flush=True)

    res = pretrain(segs, EncoderConfig(sample_rate=rate), args.steps, args.seed, PretrainConfig(lr=args.lr),
                   progress=progress)
    print(f"chance level log(K+1) = {np.log(21):.3f}; last-20 mean total loss {np.mean(res.losses[-20:]):.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.writelines(json.dumps(c) + "\n" for c in curve)


if __name__ == "__main__":
    torch.set_num_threads(1)
    main()
