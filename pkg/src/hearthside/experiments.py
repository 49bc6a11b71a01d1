"""End-to-end comparison runs on a synthetic corpus.

One seed = synthesize, prepare, pretrain once, then fine-tune several arms
from the same windows and score every arm on the held-out families, clean
and with pink noise added.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .augment import AugmentationPolicy, synthetic_noise_bank
from .evaluation import evaluate
from .model import EncoderConfig
from .pipeline import noisy_copy, prepare, unlabeled_segments
from .synthgen import CorpusConfig, synth_corpus
from .training import PretrainConfig, TrainConfig, finetune, pretrain, select_best_epoch

ARMS = ("pre_FT", "rand_FT", "pre_FR", "pre_FT_noiseSD")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(sample_rate=8000))
    pretrain_steps: int = 2000
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    epochs: int = 10
    hop_s: float = 0.2
    arms: tuple = ARMS
    noise_snr_db: tuple = (0.0, 10.0)  # test-time corruption
    aug_snr_db: tuple = (0.0, 15.0)  # training-time noise augmentation


def _f1s(report) -> dict:
    return {t: report.f1(t) for t in ("sd", "chn", "adu")}


def run_seed(seed: int, workdir, cfg: ExperimentConfig = ExperimentConfig(),
             log: Optional[Callable[[str], None]] = print) -> dict:
    """Run every arm for one seed; returns (and writes) a JSON-able summary."""
    work = Path(workdir)
    log = log or (lambda s: None)
    t0 = time.time()
    corpus_dir = work / "corpus"
    if not (corpus_dir / "manifest.jsonl").exists():
        synth_corpus(cfg.corpus, corpus_dir, seed)
    manifest = corpus_dir / "manifest.jsonl"
    data = prepare(manifest, hop_s=cfg.hop_s, split_seed=seed)
    noisy_test = noisy_copy(data.test, cfg.noise_snr_db, seed=seed)
    out = {"seed": seed, "windows": {"train": len(data.train), "dev": len(data.dev), "test": len(data.test)},
           "test_families": sorted(data.plan.test), "arms": {}}
    log(f"seed {seed}: windows {out['windows']}")

    ckpt = None
    if any(a.startswith("pre") for a in cfg.arms):
        segs = unlabeled_segments(manifest)
        res = pretrain(segs, cfg.encoder, cfg.pretrain_steps, seed, cfg.pretrain)
        ckpt = res.checkpoint
        ckpt.save(work / "encoder.ckpt")
        out["pretrain_loss"] = {"first20": float(np.mean(res.losses[:20])),
                                "last20": float(np.mean(res.losses[-20:]))}
        log(f"seed {seed}: pretrain loss {out['pretrain_loss']}")

    for arm in cfg.arms:
        t = time.time()
        init = None if arm.startswith("rand") else ckpt
        mode = "FR" if "FR" in arm else "FT"
        policy = None
        if arm.endswith("noiseSD"):
            bank = synthetic_noise_bank(data.train[0].sample_rate_hz, seed)
            policy = AugmentationPolicy(("Noise",), "SDOnly", snr_db_range=cfg.aug_snr_db, noise_bank=bank)
        tc = TrainConfig(epochs=cfg.epochs, mode=mode, seed=seed,
                         policy=None if policy is None else policy.to_json())
        model, hist = finetune(data.train, data.dev, tc, init=init, encoder_config=cfg.encoder,
                               policy=policy, run_dir=work / arm)
        out["arms"][arm] = {"clean": _f1s(evaluate(model, data.test)),
                            "noisy": _f1s(evaluate(model, noisy_test)),
                            "best_epoch": select_best_epoch(hist), "seconds": round(time.time() - t, 1)}
        log(f"seed {seed}: {arm} {out['arms'][arm]}")
    out["seconds"] = round(time.time() - t0, 1)
    (work / "summary.json").write_text(json.dumps(out, indent=2, default=str) + "\n", encoding="utf-8")
    return out


def median_over(summaries, arm: str, tier: str = "sd", condition: str = "clean") -> float:
    return float(np.median([s["arms"][arm][condition][tier] for s in summaries]))


def config_json(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))
