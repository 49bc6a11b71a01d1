"""Command-line entry point: ``hearthside <subcommand> [flags]``.

Configuration precedence is built-in defaults, then ``--config`` JSON, then
explicit flags. The effective configuration is written to ``config.json`` in
every output directory. Progress goes to stderr as JSON lines, a short human
summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    dest: str
    type: Any
    default: Any
    help: str
    source: str = "artifact choice"
    required: bool = False


def _env_seed() -> int:
    return int(os.environ.get("HEARTHSIDE_SEED", "0"))


def _env_cache() -> Optional[str]:
    return os.environ.get("HEARTHSIDE_CACHE") or None


COMMON = [
    Opt("config", str, None, "JSON file of flag values (defaults < config file < flags)"),
    Opt("deterministic", bool, False, "single-thread, deterministic numerics"),
    Opt("jobs", int, 1, "worker processes for data stages"),
]

COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", str, None, "output corpus directory", required=True),
        Opt("seed", int, None, "corpus seed (env HEARTHSIDE_SEED)"),
        Opt("families", int, 8, "number of families"),
        Opt("out_families", int, 0, "how many of them are out-of-domain"),
        Opt("labeled_minutes", float, 30.0, "total labeled audio"),
        Opt("unlabeled_minutes", float, 120.0, "total unlabeled audio"),
        Opt("rate", int, 8000, "sample rate in Hz"),
        Opt("overlap", float, 0.05, "probability a vocalization overlaps another speaker"),
        Opt("tilt", float, -4.0, "out-of-domain spectral tilt, dB/octave"),
    ],
    "prepare": [
        Opt("manifest", str, None, "corpus manifest JSONL", required=True),
        Opt("out", str, None, "output directory for window lists", required=True),
        Opt("gate", bool, True, "energy-gate out-of-domain speech windows at the in-domain CHN minimum",
            "paper"),
        Opt("hop", float, 0.2, "window hop in seconds", "paper: 2 s windows every 0.2 s"),
        Opt("split_seed", int, None, "leave-one-family-out split seed (env HEARTHSIDE_SEED)"),
        Opt("n_dev", int, 1, "families held out for dev"),
    ],
    "pretrain": [
        Opt("manifest", str, None, "corpus manifest JSONL (unlabeled entries are used)", required=True),
        Opt("out", str, None, "run directory", required=True),
        Opt("steps", int, 2000, "optimizer steps"),
        Opt("batch_size", int, 4, "crops per step"),
        Opt("crop", float, 2.0, "crop length in seconds"),
        Opt("lr", float, 5e-4, "peak learning rate (linear warmup then decay)"),
        Opt("layers", int, 4, "transformer layers (12 at full scale)", "paper scale 12; toy 4"),
        Opt("dim", int, 96, "model dimension (768 at full scale)", "paper scale 768; toy 96"),
        Opt("seed", int, None, "seed (env HEARTHSIDE_SEED)"),
        Opt("families", str, None, "comma-separated family ids to draw unlabeled audio from"),
    ],
    "finetune": [
        Opt("train", str, None, "training windows JSONL", required=True),
        Opt("dev", str, None, "dev windows JSONL", required=True),
        Opt("out", str, None, "run directory", required=True),
        Opt("init", str, None, "pretrained encoder checkpoint (omit for random init)"),
        Opt("mode", str, "FT", "FT fine-tunes encoder and heads, FR freezes the encoder", "paper"),
        Opt("epochs", int, 10, "training epochs", "paper: 10 epochs"),
        Opt("batch_size", int, 32, "batch size", "paper: batch size 32"),
        Opt("lr_heads", float, 1e-4, "initial head learning rate", "paper: 1e-4"),
        Opt("lr_encoder", float, 1e-5, "initial encoder learning rate", "paper: 1e-5"),
        Opt("feature_mode", str, "WeightedAll", "LastLayer or WeightedAll layer fusion", "paper"),
        Opt("domain_tagging", str, "None", "None, OneHotEmbedding or MultiTask", "paper"),
        Opt("spk_emb", bool, False, "concatenate speaker embeddings on the vocalization tiers", "paper"),
        Opt("policy", str, None, "augmentation policy JSON"),
        Opt("layers", int, 4, "transformer layers for random init"),
        Opt("dim", int, 96, "model dimension for random init"),
        Opt("seed", int, None, "seed (env HEARTHSIDE_SEED)"),
        Opt("cache", str, None, "frozen-feature cache directory (env HEARTHSIDE_CACHE)"),
    ],
    "evaluate": [
        Opt("model", str, None, "model checkpoint or best.ckpt pointer", required=True),
        Opt("data", str, None, "windows JSONL to score", required=True),
        Opt("out", str, None, "output directory (default: <model dir>/eval)"),
        Opt("spk_embedder", str, None, "speaker embedder checkpoint, if the model uses one"),
        Opt("plots", bool, True, "write SVG plots"),
        Opt("noise_snr", float, None, "corrupt test audio with pink noise at 0..SNR dB"),
        Opt("seed", int, None, "seed for test corruption (env HEARTHSIDE_SEED)"),
        Opt("strict", bool, False, "average F1 over all classes, not only occurring ones"),
    ],
    "augment-preview": [
        Opt("data", str, None, "windows JSONL", required=True),
        Opt("policy", str, None, "augmentation policy JSON", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("n", int, 3, "number of windows to preview"),
        Opt("seed", int, None, "seed (env HEARTHSIDE_SEED)"),
    ],
    "kappa": [
        Opt("a", str, None, "first coder's annotation TSV", required=True),
        Opt("b", str, None, "second coder's annotation TSV", required=True),
        Opt("level", str, "full", "full, speaker or voc"),
        Opt("frame", float, 0.2, "frame length in seconds", "paper: 0.2 s frames"),
        Opt("duration", float, None, "recording duration (default: last annotation end)"),
    ],
    "report": [
        Opt("runs", str, None, "comma-separated evaluation or run directories", required=True),
        Opt("out", str, None, "output directory", required=True),
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {v}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hearthside", description="Family-audio speaker and vocalization pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} stage")
        for o in opts + COMMON:
            flag = "--" + o.dest.replace("_", "-")
            default = "required" if o.required else o.default
            text = f"{o.help} [default: {default}; {o.source}]"
            if o.type is bool:
                p.add_argument(flag, dest=o.dest, action=argparse.BooleanOptionalAction, default=None,
                               help=text)
            else:
                p.add_argument(flag, dest=o.dest, type=o.type, default=None, help=text)
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    opts = COMMANDS[command] + COMMON
    cfg = {o.dest: o.default for o in opts}
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for o in opts:
        v = getattr(ns, o.dest, None)
        if v is not None:
            cfg[o.dest] = v
    for o in opts:
        if o.required and cfg[o.dest] is None:
            raise ValidationError(f"--{o.dest.replace('_', '-')} is required")
        if cfg[o.dest] is not None and o.type is not bool:
            cfg[o.dest] = o.type(cfg[o.dest])
        elif o.type is bool:
            cfg[o.dest] = _bool(cfg[o.dest])
    for key in ("seed", "split_seed"):
        if key in cfg and cfg[key] is None:
            cfg[key] = _env_seed()
    if "cache" in cfg and cfg["cache"] is None:
        cfg["cache"] = _env_cache()
    return cfg


class Run:
    """Output directory with config.json and a JSON-lines log mirrored to stderr."""

    def __init__(self, out, command: str, cfg: dict):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(
            json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        self.log_path = self.dir / f"{command}.log.jsonl"
        self.log_path.write_text("", encoding="utf-8")

    def emit(self, event: dict) -> None:
        line = json.dumps(event, sort_keys=True, default=float)
        print(line, file=sys.stderr, flush=True)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def _require(path, what):
    if path is None or not Path(path).exists():
        raise ValidationError(f"{what} not found: {path}")


# --------------------------------------------------------------- commands


def cmd_synth(cfg):
    from .synthgen import CorpusConfig, synth_corpus

    run = Run(cfg["out"], "synth", cfg)
    cc = CorpusConfig(n_families=cfg["families"], out_families=cfg["out_families"],
                      labeled_minutes=cfg["labeled_minutes"], unlabeled_minutes=cfg["unlabeled_minutes"],
                      sample_rate=cfg["rate"], overlap_prob=cfg["overlap"], tilt_db_per_octave=cfg["tilt"])
    entries = synth_corpus(cc, cfg["out"], cfg["seed"])
    run.emit({"event": "synth_done", "recordings": len(entries)})
    print(f"wrote {len(entries)} recordings to {cfg['out']}/manifest.jsonl")


def cmd_prepare(cfg):
    from .pipeline import prepare
    from .windowing import export_windows

    _require(cfg["manifest"], "manifest")
    run = Run(cfg["out"], "prepare", cfg)
    data = prepare(cfg["manifest"], hop_s=cfg["hop"], gate=cfg["gate"], split_seed=cfg["split_seed"],
                   n_dev=cfg["n_dev"], jobs=cfg["jobs"])
    out = run.dir
    export_windows(out / "windows.jsonl", data.dataset.windows)
    for name, ws in (("train", data.train), ("dev", data.dev), ("test", data.test)):
        export_windows(out / f"{name}.jsonl", ws)
    (out / "split.json").write_text(json.dumps(data.plan.to_json(), indent=2) + "\n", encoding="utf-8")
    counts = {"kept": len(data.dataset), **dict(sorted(data.dataset.counts.items())),
              "threshold": data.dataset.threshold,
              "train": len(data.train), "dev": len(data.dev), "test": len(data.test)}
    (out / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.emit({"event": "prepare_done", **counts})
    print(f"{counts['kept']} windows kept; train/dev/test = {counts['train']}/{counts['dev']}/{counts['test']}")


def cmd_pretrain(cfg):
    from .corpus import read_manifest
    from .model import EncoderConfig
    from .pipeline import unlabeled_segments
    from .training import PretrainConfig, pretrain

    _require(cfg["manifest"], "manifest")
    run = Run(cfg["out"], "pretrain", cfg)
    entries = read_manifest(cfg["manifest"])
    fams = set(cfg["families"].split(",")) if cfg["families"] else None
    unl = [e for e in entries if not e.labeled]
    if not unl:
        raise ValidationError("manifest has no unlabeled recordings")
    from .corpus import read_wav

    _, rate = read_wav(unl[0].audio_path)
    segs = unlabeled_segments(entries, families=fams)
    enc_cfg = EncoderConfig(layers=cfg["layers"], dim=cfg["dim"], sample_rate=rate)
    tc = PretrainConfig(batch_size=cfg["batch_size"], crop_s=cfg["crop"], lr=cfg["lr"])
    res = pretrain(segs, enc_cfg, cfg["steps"], cfg["seed"], tc, progress=run.emit)
    res.checkpoint.save(run.dir / "encoder.ckpt")
    with open(run.dir / "loss_curve.jsonl", "w", encoding="utf-8") as fh:
        for i, v in enumerate(res.losses, 1):
            fh.write(json.dumps({"step": i, "loss": v}) + "\n")
    final = float(np.mean(res.losses[-20:])) if res.losses else None
    print(f"pretrained {cfg['steps']} steps on {len(segs)} segments; final loss {final}")


def cmd_finetune(cfg):
    from .augment import load_policy
    from .model import EncoderConfig
    from .training import Checkpoint, TrainConfig, finetune, train_speaker_embedder, encoder_checkpoint
    from .windowing import load_windows

    _require(cfg["train"], "train windows")
    _require(cfg["dev"], "dev windows")
    train = load_windows(cfg["train"])
    dev = load_windows(cfg["dev"])
    if not train:
        raise ValidationError("training window list is empty")
    rate = train[0].sample_rate_hz
    run = Run(cfg["out"], "finetune", cfg)
    init = None
    if cfg["init"]:
        _require(cfg["init"], "init checkpoint")
        init = Checkpoint.load(cfg["init"])
    policy = None
    policy_json = None
    if cfg["policy"]:
        _require(cfg["policy"], "policy")
        policy = load_policy(cfg["policy"], rate, cfg["seed"])
        policy_json = policy.to_json()
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], mode=cfg["mode"],
                     feature_mode=cfg["feature_mode"], domain_tagging=cfg["domain_tagging"],
                     use_spk_emb=cfg["spk_emb"], policy=policy_json, seed=cfg["seed"],
                     lr_heads=cfg["lr_heads"], lr_encoder=cfg["lr_encoder"])
    emb = None
    if tc.use_spk_emb:
        emb = train_speaker_embedder(train, seed=cfg["seed"])
        from .nncore import save_checkpoint

        save_checkpoint(run.dir / "speaker_embedder.ckpt", dict(emb.state_dict()),
                        {"kind": "speaker_embedder", "emb_dim": emb.emb_dim, "rate": emb.rate,
                         "n_speakers": emb.classifier.out_features})
    enc_cfg = EncoderConfig(layers=cfg["layers"], dim=cfg["dim"], sample_rate=rate)
    model, history = finetune(train, dev, tc, init=init, encoder_config=enc_cfg, policy=policy,
                              run_dir=run.dir, spk_embedder=emb, cache_dir=cfg["cache"],
                              progress=run.emit)
    # the run directory's config.json is rewritten by finetune; keep the flag view alongside
    (run.dir / "cli_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    best = (run.dir / "best.ckpt").read_text().strip()
    print(f"best epoch {best}; dev averages {[round(a, 4) for a in history.averages]}")


def _load_spk_embedder(path):
    import torch

    from .model import SpeakerEmbedder
    from .nncore import load_checkpoint

    tensors, meta = load_checkpoint(path)
    emb = SpeakerEmbedder(meta["emb_dim"], meta["rate"], n_speakers=meta["n_speakers"])
    emb.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    emb.eval()
    return emb


def cmd_evaluate(cfg):
    from .evaluation import evaluate, plot_report
    from .pipeline import noisy_copy
    from .training import embed_windows, load_model, resolve_checkpoint
    from .windowing import load_windows

    _require(cfg["model"], "model checkpoint")
    _require(cfg["data"], "window list")
    model = load_model(cfg["model"])
    windows = load_windows(cfg["data"])
    if not windows:
        raise ValidationError("window list is empty")
    if cfg["noise_snr"] is not None:
        windows = noisy_copy(windows, (0.0, cfg["noise_snr"]), cfg["seed"])
    spk = None
    if model.head_config.use_spk_emb:
        path = cfg["spk_embedder"] or resolve_checkpoint(cfg["model"]).parent.parent / "speaker_embedder.ckpt"
        _require(path, "speaker embedder")
        spk = embed_windows(_load_spk_embedder(path), windows)
    out = cfg["out"] or str(Path(cfg["model"]).parent / "eval")
    run = Run(out, "evaluate", cfg)
    report = evaluate(model, windows, strict=cfg["strict"], spk_emb=spk)
    report.save(run.dir / "report.json")
    report.export_confusions(run.dir)
    if cfg["plots"]:
        plot_report(report, run.dir)
    f1 = report.to_json()["macro_f1"]
    run.emit({"event": "evaluate_done", **f1})
    print(" ".join(f"{k.upper()}={'null' if v is None else f'{v:.4f}'}" for k, v in f1.items()))


def cmd_augment_preview(cfg):
    from .augment import apply_policy, load_policy
    from .corpus import write_wav
    from .windowing import load_windows

    _require(cfg["data"], "window list")
    _require(cfg["policy"], "policy")
    windows = load_windows(cfg["data"])
    if not windows:
        raise ValidationError("window list is empty")
    run = Run(cfg["out"], "augment-preview", cfg)
    policy = load_policy(cfg["policy"], windows[0].sample_rate_hz, cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    picks = sorted(rng.choice(len(windows), size=min(cfg["n"], len(windows)), replace=False))
    index = []
    for k in picks:
        w = windows[k]
        copies = apply_policy(w, policy, cfg["seed"])
        names = ["original"] + list(policy.techniques)
        for name, (cw, mask) in zip(names, copies):
            fn = f"{w.recording_id}_{w.start_s:.1f}_{name}.wav"
            write_wav(run.dir / fn, np.clip(cw.samples, -1, 1), w.sample_rate_hz)
            index.append({"file": fn, "technique": name, "tier_mask": list(mask.as_tuple())})
    (run.dir / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(index)} preview clips to {run.dir}")


def cmd_kappa(cfg):
    from .corpus import (
        FrameLabelSequence,
        cohen_kappa,
        framewise_labels,
        group_by_recording,
        parse_annotation_file,
        project_labels,
    )

    _require(cfg["a"], "annotation file")
    _require(cfg["b"], "annotation file")
    if cfg["level"] not in ("full", "speaker", "voc"):
        raise ValidationError("--level must be full, speaker or voc")
    ga = group_by_recording(parse_annotation_file(Path(cfg["a"]).read_text(encoding="utf-8")))
    gb = group_by_recording(parse_annotation_file(Path(cfg["b"]).read_text(encoding="utf-8")))
    la, lb = [], []
    for rec in sorted(set(ga) | set(gb)):
        aa, bb = ga.get(rec, []), gb.get(rec, [])
        dur = cfg["duration"] or max(a.end_s for a in aa + bb)
        fa = project_labels(framewise_labels(aa, dur, cfg["frame"]), cfg["level"])
        fb = project_labels(framewise_labels(bb, dur, cfg["frame"]), cfg["level"])
        la.extend(fa.labels)
        lb.extend(fb.labels)
    k = cohen_kappa(FrameLabelSequence(tuple(la), cfg["frame"]), FrameLabelSequence(tuple(lb), cfg["frame"]))
    print(json.dumps({"event": "kappa", "kappa": k, "frames": len(la)}), file=sys.stderr)
    print(f"{k:.6g}")


def cmd_report(cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Run(cfg["out"], "report", cfg)
    rows = []
    for d in cfg["runs"].split(","):
        d = Path(d)
        rep = d / "report.json" if (d / "report.json").exists() else d / "eval" / "report.json"
        hist = d / "history.jsonl"
        row = {"run": str(d)}
        if rep.exists():
            row["macro_f1"] = json.loads(rep.read_text())["macro_f1"]
        if hist.exists():
            row["dev_average"] = [json.loads(l)["dev_average"] for l in hist.read_text().splitlines() if l]
        if len(row) == 1:
            raise ValidationError(f"{d}: no report.json or history.jsonl")
        rows.append(row)
    (run.dir / "summary.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    meta = {"Date": None, "Creator": None}
    with_f1 = [r for r in rows if "macro_f1" in r]
    if with_f1:
        fig, ax = plt.subplots(figsize=(6, 3))
        tiers = ["sd", "chn", "adu"]
        width = 0.8 / len(with_f1)
        for i, r in enumerate(with_f1):
            ax.bar(np.arange(3) + i * width, [r["macro_f1"][t] or 0 for t in tiers], width,
                   label=Path(r["run"]).name)
        ax.set_xticks(np.arange(3) + 0.4 - width / 2, [t.upper() for t in tiers])
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(run.dir / "f1_by_run.svg", format="svg", metadata=meta)
        plt.close(fig)
    with_hist = [r for r in rows if "dev_average" in r]
    if with_hist:
        fig, ax = plt.subplots(figsize=(5, 3))
        for r in with_hist:
            ax.plot(range(1, len(r["dev_average"]) + 1), r["dev_average"], marker="o",
                    label=Path(r["run"]).name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("dev average macro F1")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(run.dir / "dev_curves.svg", format="svg", metadata=meta)
        plt.close(fig)
    for r in rows:
        f1 = r.get("macro_f1", {})
        print(r["run"], " ".join(f"{k}={v:.4f}" for k, v in f1.items() if v is not None))


HANDLERS: dict[str, Callable[[dict], None]] = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "augment-preview": cmd_augment_preview,
    "kappa": cmd_kappa,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            parser.print_usage(sys.stderr)
            raise ValidationError("a subcommand is required")
        cfg = resolve_config(ns.command, ns)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_VALIDATION

    if cfg["deterministic"]:
        from .nncore import set_deterministic

        set_deterministic(1)
    started = time.time()
    try:
        HANDLERS[ns.command](cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - top-level reporting
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"event": "done", "command": ns.command, "seconds": round(time.time() - started, 3)}),
          file=sys.stderr)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
