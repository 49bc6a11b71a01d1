"""Contrastive pretraining, tier fine-tuning, and speaker-embedder training."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationPolicy, apply_policy, synthetic_noise_bank, synthetic_rir_bank
from .corpus import Recording
from .evaluation import TIER_CLASSES, check_disjoint, macro_f1, targets_of
from .model import (
    TIERS,
    WEIGHTED_ALL,
    Encoder,
    EncoderConfig,
    FamilyAudioModel,
    HeadConfig,
    LossWeights,
    SpeakerEmbedder,
    contrastive_pretrain_loss,
    multitask_loss,
)
from .nncore import GroupAdam, NewBobState, check_finite, load_checkpoint, newbob_update, save_checkpoint
from .windowing import LabeledWindow, VadParams, vad_segments

MODES = ("FT", "FR")


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(*load_checkpoint(resolve_checkpoint(path)))


def resolve_checkpoint(path) -> Path:
    """Follow a pointer file (a few bytes of text naming the real checkpoint)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"HSCKPT01":
        return path
    target = path.read_text(encoding="utf-8").strip()
    return (path.parent / target).resolve()


def encoder_checkpoint(encoder: Encoder, **meta) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in encoder.state_dict().items()}
    return Checkpoint(tensors, {"kind": "encoder", "encoder_config": encoder.config.to_json(), **meta})


def model_checkpoint(model: FamilyAudioModel, **meta) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(tensors, {
        "kind": "model",
        "encoder_config": model.encoder.config.to_json(),
        "head_config": model.head_config.to_json(),
        **meta,
    })


def load_encoder(ckpt: Checkpoint) -> Encoder:
    enc = Encoder(EncoderConfig.from_json(ckpt.meta["encoder_config"]))
    state = ckpt.tensors
    if ckpt.meta.get("kind") == "model":
        state = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    enc.load_state_dict(state)
    return enc


def load_model(path_or_ckpt) -> FamilyAudioModel:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else Checkpoint.load(path_or_ckpt)
    if ckpt.meta.get("kind") != "model":
        raise ValueError("checkpoint does not hold a fine-tuned model")
    model = FamilyAudioModel(EncoderConfig.from_json(ckpt.meta["encoder_config"]),
                             HeadConfig(**ckpt.meta["head_config"]))
    model.load_state_dict(ckpt.tensors)
    model.eval()
    return model


# -------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop_s: float = 2.0
    lr: float = 5e-4
    warmup_frac: float = 0.08
    grad_clip: float = 10.0


@dataclass
class PretrainResult:
    encoder: Encoder
    checkpoint: Checkpoint
    losses: list  # per-step total loss


def pretrain_segments(recordings: Sequence[Recording], params: VadParams = VadParams()) -> list[np.ndarray]:
    """Non-silent stretches of every recording, each 1 to 10 s long."""
    out = []
    for rec in recordings:
        rate = rec.sample_rate_hz
        for s, e in vad_segments(rec, params):
            out.append(rec.samples[int(round(s * rate)) : int(round(e * rate))])
    return out


def _lr_at(step: int, cfg: PretrainConfig) -> float:
    warm = max(1, int(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(0.0, (cfg.steps - step) / max(1, cfg.steps - warm))


def pretrain(segments: Sequence[np.ndarray], config: EncoderConfig, steps: int, seed: int = 0,
             train_config: Optional[PretrainConfig] = None,
             progress: Optional[Callable[[dict], None]] = None) -> PretrainResult:
    """Masked contrastive + diversity pretraining on random crops of ``segments``."""
    if not segments:
        raise ValueError("empty corpus: no pretraining segments")
    rate = config.sample_rate
    lo, hi = round(config.min_s * rate), round(config.max_s * rate)
    for i, s in enumerate(segments):
        if not lo <= len(s) <= hi:
            raise ValueError(f"segment {i} is {len(s) / rate:.3f}s, outside [{config.min_s}, {config.max_s}]s")
    tc = copy.copy(train_config) if train_config else PretrainConfig()
    tc.steps = steps
    torch.manual_seed(seed)
    encoder = Encoder(config)
    encoder.train()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = GroupAdam({"encoder": list(encoder.parameters())}, {"encoder": tc.lr})
    crop = int(round(tc.crop_s * rate))
    losses = []
    temperature = config.temp_start
    for step in range(steps):
        picks = rng.integers(len(segments), size=tc.batch_size)
        n = min(crop, min(len(segments[i]) for i in picks))
        batch = []
        for i in picks:
            s = segments[i]
            off = int(rng.integers(len(s) - n + 1))
            batch.append(s[off : off + n])
        wave = torch.as_tensor(np.stack(batch), dtype=torch.float32)
        loss, parts = contrastive_pretrain_loss(encoder, wave, temperature, rng, gen)
        opt.zero_grad()
        loss.backward()
        opt.clip_grad_norm(tc.grad_clip)
        opt.lrs["encoder"] = _lr_at(step, tc)
        opt.step()
        losses.append(float(loss.detach()))
        temperature = max(config.temp_end, temperature * config.temp_decay)
        if progress and (step % 50 == 0 or step == steps - 1):
            progress({"event": "pretrain_step", "step": step + 1, "loss": float(loss.detach()), **parts,
                      "temperature": temperature})
    encoder.eval()
    ckpt = encoder_checkpoint(encoder, steps=steps, seed=seed, pretrain_config=asdict(tc))
    return PretrainResult(encoder, ckpt, losses)


# ---------------------------------------------------------------- finetune


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    mode: str = "FT"
    feature_mode: str = WEIGHTED_ALL
    domain_tagging: str = "None"
    use_spk_emb: bool = False
    policy: Optional[dict] = None  # AugmentationPolicy JSON
    seed: int = 0
    lr_heads: float = 1e-4
    lr_encoder: float = 1e-5
    grad_clip: Optional[float] = None
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        HeadConfig(self.feature_mode, self.domain_tagging, self.use_spk_emb)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.feature_mode, self.domain_tagging, self.use_spk_emb)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_f1: dict
    dev_average: float
    lrs: dict


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def append(self, rec: EpochRecord) -> None:
        if self.epochs and rec.epoch != self.epochs[-1].epoch + 1:
            raise ValueError("epoch indices must increase by one")
        self.epochs.append(rec)

    @property
    def averages(self) -> list[float]:
        return [e.dev_average for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.epochs)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        h = cls()
        for line in text.splitlines():
            if line.strip():
                h.append(EpochRecord(**json.loads(line)))
        return h


def dev_average(dev_f1: dict) -> float:
    vals = [v for v in dev_f1.values() if v is not None]
    if not vals:
        raise ValueError("no scorable dev tier")
    return float(np.mean(vals))


def select_best_epoch(history: TrainHistory) -> int:
    """1-based epoch with the highest dev average; the earliest wins ties."""
    if not len(history):
        raise ValueError("empty history")
    best = history.epochs[0]
    for e in history.epochs[1:]:
        if e.dev_average > best.dev_average:
            best = e
    return best.epoch


def tier_f1s(hyps: dict, refs: dict) -> dict:
    out = {}
    for tier in TIERS:
        keep = refs[tier] >= 0
        if not keep.any():
            out[tier] = None
            continue
        n = len(TIER_CLASSES[tier])
        out[tier] = macro_f1(refs[tier][keep], hyps[tier][keep], range(n))
    return out


def resolve_policy(config: TrainConfig, rate: int) -> Optional[AugmentationPolicy]:
    if not config.policy:
        return None
    return AugmentationPolicy.from_json(config.policy, synthetic_noise_bank(rate, config.seed),
                                        [r / np.max(np.abs(r)) for r in synthetic_rir_bank(rate, config.seed)])


def augment_pool(windows: Sequence[LabeledWindow], policy: Optional[AugmentationPolicy],
                 seed: int) -> list[LabeledWindow]:
    if policy is None or not policy.techniques:
        return list(windows)
    pool = []
    for w in windows:
        pool.extend(copy_w for copy_w, _ in apply_policy(w, policy, seed))
    return pool


def _feature_key(encoder: Encoder, windows: Sequence[LabeledWindow]) -> str:
    h = hashlib.sha256()
    for k, v in encoder.state_dict().items():
        h.update(k.encode())
        h.update(v.numpy().tobytes())
    for w in windows:
        h.update(np.ascontiguousarray(w.samples, dtype=np.float32).tobytes())
    return h.hexdigest()[:32]


def pooled_cache(model: FamilyAudioModel, windows: Sequence[LabeledWindow], batch_size: int = 64,
                 cache_dir=None) -> torch.Tensor:
    """Frozen-encoder pooled features for every window, (L, N, d)."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"pooled_{_feature_key(model.encoder, windows)}.npy"
        if path.exists():
            return torch.from_numpy(np.load(path))
    was = model.encoder.training
    model.encoder.eval()
    parts = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x = torch.as_tensor(np.stack([w.samples for w in windows[i : i + batch_size]]),
                                dtype=torch.float32)
            parts.append(model.pooled_features(x))
    model.encoder.train(was)
    feats = torch.cat(parts, dim=1)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, feats.numpy())
    return feats


def _stack_targets(windows: Sequence[LabeledWindow]):
    t = {k: torch.from_numpy(v) for k, v in targets_of(windows).items()}
    mask = torch.tensor([w.tier_mask.as_tuple() for w in windows], dtype=torch.bool)
    return t, mask


def _predict_cached(model, feats, domain, spk, batch_size):
    model.heads.eval()
    out: dict = {}
    with torch.no_grad():
        for i in range(0, feats.shape[1], batch_size):
            sl = slice(i, i + batch_size)
            logits = model.heads(feats[:, sl], domain[sl], None if spk is None else spk[sl])
            for k, v in logits.items():
                out.setdefault(k, []).append(v.argmax(-1).numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def _predict_full(model, windows, domain, spk, batch_size):
    model.eval()
    out: dict = {}
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            sl = slice(i, i + batch_size)
            x = torch.as_tensor(np.stack([w.samples for w in windows[sl]]), dtype=torch.float32)
            logits = model(x, domain[sl], None if spk is None else spk[sl])
            for k, v in logits.items():
                out.setdefault(k, []).append(v.argmax(-1).numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def finetune(
    train: Sequence[LabeledWindow],
    dev: Sequence[LabeledWindow],
    config: TrainConfig,
    init: Optional[Checkpoint] = None,
    encoder_config: Optional[EncoderConfig] = None,
    policy: Optional[AugmentationPolicy] = None,
    run_dir=None,
    spk_embedder: Optional[SpeakerEmbedder] = None,
    cache_dir=None,
    progress: Optional[Callable[[dict], None]] = None,
) -> tuple[FamilyAudioModel, TrainHistory]:
    """Fine-tune the tier heads (and, in FT mode, the encoder) on labeled windows.

    ``init`` is a pretrained encoder or model checkpoint; without it the encoder
    starts from random weights built from ``encoder_config``. New-bob annealing
    and best-epoch selection both use the in-domain dev average macro-F1.
    """
    train = list(train)
    dev = list(dev)
    if not dev:
        raise ValueError("dev set is empty")
    if not train:
        raise ValueError("training set is empty")
    overlap = {w.family_id for w in train} & {w.family_id for w in dev}
    if overlap:
        raise ValueError(f"family overlap between train and dev: {sorted(overlap)}")
    dev_in = [w for w in dev if w.domain == "In"]
    if not dev_in:
        raise ValueError("dev set has no in-domain windows")
    rate = train[0].sample_rate_hz

    if init is not None:
        enc_cfg = EncoderConfig.from_json(init.meta["encoder_config"])
    elif encoder_config is not None:
        enc_cfg = encoder_config
    else:
        raise ValueError("need an init checkpoint or an encoder config")
    if enc_cfg.sample_rate != rate:
        raise ValueError(f"encoder expects {enc_cfg.sample_rate} Hz audio, windows are {rate} Hz")

    torch.manual_seed(config.seed)
    model = FamilyAudioModel(enc_cfg, config.head_config())
    if init is not None:
        model.encoder.load_state_dict(load_encoder(init).state_dict())
    frozen = config.mode == "FR"
    if frozen:
        for p in model.encoder.parameters():
            p.requires_grad_(False)

    if policy is None:
        policy = resolve_policy(config, rate)
    pool = augment_pool(train, policy, config.seed)
    check_disjoint(pool, dev_in)
    targets, tier_mask = _stack_targets(pool)
    dev_refs = targets_of(dev_in)
    dev_domain = torch.from_numpy(dev_refs["domain"])

    spk_pool = spk_dev = None
    if config.use_spk_emb:
        if spk_embedder is None:
            raise ValueError("use_spk_emb requires a trained speaker embedder")
        spk_pool = torch.from_numpy(embed_windows(spk_embedder, pool))
        spk_dev = torch.from_numpy(embed_windows(spk_embedder, dev_in))

    feats = dev_feats = None
    if frozen:
        feats = pooled_cache(model, pool, config.eval_batch_size, cache_dir)
        dev_feats = pooled_cache(model, dev_in, config.eval_batch_size, cache_dir)

    groups = {"heads": list(model.heads.parameters())}
    lrs = {"heads": config.lr_heads}
    if not frozen:
        groups["encoder"] = list(model.encoder.parameters())
        lrs["encoder"] = config.lr_encoder
    opt = GroupAdam(groups, lrs)
    bob = NewBobState(dict(lrs))
    weights = LossWeights.for_heads(config.domain_tagging == "MultiTask")

    run = None
    if run_dir is not None:
        run = Path(run_dir)
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps({
            "train_config": config.to_json(),
            "encoder_config": enc_cfg.to_json(),
            "init": None if init is None else init.meta.get("kind"),
            "n_train_windows": len(pool),
            "n_dev_windows": len(dev_in),
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (run / "history.jsonl").write_text("", encoding="utf-8")

    history = TrainHistory()
    best_state = None
    best_avg = -math.inf
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        model.train()
        if frozen:
            model.encoder.eval()
        order = rng.permutation(len(pool))
        total = 0.0
        seen = 0
        used_lrs = dict(opt.lrs)
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two rows
            it = torch.from_numpy(idx)
            dom = targets["domain"][it]
            spk = None if spk_pool is None else spk_pool[it]
            if frozen:
                logits = model.heads(feats[:, it], dom, spk)
            else:
                x = torch.as_tensor(np.stack([pool[j].samples for j in idx]), dtype=torch.float32)
                logits = model(x, dom, spk)
            tgt = {k: v[it] for k, v in targets.items()}
            loss, _ = multitask_loss(logits, tgt, weights, tier_mask[it])
            check_finite(loss.detach(), "training loss")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                opt.clip_grad_norm(config.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        if frozen:
            hyps = _predict_cached(model, dev_feats, dev_domain, spk_dev, config.eval_batch_size)
        else:
            hyps = _predict_full(model, dev_in, dev_domain, spk_dev, config.eval_batch_size)
        f1s = tier_f1s(hyps, dev_refs)
        avg = dev_average(f1s)
        rec = EpochRecord(epoch, total / max(seen, 1), f1s, avg, used_lrs)
        history.append(rec)
        bob = newbob_update(bob, avg)
        opt.lrs.update(bob.lrs)
        ckpt = model_checkpoint(model, epoch=epoch, train_config=config.to_json())
        if run is not None:
            ckpt.save(run / "checkpoints" / f"epoch_{epoch}.ckpt")
            with open(run / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        if avg > best_avg:
            best_avg = avg
            best_state = ckpt.tensors
        if progress:
            progress({"event": "epoch", **asdict(rec)})

    best = select_best_epoch(history)
    model.load_state_dict(best_state)
    model.eval()
    if run is not None:
        (run / "best.ckpt").write_text(f"checkpoints/epoch_{best}.ckpt\n", encoding="utf-8")
    return model, history


# --------------------------------------------------------- speaker embedder


def embed_windows(embedder: SpeakerEmbedder, windows: Sequence[LabeledWindow],
                  batch_size: int = 64) -> np.ndarray:
    if not bool(embedder.trained):
        raise RuntimeError("speaker embedder has not been trained")
    embedder.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x = torch.as_tensor(np.stack([w.samples for w in windows[i : i + batch_size]]),
                                dtype=torch.float32)
            out.append(embedder(x).numpy())
    return np.concatenate(out).astype(np.float32)


def train_speaker_embedder(windows: Sequence[LabeledWindow], emb_dim: int = 48, epochs: int = 5,
                           batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> SpeakerEmbedder:
    """Speaker-classification training where identity is (family, speaker role)."""
    speech = [w for w in windows if not w.is_silence]
    if not speech:
        raise ValueError("no speech windows to train on")
    ids = sorted({f"{w.family_id}:{w.speaker}" for w in speech})
    index = {s: i for i, s in enumerate(ids)}
    y = torch.tensor([index[f"{w.family_id}:{w.speaker}"] for w in speech])
    torch.manual_seed(seed)
    emb = SpeakerEmbedder(emb_dim, speech[0].sample_rate_hz, n_speakers=len(ids))
    opt = GroupAdam({"all": list(emb.parameters())}, {"all": lr})
    rng = np.random.default_rng(seed)
    emb.train()
    for _ in range(epochs):
        order = rng.permutation(len(speech))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            x = torch.as_tensor(np.stack([speech[j].samples for j in idx]), dtype=torch.float32)
            loss = F.cross_entropy(emb.logits(x), y[torch.from_numpy(idx)])
            opt.zero_grad()
            loss.backward()
            opt.step()
    emb.trained.fill_(True)
    emb.eval()
    return emb
