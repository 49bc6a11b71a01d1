"""Self-supervised encoder, fine-tuning heads, and the speaker embedder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ADU_CLASSES, CHN_CLASSES, DOMAIN_CLASSES, SD_CLASSES
from .nncore import MultiHeadSelfAttention, check_finite

LAST_LAYER = "LastLayer"
WEIGHTED_ALL = "WeightedAll"
FEATURE_MODES = (LAST_LAYER, WEIGHTED_ALL)
TAGGING_MODES = ("None", "OneHotEmbedding", "MultiTask")
TIERS = ("sd", "chn", "adu")


@dataclass
class EncoderConfig:
    conv: tuple = ((64, 10, 5), (96, 8, 4), (96, 4, 4))
    layers: int = 4
    dim: int = 96
    heads: int = 4
    ffn_dim: Optional[int] = None
    pos_conv_kernel: int = 33  # odd; 0 disables the convolutional position term
    pos_conv_groups: int = 16
    dropout: float = 0.1
    groups: int = 2
    entries: int = 64
    temp_start: float = 2.0
    temp_end: float = 0.5
    temp_decay: float = 0.9995
    mask_prob: float = 0.065
    mask_len: int = 10
    num_negatives: int = 20
    logit_temp: float = 0.1
    diversity_weight: float = 0.1
    sample_rate: int = 16000
    min_s: float = 1.0
    max_s: float = 10.0

    def __post_init__(self):
        self.conv = tuple(tuple(c) for c in self.conv)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.dim % self.groups:
            raise ValueError("dim must be divisible by quantizer groups")
        if self.pos_conv_kernel and (self.pos_conv_kernel % 2 == 0 or self.dim % self.pos_conv_groups):
            raise ValueError("pos_conv_kernel must be odd and dim divisible by pos_conv_groups")
        if self.mask_prob * self.mask_len >= 1:
            raise ValueError("mask_prob * mask_len must be < 1")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, _, s in self.conv]))

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class HeadConfig:
    feature_mode: str = WEIGHTED_ALL
    domain_tagging: str = "None"
    use_spk_emb: bool = False
    hidden: Optional[int] = None  # default dim // 2
    dropout: float = 0.1
    domain_emb_dim: Optional[int] = None  # default dim // 4
    spk_emb_dim: int = 48

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.domain_tagging not in TAGGING_MODES:
            raise ValueError(f"domain_tagging must be one of {TAGGING_MODES}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    sd: float
    chn: float
    adu: float
    domain: float

    @classmethod
    def for_heads(cls, multitask: bool) -> "LossWeights":
        if multitask:
            return cls(0.32, 0.32, 0.32, 0.03)
        return cls(0.33, 0.33, 0.33, 0.0)


# ---------------------------------------------------------------- encoder


class ConvFrontend(nn.Module):
    """Strided 1-D convolutions; padded so T = floor(n / total_stride)."""

    def __init__(self, conv_spec):
        super().__init__()
        layers = []
        in_ch = 1
        self.pads = []
        for ch, k, s in conv_spec:
            layers.append(nn.Conv1d(in_ch, ch, k, stride=s))
            total = max(0, k - s)
            self.pads.append((total // 2, total - total // 2))
            in_ch = ch
        self.convs = nn.ModuleList(layers)
        # per-channel normalization over time after the first layer
        self.norm = nn.GroupNorm(conv_spec[0][0], conv_spec[0][0])
        self.out_channels = in_ch

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        x = wave.unsqueeze(1)
        for i, (conv, pad) in enumerate(zip(self.convs, self.pads)):
            x = conv(F.pad(x, pad))
            x = F.gelu(self.norm(x) if i == 0 else x)
        return x.transpose(1, 2)  # B x T x C


def sinusoidal_positions(t: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


class TransformerLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim, dropout):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads, 0.0)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn_dim, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = self.norm1(x + self.drop(self.attn(x)))
        return self.norm2(x + self.drop(self.ffn(x)))


class Quantizer(nn.Module):
    """Product quantizer with Gumbel-softmax code selection."""

    def __init__(self, dim, groups, entries):
        super().__init__()
        self.groups = groups
        self.entries = entries
        self.to_logits = nn.Linear(dim, groups * entries)
        # large logits at init so code picks are not just Gumbel noise
        nn.init.normal_(self.to_logits.weight, 0.0, 1.0)
        nn.init.zeros_(self.to_logits.bias)
        self.codebook = nn.Parameter(torch.randn(groups, entries, dim // groups) * 0.5)
        self.project = nn.Linear(dim, dim)

    def forward(self, z, temperature, generator=None, hard=True):
        logits = self.to_logits(z).view(*z.shape[:-1], self.groups, self.entries)
        q, probs, idx = gumbel_quantize(logits, self.codebook, temperature, generator, hard,
                                        noise=self.training)
        return self.project(q), probs, idx


def gumbel_quantize(logits, codebook, temperature, generator=None, hard=True, noise=True):
    """Select one codebook entry per group.

    ``logits``: (..., G, V); ``codebook``: (G, V, d_g). Returns the
    concatenated code vectors (..., G*d_g), the noise-free code
    probabilities, and the chosen indices. With ``hard`` the forward pass
    uses one-hot picks while gradients flow through the soft relaxation.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        g = -torch.log((-torch.log(u.clamp_min(1e-10))).clamp_min(1e-10))
        y_soft = torch.softmax((logits + g) / temperature, dim=-1)
    else:
        y_soft = torch.softmax(logits / temperature, dim=-1)
    idx = y_soft.argmax(dim=-1)
    if hard:
        y_hard = F.one_hot(idx, logits.shape[-1]).to(y_soft.dtype)
        y = y_hard - y_soft.detach() + y_soft
    else:
        y = y_soft
    q = torch.einsum("...gv,gvd->...gd", y, codebook)
    q = q.reshape(*q.shape[:-2], -1)
    return q, torch.softmax(logits, dim=-1), idx


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.frontend = ConvFrontend(c.conv)
        self.feat_norm = nn.LayerNorm(self.frontend.out_channels)
        self.proj = nn.Linear(self.frontend.out_channels, c.dim)
        self.mask_emb = nn.Parameter(torch.rand(c.dim) - 0.5)
        self.pos_conv = None
        if c.pos_conv_kernel:
            self.pos_conv = nn.Conv1d(c.dim, c.dim, c.pos_conv_kernel, padding=c.pos_conv_kernel // 2,
                                      groups=c.pos_conv_groups)
        self.input_norm = nn.LayerNorm(c.dim)
        self.layers = nn.ModuleList(
            [TransformerLayer(c.dim, c.heads, c.ffn_dim, c.dropout) for _ in range(c.layers)]
        )
        self.quantizer = Quantizer(c.dim, c.groups, c.entries)
        self.final_proj = nn.Linear(c.dim, c.dim)

    def frames(self, n_samples: int) -> int:
        return n_samples // self.config.total_stride

    def latents(self, wave: torch.Tensor) -> torch.Tensor:
        n = wave.shape[-1]
        rate = self.config.sample_rate
        if n < round(self.config.min_s * rate) or n > round(self.config.max_s * rate):
            raise ValueError(
                f"waveform of {n / rate:.3f}s outside [{self.config.min_s}, {self.config.max_s}]s"
            )
        return self.proj(self.feat_norm(self.frontend(wave)))

    def contextualize(self, z: torch.Tensor, mask: Optional[torch.Tensor] = None) -> list:
        x = z
        if mask is not None:
            x = torch.where(mask.unsqueeze(-1), self.mask_emb.to(z.dtype), z)
        if self.pos_conv is not None:
            # local context term: lets masked frames see their neighbours from step one
            x = x + F.gelu(self.pos_conv(x.transpose(1, 2)).transpose(1, 2))
        x = self.input_norm(x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype))
        outs = []
        for layer in self.layers:
            x = layer(x)
            outs.append(x)
        return outs

    def forward(self, wave: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """Return latents (B, T, d) and every transformer layer's output."""
        z = self.latents(wave)
        return z, self.contextualize(z, mask)


def encoder_forward(wave, encoder: Encoder):
    """Single-waveform convenience wrapper: (T, d) latents and (L, T, d) contexts."""
    x = torch.as_tensor(np.asarray(wave), dtype=next(encoder.parameters()).dtype).unsqueeze(0)
    z, cs = encoder(x)
    return z[0], torch.stack([c[0] for c in cs])


# ------------------------------------------------------------- pretraining


def mask_spans(t: int, p: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Union of length-``m`` spans, each frame starting one with probability ``p``."""
    if t <= m:
        raise ValueError("need more frames than the span length")
    starts = np.flatnonzero(rng.random(t) < p)
    if starts.size == 0:
        starts = np.array([int(rng.integers(0, t - m + 1))])
    mask = np.zeros(t, dtype=bool)
    for s in starts:
        mask[s : s + m] = True
    return mask


def info_nce(context, positives, negatives, temperature):
    """Per-frame contrastive loss; ``negatives`` is (N, K, d), positive is class 0."""
    cands = torch.cat([positives.unsqueeze(1), negatives], dim=1)
    sims = F.cosine_similarity(context.unsqueeze(1), cands, dim=-1, eps=1e-8) / temperature
    return -torch.log_softmax(sims, dim=-1)[:, 0]


def diversity_penalty(probs: torch.Tensor) -> torch.Tensor:
    """Mean over groups of 1 - perplexity / V for probabilities shaped (..., G, V)."""
    g, v = probs.shape[-2:]
    avg = probs.reshape(-1, g, v).mean(dim=0)
    perplexity = torch.exp(-(avg * torch.log(avg + 1e-7)).sum(dim=-1))
    return (1.0 - perplexity / v).mean()


def sample_negatives(n_masked: int, k: int, generator: torch.Generator) -> torch.Tensor:
    """For each of ``n_masked`` frames pick min(k, n_masked-1) other masked positions."""
    k = min(k, n_masked - 1)
    if k <= 0:
        return torch.zeros(n_masked, 0, dtype=torch.long)
    scores = torch.rand(n_masked, n_masked - 1, generator=generator)
    pick = scores.argsort(dim=1)[:, :k]
    own = torch.arange(n_masked).unsqueeze(1)
    return pick + (pick >= own).long()


def contrastive_pretrain_loss(encoder: Encoder, wave: torch.Tensor, temperature: float,
                              rng: np.random.Generator, generator: torch.Generator):
    """Masked contrastive + diversity objective on a batch of equal-length waveforms."""
    c = encoder.config
    z = encoder.latents(wave)
    b, t, _ = z.shape
    mask_np = np.stack([mask_spans(t, c.mask_prob, c.mask_len, rng) for _ in range(b)])
    mask = torch.from_numpy(mask_np)
    ctx = encoder.final_proj(encoder.contextualize(z, mask)[-1])
    q, probs, _ = encoder.quantizer(z, temperature, generator)
    losses = []
    for i in range(b):
        idx = torch.from_numpy(np.flatnonzero(mask_np[i]))
        neg = sample_negatives(len(idx), c.num_negatives, generator)
        qi = q[i, idx]
        losses.append(info_nce(ctx[i, idx], qi, qi[neg], c.logit_temp))
    contrastive = torch.cat(losses).mean()
    diversity = diversity_penalty(probs)
    total = contrastive + c.diversity_weight * diversity
    check_finite(total.detach(), "pretraining loss")
    return total, {"contrastive": float(contrastive.detach()), "diversity": float(diversity.detach())}


# ------------------------------------------------------------------- heads


def fuse_layers(pooled: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Convex combination over the layer axis (dim 0) with softmax(logits) weights."""
    if pooled.shape[0] != logits.shape[0]:
        raise ValueError(f"{pooled.shape[0]} layers but {logits.shape[0]} fusion weights")
    alpha = torch.softmax(logits, dim=0)
    return torch.einsum("l,l...->...", alpha, pooled)


class FFNHead(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, dropout=0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.LeakyReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class TierHeads(nn.Module):
    """Layer fusion, optional domain embedding / domain head, and the tier FFNs."""

    def __init__(self, dim: int, n_layers: int, config: HeadConfig):
        super().__init__()
        self.config = config
        hidden = config.hidden or max(1, dim // 2)
        self.domain_emb = None
        feat = dim
        if config.domain_tagging == "OneHotEmbedding":
            e = config.domain_emb_dim or max(1, dim // 4)
            self.domain_emb = nn.Embedding(len(DOMAIN_CLASSES), e)
            feat += e
        self.fusion_logits = nn.Parameter(torch.zeros(n_layers))
        self.feature_dim = feat
        vc_in = feat + (config.spk_emb_dim if config.use_spk_emb else 0)
        self.sd = FFNHead(feat, hidden, len(SD_CLASSES), config.dropout)
        self.chn = FFNHead(vc_in, hidden, len(CHN_CLASSES), config.dropout)
        self.adu = FFNHead(vc_in, hidden, len(ADU_CLASSES), config.dropout)
        self.domain = None
        if config.domain_tagging == "MultiTask":
            self.domain = FFNHead(feat, hidden, len(DOMAIN_CLASSES), config.dropout)

    def features(self, pooled: torch.Tensor, domain: Optional[torch.Tensor]) -> torch.Tensor:
        """``pooled`` is (L, B, d): time-mean of every layer's output."""
        emb = None
        if self.domain_emb is not None:
            if domain is None:
                raise ValueError("domain tags required for OneHotEmbedding tagging")
            emb = self.domain_emb(domain)
        if self.config.feature_mode == LAST_LAYER:
            f = pooled[-1]
            return f if emb is None else torch.cat([f, emb], dim=-1)
        if emb is not None:
            pooled = torch.cat([pooled, emb.unsqueeze(0).expand(pooled.shape[0], -1, -1)], dim=-1)
        return fuse_layers(pooled, self.fusion_logits)

    def forward(self, pooled, domain=None, spk_emb=None) -> dict:
        f = self.features(pooled, domain)
        vc = f
        if self.config.use_spk_emb:
            if spk_emb is None:
                raise ValueError("speaker embeddings required by this head config")
            vc = torch.cat([f, spk_emb.to(f.dtype)], dim=-1)
        out = {"sd": self.sd(f), "chn": self.chn(vc), "adu": self.adu(vc)}
        if self.domain is not None:
            out["domain"] = self.domain(f)
        return out


def heads_forward(heads: TierHeads, pooled, domain=None, spk_emb=None) -> dict:
    return heads(pooled, domain, spk_emb)


def masked_ce(logits: torch.Tensor, target: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over rows where ``keep``; 0 when no row contributes."""
    if not bool(keep.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], target[keep])


def multitask_loss(logits: dict, targets: dict, weights: LossWeights, tier_mask: torch.Tensor):
    """Weighted tier losses. ``targets`` hold class ids with -1 where a tier is undefined;
    ``tier_mask`` is (B, 3) booleans for (SD, CHN, ADU)."""
    parts = {}
    for j, tier in enumerate(TIERS):
        tgt = targets[tier]
        keep = (tgt >= 0) & tier_mask[:, j]
        parts[tier] = masked_ce(logits[tier], tgt.clamp_min(0), keep)
    total = weights.sd * parts["sd"] + weights.chn * parts["chn"] + weights.adu * parts["adu"]
    if "domain" in logits and weights.domain:
        parts["domain"] = F.cross_entropy(logits["domain"], targets["domain"])
        total = total + weights.domain * parts["domain"]
    return total, parts


def combine_losses(parts: dict, weights: LossWeights) -> float:
    return (weights.sd * parts["sd"] + weights.chn * parts["chn"] + weights.adu * parts["adu"]
            + weights.domain * parts.get("domain", 0.0))


class FamilyAudioModel(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, head_config: HeadConfig):
        super().__init__()
        self.encoder = Encoder(encoder_config)
        self.heads = TierHeads(encoder_config.dim, encoder_config.layers, head_config)

    @property
    def head_config(self) -> HeadConfig:
        return self.heads.config

    def pooled_features(self, wave: torch.Tensor) -> torch.Tensor:
        """Mean-pool every transformer layer over time first: (L, B, d)."""
        _, outs = self.encoder(wave)
        return torch.stack([o.mean(dim=1) for o in outs])

    def forward(self, wave, domain=None, spk_emb=None) -> dict:
        return self.heads(self.pooled_features(wave), domain, spk_emb)


# --------------------------------------------------------- speaker embedder


def mel_filterbank(n_fft: int, rate: int, n_mels: int, fmin: float = 50.0, fmax: Optional[float] = None):
    fmax = fmax or rate / 2
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    pts = inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / rate)
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, c, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (freqs - lo) / max(c - lo, 1e-9)
        down = (hi - freqs) / max(hi - c, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_mel(wave: torch.Tensor, rate: int, n_mels: int = 40, win_s: float = 0.025, hop_s: float = 0.01):
    n_fft = int(2 ** math.ceil(math.log2(win_s * rate)))
    win = int(round(win_s * rate))
    hop = int(round(hop_s * rate))
    spec = torch.stft(wave, n_fft, hop_length=hop, win_length=win,
                      window=torch.hann_window(win, dtype=wave.dtype), center=True, return_complex=True)
    power = spec.abs() ** 2  # B x F x T
    fb = torch.as_tensor(mel_filterbank(n_fft, rate, n_mels), dtype=wave.dtype)
    return torch.log(fb @ power + 1e-6)


class SpeakerEmbedder(nn.Module):
    """Log-mel conv stack with mean/std statistics pooling to a unit-norm embedding."""

    def __init__(self, emb_dim: int = 48, rate: int = 16000, n_mels: int = 40, channels: int = 96,
                 n_speakers: int = 1):
        super().__init__()
        self.rate = rate
        self.n_mels = n_mels
        self.emb_dim = emb_dim
        self.frames = nn.Sequential(
            nn.Conv1d(n_mels, channels, 5, padding=2), nn.ReLU(), nn.BatchNorm1d(channels),
            nn.Conv1d(channels, channels, 3, padding=2, dilation=2), nn.ReLU(), nn.BatchNorm1d(channels),
            nn.Conv1d(channels, channels, 3, padding=3, dilation=3), nn.ReLU(), nn.BatchNorm1d(channels),
        )
        self.embed = nn.Linear(2 * channels, emb_dim)
        self.classifier = nn.Linear(emb_dim, max(1, n_speakers))
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def raw_embedding(self, wave: torch.Tensor) -> torch.Tensor:
        feats = log_mel(wave, self.rate, self.n_mels)
        feats = feats - feats.mean(dim=-1, keepdim=True)
        h = self.frames(feats)
        stats = torch.cat([h.mean(dim=-1), h.std(dim=-1)], dim=-1)
        return self.embed(stats)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw_embedding(wave), dim=-1)

    def logits(self, wave: torch.Tensor) -> torch.Tensor:
        return self.classifier(F.normalize(self.raw_embedding(wave), dim=-1) * 10.0)


def speaker_embed(embedder: SpeakerEmbedder, waves) -> np.ndarray:
    """Unit-norm embeddings for a batch of waveforms (eval mode, no grad)."""
    if not bool(embedder.trained):
        raise RuntimeError("speaker embedder has not been trained")
    x = torch.as_tensor(np.asarray(waves), dtype=next(embedder.parameters()).dtype)
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    was = embedder.training
    embedder.eval()
    with torch.no_grad():
        e = embedder(x).numpy()
    embedder.train(was)
    return e[0] if single else e
