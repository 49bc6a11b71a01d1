"""Time-domain corruptions and tier-scoped augmentation policies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .windowing import FULL_MASK, LabeledWindow, TierMask

TECHNIQUES = ("SpecAugmentDrop", "ChunkDrop", "SpeedPerturb", "Reverb", "Noise", "ReverbNoise")
SCOPES = {
    "SDOnly": TierMask(True, False, False),
    "VCOnly": TierMask(False, True, True),
    "All": TierMask(True, True, True),
}


def rms(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("rms of empty input")
    return float(np.sqrt(np.mean(x * x)))


def resample(samples, from_hz: float, to_hz: float, taps: int = 64, rolloff: float = 0.9,
             beta: float = 8.6) -> np.ndarray:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    ``taps`` counts kernel zero crossings at the lower of the two rates, so
    the filter stretches when downsampling. The cutoff sits at ``rolloff``
    times the lower Nyquist frequency.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    x = np.asarray(samples, dtype=np.float64)
    if from_hz == to_hz:
        return x.copy()
    ratio = to_hz / from_hz
    n_out = int(round(len(x) * ratio))
    scale = min(1.0, ratio)  # cutoff relative to the input Nyquist
    cutoff = rolloff * scale
    half = taps / 2.0 / scale  # half-width in input samples
    offsets = np.arange(-int(np.ceil(half)), int(np.ceil(half)) + 1)
    out = np.empty(n_out)
    chunk = 4096
    for c0 in range(0, n_out, chunk):
        t = np.arange(c0, min(n_out, c0 + chunk)) / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        d = t[:, None] - idx
        arg = np.clip(d / half, -1.0, 1.0)
        window = np.i0(beta * np.sqrt(1.0 - arg * arg)) / np.i0(beta)
        window[np.abs(d) > half] = 0.0
        kernel = cutoff * np.sinc(cutoff * d) * window
        valid = (idx >= 0) & (idx < len(x))
        vals = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        out[c0 : c0 + len(t)] = np.sum(vals * kernel, axis=1)
    return out


def speed_perturb(samples, factor: float, rate: int = 16000, taps: int = 64) -> np.ndarray:
    """Play ``samples`` ``factor`` times faster: length ~ n / factor, pitch x factor."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return np.asarray(samples, dtype=np.float64).copy()
    return resample(samples, rate * factor, rate, taps=taps)


def noise_gain(signal, noise_slice, snr_db: float) -> float:
    s = rms(signal)
    n = rms(noise_slice)
    if s == 0:
        raise ValueError("SNR undefined for a silent signal")
    if n == 0:
        raise ValueError("noise clip is silent")
    return s / (n * 10.0 ** (snr_db / 20.0))


def fit_noise(noise, length: int, rng: np.random.Generator) -> np.ndarray:
    """Loop ``noise`` as needed and crop ``length`` samples at a random offset."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise ValueError("empty noise clip")
    reps = int(np.ceil((length + len(noise)) / len(noise)))
    tiled = np.tile(noise, reps)
    off = int(rng.integers(0, len(noise)))
    return tiled[off : off + length]


def add_noise_snr(signal, noise, snr_db: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Mix noise at ``snr_db``; returns ``(mixed, clip_fraction)`` after hard clipping."""
    signal = np.asarray(signal, dtype=np.float64)
    noise_slice = fit_noise(noise, len(signal), rng)
    g = noise_gain(signal, noise_slice, snr_db)
    mixed = signal + g * noise_slice
    clipped = np.abs(mixed) > 1.0
    return np.clip(mixed, -1.0, 1.0), float(np.mean(clipped))


def convolve_rir(signal, rir) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0:
        raise ValueError("empty impulse response")
    if rir.size <= 64:
        y = np.convolve(signal, rir)[: len(signal)]
    else:
        y = fftconvolve(signal, rir)[: len(signal)]
    peak = np.max(np.abs(y)) if y.size else 0.0
    if peak > 1.0:
        y = y * (np.max(np.abs(signal)) / peak)
    return y


def zero_spans(samples, rate: int, spans: Sequence[tuple[float, float]]) -> np.ndarray:
    y = np.asarray(samples, dtype=np.float64).copy()
    for lo, hi in spans:
        y[int(round(lo * rate)) : int(round(hi * rate))] = 0.0
    return y


def chunk_drop(samples, rng: np.random.Generator, count_range=(1, 5), len_range_s=(0.02, 0.1),
               rate: int = 16000) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    k = int(rng.integers(count_range[0], count_range[1] + 1))
    if k == 0:
        return x.copy()
    n = len(x)
    budget = n // 2
    taken: list[tuple[int, int]] = []
    for _ in range(k):
        for _attempt in range(20):
            length = int(round(rng.uniform(*len_range_s) * rate))
            length = min(length, n)
            if length <= 0 or sum(b - a for a, b in taken) + length > budget:
                break
            a = int(rng.integers(0, n - length + 1))
            b = a + length
            if all(b <= lo or a >= hi for lo, hi in taken):
                taken.append((a, b))
                break
    y = x.copy()
    for a, b in taken:
        y[a:b] = 0.0
    return y


def drop_bands(samples, rate: int, bands: Sequence[tuple[float, float]]) -> np.ndarray:
    """Zero the FFT bins of each ``(lo_hz, hi_hz)`` band."""
    x = np.asarray(samples, dtype=np.float64)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    for lo, hi in bands:
        if hi > rate / 2 + 1e-9 or lo < 0:
            raise ValueError("band outside [0, Nyquist]")
        spec[(freqs >= lo) & (freqs <= hi)] = 0.0
    return np.fft.irfft(spec, n=len(x))


def freq_drop(samples, rng: np.random.Generator, count_range=(1, 3), band_hz_range=(100.0, 3800.0),
              rate: int = 16000, width_hz_range=(50.0, 400.0)) -> np.ndarray:
    """Drop ``k`` random bands whose centers lie in ``band_hz_range``."""
    k = int(rng.integers(count_range[0], count_range[1] + 1))
    nyq = rate / 2
    bands = []
    for _ in range(k):
        c = rng.uniform(*band_hz_range)
        w = rng.uniform(*width_hz_range)
        bands.append((max(0.0, c - w / 2), min(nyq, c + w / 2)))
    if not bands:
        return np.asarray(samples, dtype=np.float64).copy()
    return drop_bands(samples, rate, bands)


# ------------------------------------------------------------------ banks


def white_noise(n: int, rng) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    y = np.fft.irfft(spec / np.sqrt(f), n=n)
    return y / (np.std(y) + 1e-12)


def brown_noise(n: int, rng) -> np.ndarray:
    y = np.cumsum(rng.standard_normal(n))
    y = y - np.linspace(y[0], y[-1], n)
    return y / (np.std(y) + 1e-12)


def synthetic_noise_bank(rate: int, seed: int = 0, seconds: float = 4.0, babble: Sequence = ()) -> list:
    """White, pink and brown noise clips scaled to 0.1 rms, plus any babble clips given."""
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    clips = [0.1 * gen(n, rng) for gen in (white_noise, pink_noise, brown_noise)]
    clips.extend(np.asarray(b, dtype=np.float64) for b in babble)
    return clips


def synthetic_rir(rate: int, rt60_s: float, rng, length_s: Optional[float] = None) -> np.ndarray:
    length_s = length_s or min(0.5, rt60_s)
    n = max(2, int(length_s * rate))
    t = np.arange(n) / rate
    tail = rng.standard_normal(n) * np.exp(-6.9 * t / rt60_s) * 0.3
    tail[0] = 1.0
    return tail / np.max(np.abs(tail))


def synthetic_rir_bank(rate: int, seed: int = 0, rt60s=(0.15, 0.3, 0.5)) -> list:
    rng = np.random.default_rng(seed)
    return [synthetic_rir(rate, rt, rng) for rt in rt60s]


def load_bank(directory) -> list:
    """Load every mono WAV in ``directory`` (sorted by name)."""
    from .corpus import read_wav

    clips = []
    for p in sorted(Path(directory).glob("*.wav")):
        x, _ = read_wav(p)
        clips.append(x)
    if not clips:
        raise ValueError(f"no WAV files in {directory}")
    return clips


# ------------------------------------------------------------------ policy


@dataclass
class AugmentationPolicy:
    techniques: tuple = ()
    tier_scope: str = "All"
    snr_db_range: tuple = (0.0, 15.0)
    speed_factors: tuple = (0.95, 1.0, 1.05)
    chunk_count_range: tuple = (1, 5)
    chunk_len_range_s: tuple = (0.02, 0.1)
    freq_count_range: tuple = (1, 3)
    band_hz_range: tuple = (100.0, 3800.0)
    noise_bank: list = field(default_factory=list, repr=False)
    rir_bank: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.techniques = tuple(self.techniques)
        self.validate()

    def validate(self):
        unknown = set(self.techniques) - set(TECHNIQUES)
        if unknown:
            raise ValueError(f"unknown techniques {sorted(unknown)}")
        if self.tier_scope not in SCOPES:
            raise ValueError(f"unknown tier scope {self.tier_scope!r}")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError("snr_db_range low > high")
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError("speed factors must be positive")
        if {"Noise", "ReverbNoise"} & set(self.techniques) and not self.noise_bank:
            raise ValueError("noise technique selected with an empty noise bank")
        if {"Reverb", "ReverbNoise"} & set(self.techniques) and not self.rir_bank:
            raise ValueError("reverb technique selected with an empty RIR bank")

    @property
    def mask(self) -> TierMask:
        return SCOPES[self.tier_scope]

    def to_json(self) -> dict:
        return {
            "techniques": list(self.techniques),
            "tier_scope": self.tier_scope,
            "snr_db_range": list(self.snr_db_range),
            "speed_factors": list(self.speed_factors),
            "chunk_count_range": list(self.chunk_count_range),
            "chunk_len_range_s": list(self.chunk_len_range_s),
            "freq_count_range": list(self.freq_count_range),
            "band_hz_range": list(self.band_hz_range),
        }

    @classmethod
    def from_json(cls, obj: dict, noise_bank=(), rir_bank=()) -> "AugmentationPolicy":
        known = {
            "techniques", "tier_scope", "snr_db_range", "speed_factors", "chunk_count_range",
            "chunk_len_range_s", "freq_count_range", "band_hz_range",
        }
        extra = set(obj) - known - {"noise_dir", "rir_dir"}
        if extra:
            raise ValueError(f"unknown policy fields {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items() if k in known}
        return cls(noise_bank=list(noise_bank), rir_bank=list(rir_bank), **kw)


def load_policy(path, rate: int = 16000, seed: int = 0) -> AugmentationPolicy:
    """Read a policy JSON; banks come from ``noise_dir``/``rir_dir`` or synthetic stand-ins."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    noise = load_bank(obj["noise_dir"]) if obj.get("noise_dir") else synthetic_noise_bank(rate, seed)
    rirs = load_bank(obj["rir_dir"]) if obj.get("rir_dir") else synthetic_rir_bank(rate, seed)
    rirs = [r / np.max(np.abs(r)) for r in rirs]
    return AugmentationPolicy.from_json(obj, noise, rirs)


def stream_seed(global_seed: int, recording_id: str, start_s: float, technique: str) -> int:
    """Independent per-window RNG stream id, stable across processes."""
    key = f"{global_seed}|{recording_id}|{start_s:.4f}|{technique}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def _fix_length(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) >= n:
        return y[:n]
    return np.pad(y, (0, n - len(y)))


def corrupt(samples, technique: str, policy: AugmentationPolicy, rate: int, rng) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if technique == "SpecAugmentDrop":
        nyq = rate / 2
        band = (min(policy.band_hz_range[0], nyq), min(policy.band_hz_range[1], nyq * 0.95))
        y = freq_drop(x, rng, policy.freq_count_range, band, rate)
        return chunk_drop(y, rng, policy.chunk_count_range, policy.chunk_len_range_s, rate)
    if technique == "ChunkDrop":
        return chunk_drop(x, rng, policy.chunk_count_range, policy.chunk_len_range_s, rate)
    if technique == "SpeedPerturb":
        factor = float(policy.speed_factors[int(rng.integers(len(policy.speed_factors)))])
        return _fix_length(speed_perturb(x, factor, rate), len(x))
    if technique in ("Reverb", "ReverbNoise"):
        rir = policy.rir_bank[int(rng.integers(len(policy.rir_bank)))]
        x = convolve_rir(x, rir)
        if technique == "Reverb":
            return x
    if technique in ("Noise", "ReverbNoise"):
        noise = policy.noise_bank[int(rng.integers(len(policy.noise_bank)))]
        snr = rng.uniform(*policy.snr_db_range)
        if rms(x) == 0:
            # silence windows: noise at the level it would have against a 0.05-rms signal
            g = 0.05 / (rms(noise) * 10 ** (snr / 20))
            return np.clip(g * fit_noise(noise, len(x), rng), -1, 1)
        return add_noise_snr(x, noise, snr, rng)[0]
    raise ValueError(f"unknown technique {technique!r}")


def apply_policy(window: LabeledWindow, policy: AugmentationPolicy, seed: int = 0
                 ) -> list[tuple[LabeledWindow, TierMask]]:
    """Original window plus one corrupted copy per policy technique.

    Each copy draws from its own RNG stream keyed on (seed, recording, start,
    technique) so results do not depend on processing order.
    """
    policy.validate()
    out = [(window.with_samples(window.samples, FULL_MASK), FULL_MASK)]
    mask = policy.mask
    for tech in policy.techniques:
        rng = np.random.default_rng(stream_seed(seed, window.recording_id, window.start_s, tech))
        y = corrupt(window.samples, tech, policy, window.sample_rate_hz, rng)
        out.append((window.with_samples(y.astype(window.samples.dtype, copy=False), mask), mask))
    return out
