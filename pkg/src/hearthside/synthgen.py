"""Deterministic synthetic family-audio corpus.

Every (speaker, vocalization) pair gets its own pitch contour, amplitude
envelope and formant set, so the labelling task is learnable by
construction. Families differ by pitch, formant shift and noise level;
out-of-domain families additionally pass through a spectral tilt.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import (
    ADULT_VOCS,
    CHILD_VOCS,
    Annotation,
    ManifestEntry,
    Recording,
    Speaker,
    VocClass,
    format_annotations,
    legal_pair,
    read_manifest,
    write_manifest,
    write_wav,
)
from .evaluation import AGE_GROUPS

F0_RANGES = {
    Speaker.CHN: (350.0, 500.0),
    Speaker.FAN: (180.0, 250.0),
    Speaker.MAN: (90.0, 140.0),
    Speaker.CXN: (280.0, 400.0),
}
FORMANTS = {
    Speaker.CHN: (1000.0, 2500.0, 3500.0),
    Speaker.FAN: (650.0, 1700.0, 2800.0),
    Speaker.MAN: (500.0, 1350.0, 2400.0),
    Speaker.CXN: (800.0, 2100.0, 3100.0),
}
DEFAULT_DENSITY = {Speaker.CHN: 6.0, Speaker.FAN: 5.0, Speaker.MAN: 3.5, Speaker.CXN: 2.5}


def stable_seed(*parts) -> int:
    key = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


@dataclass
class FamilyProfile:
    family_id: str
    age_months: float
    f0: dict  # Speaker -> base f0 in Hz
    formant_shift: float  # multiplicative, within +-5%
    noise_level: float  # background rms
    domain: str = "In"

    @classmethod
    def generate(cls, corpus_seed: int, family_id: str, age_months: float, domain: str = "In",
                 noise_level: Optional[float] = None) -> "FamilyProfile":
        rng = np.random.default_rng(stable_seed(corpus_seed, family_id))
        f0 = {}
        for spk, (lo, hi) in F0_RANGES.items():
            pad = 0.15 * (hi - lo)
            f0[spk] = float(rng.uniform(lo + pad, hi - pad))
        shift = float(rng.uniform(0.95, 1.05))
        level = float(rng.uniform(0.004, 0.012)) if noise_level is None else noise_level
        return cls(family_id, age_months, f0, shift, level, domain)


# ------------------------------------------------------------- vocalization


def _smooth_noise(n, rate, cutoff_hz, rng):
    """Low-pass random curve in [0, 1]."""
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[freqs > cutoff_hz] = 0
    y = np.fft.irfft(spec, n=n)
    y = (y - y.min()) / (np.ptp(y) + 1e-12)
    return y


def _contour_and_envelope(speaker, voc, n, rate, base, rng):
    t = np.arange(n) / rate
    lo, hi = F0_RANGES[speaker]
    breath = 0.05
    if voc is VocClass.CRY:
        f0 = base * (1.0 + 0.12 * ((t * 1.5 + rng.uniform()) % 1.0))
        env = 0.55 + 0.45 * np.sin(2 * np.pi * 9.0 * t + rng.uniform(0, 6.3)) ** 2
        gain, breath = 0.85, 0.18
    elif voc is VocClass.FUS:
        f0 = base * (1.0 + 0.03 * np.sin(2 * np.pi * 0.7 * t))
        env = _smooth_noise(n, rate, 4.0, rng) ** 2
        gain, breath = 0.3, 0.35
    elif voc is VocClass.BAB:
        f0 = base * (1.0 + 0.06 * np.sin(2 * np.pi * 1.1 * t + rng.uniform(0, 6.3)))
        env = np.clip(np.sin(2 * np.pi * 3.5 * t + rng.uniform(0, 6.3)), 0, None) ** 1.5
        gain = 0.6
    elif voc is VocClass.CDS:
        f0 = base * (1.0 + 0.22 * np.sin(2 * np.pi * 1.3 * t + rng.uniform(0, 6.3)))
        env = 0.6 + 0.4 * np.clip(np.sin(2 * np.pi * 2.5 * t), 0, None)
        gain = 0.65
    elif voc is VocClass.ADS:
        f0 = base * (1.0 + 0.025 * np.sin(2 * np.pi * 2.0 * t + rng.uniform(0, 6.3)))
        env = 0.5 + 0.5 * np.clip(np.sin(2 * np.pi * 4.5 * t + rng.uniform(0, 6.3)), 0, None)
        gain = 0.55
    elif voc is VocClass.LAU:
        f0 = base * (1.08 - 0.06 * ((t * 5.0) % 1.0))
        env = (((t * 5.0 + rng.uniform()) % 1.0) < 0.3).astype(float)
        gain, breath = 0.6, 0.45
    elif voc is VocClass.SNG:
        steps = np.array([0, 2, 3, 2, 0, -2, -3, -2])
        idx = ((t / 0.45).astype(int) + int(rng.integers(8))) % len(steps)
        vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * 5.5 * t)
        f0 = base * 2.0 ** (steps[idx] / 12.0) * vibrato
        env = np.full(n, 0.9)
        gain, breath = 0.6, 0.02
    else:  # CXN: slower rhythmic chatter
        f0 = base * (1.0 + 0.1 * np.sin(2 * np.pi * 0.8 * t + rng.uniform(0, 6.3)))
        env = 0.35 + 0.65 * np.clip(np.sin(2 * np.pi * 2.2 * t + rng.uniform(0, 6.3)), 0, None)
        gain, breath = 0.5, 0.12
    f0 = np.clip(f0, lo, hi)
    return f0, env, gain, breath


# harmonic amplitude rolloff exponent per class; brighter = smaller
BRIGHTNESS = {
    VocClass.SNG: 0.2, VocClass.CDS: 0.75, VocClass.ADS: 1.3,
    VocClass.FUS: 1.0, VocClass.CRY: 0.5,
}


def _formant_gain(freqs, formants, bandwidth):
    g = np.zeros_like(freqs)
    for i, fc in enumerate(formants):
        g += (0.8 ** i) * np.exp(-0.5 * ((freqs - fc) / bandwidth) ** 2)
    return 0.15 + g


def synth_vocalization(speaker: Speaker, voc: Optional[VocClass], duration_s: float,
                       profile: FamilyProfile, rng: np.random.Generator, rate: int = 8000) -> np.ndarray:
    if not legal_pair(speaker, voc):
        raise ValueError(f"illegal speaker/voc pair {speaker}/{voc}")
    if not 0.2 - 1e-9 <= duration_s <= 5.0 + 1e-9:
        raise ValueError("duration must be within [0.2, 5] s")
    n = int(round(duration_s * rate))
    f0, env, gain, breath = _contour_and_envelope(speaker, voc, n, rate, profile.f0[speaker], rng)
    phase = 2 * np.pi * np.cumsum(f0) / rate + rng.uniform(0, 2 * np.pi)
    formants = tuple(f * profile.formant_shift for f in FORMANTS[speaker])
    max_h = int((0.45 * rate) // f0.min())
    y = np.zeros(n)
    for h in range(1, max_h + 1):
        fh = h * f0
        amp = _formant_gain(fh, formants, 180.0) / h ** BRIGHTNESS.get(voc, 0.7)
        amp[fh > 0.45 * rate] = 0.0
        y += amp * np.sin(h * phase)
    y /= np.max(np.abs(y)) + 1e-12
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    spec *= _formant_gain(np.fft.rfftfreq(n, 1.0 / rate), formants, 300.0)
    noise = np.fft.irfft(spec, n=n)
    noise /= np.max(np.abs(noise)) + 1e-12
    y = (1 - breath) * y + breath * noise
    # 10 ms raised-cosine ramps
    ramp = min(n // 2, int(0.01 * rate))
    if ramp:
        w = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env = env.copy()
        env[:ramp] *= w
        env[-ramp:] *= w[::-1]
    y = y * env
    peak = np.max(np.abs(y))
    if peak > 0:
        y *= min(0.9, gain) / peak
    return y


# ---------------------------------------------------------------- recording


def pink(n, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    y = np.fft.irfft(spec / np.sqrt(f), n=n)
    return y / (np.std(y) + 1e-12)


def apply_tilt(x: np.ndarray, rate: int, db_per_octave: float, ref_hz: float = 1000.0) -> np.ndarray:
    """Spectral tilt: gain(f) = db_per_octave * log2(f / ref_hz) dB, frozen below 50 Hz."""
    if db_per_octave == 0:
        return x.copy()
    spec = np.fft.rfft(x)
    freqs = np.maximum(np.fft.rfftfreq(len(x), 1.0 / rate), 50.0)
    spec *= 10.0 ** (db_per_octave * np.log2(freqs / ref_hz) / 20.0)
    return np.fft.irfft(spec, n=len(x))


def _pick_voc(speaker, rng):
    if speaker is Speaker.CHN:
        return CHILD_VOCS[int(rng.choice(3, p=[0.25, 0.3, 0.45]))]
    if speaker in (Speaker.FAN, Speaker.MAN):
        return ADULT_VOCS[int(rng.choice(4, p=[0.35, 0.35, 0.15, 0.15]))]
    return None


def synth_recording(profile: FamilyProfile, length_s: float, rng: np.random.Generator,
                    densities: Optional[dict] = None, overlap_prob: float = 0.05, rate: int = 8000,
                    recording_id: str = "rec", dur_range_s=(0.5, 2.5), tilt_db_per_octave: float = 0.0
                    ) -> tuple[Recording, list[Annotation]]:
    """Place vocalizations on a timeline over background noise.

    ``densities`` gives expected vocalizations per minute per speaker. With
    probability ``overlap_prob`` a vocalization is joined by another
    speaker's overlapping turn. Annotation times sit on a 10 ms grid.
    """
    densities = dict(DEFAULT_DENSITY if densities is None else densities)
    n = int(round(length_s * rate))
    audio = profile.noise_level * pink(n, rng)
    annotations: list[Annotation] = []
    total_rate = sum(densities.values())  # per minute
    mean_dur = 0.5 * (dur_range_s[0] + dur_range_s[1])
    if total_rate > 0:
        gap_mean = 60.0 / total_rate - mean_dur
        if gap_mean <= 0.1:
            raise ValueError("infeasible density: total speech exceeds the recording length")
        speakers = list(densities)
        probs = np.array([densities[s] for s in speakers]) / total_rate
        t = rng.exponential(gap_mean)
        while True:
            spk = speakers[int(rng.choice(len(speakers), p=probs))]
            dur = round(float(rng.uniform(*dur_range_s)), 2)
            start = round(t, 2)
            if start + dur > length_s - 0.05:
                break
            events = [(spk, start, dur)]
            if overlap_prob > 0 and rng.random() < overlap_prob:
                other = [s for s in speakers if s is not spk]
                spk2 = other[int(rng.integers(len(other)))]
                d2 = round(float(rng.uniform(0.3, dur)), 2)
                s2 = round(start + float(rng.uniform(0.0, dur - 0.2)), 2)
                if s2 + d2 <= length_s - 0.05:
                    events.append((spk2, s2, d2))
            for s_, st, d in events:
                voc = _pick_voc(s_, rng)
                clip = synth_vocalization(s_, voc, d, profile, rng, rate)
                i0 = int(round(st * rate))
                audio[i0 : i0 + len(clip)] += clip[: n - i0]
                annotations.append(Annotation(s_, voc, st, round(st + d, 2)))
            t = start + dur + max(0.15, rng.exponential(gap_mean))
    if tilt_db_per_octave:
        audio = apply_tilt(audio, rate, tilt_db_per_octave)
    audio = np.clip(audio, -1.0, 1.0)
    annotations.sort(key=lambda a: a.start_s)
    rec = Recording(recording_id, profile.family_id, profile.domain, rate, audio, profile.age_months)
    return rec, annotations


def babble_clip(profiles, seconds: float, rng, rate: int = 8000, talkers: int = 4) -> np.ndarray:
    """Sum of several overlapping vocalization streams from other families."""
    n = int(seconds * rate)
    out = np.zeros(n)
    for k in range(talkers):
        prof = profiles[k % len(profiles)]
        t = 0.0
        while t < seconds - 0.3:
            spk = list(F0_RANGES)[int(rng.integers(4))]
            dur = min(float(rng.uniform(0.4, 1.5)), seconds - t)
            if dur < 0.2:
                break
            clip = synth_vocalization(spk, _pick_voc(spk, rng), dur, prof, rng, rate)
            i0 = int(t * rate)
            out[i0 : i0 + len(clip)] += clip[: n - i0]
            t += dur + float(rng.uniform(0.0, 0.3))
    return out / (np.std(out) + 1e-12) * 0.1


# ----------------------------------------------------------- separability


PAIRS = [(Speaker.CHN, v) for v in CHILD_VOCS] + [
    (s, v) for s in (Speaker.FAN, Speaker.MAN) for v in ADULT_VOCS
] + [(Speaker.CXN, None)]


def clip_features(x: np.ndarray, rate: int, n_mels: int = 24) -> np.ndarray:
    """Mean and std of the log-mel spectrogram: a fixed-length description of one clip."""
    from .model import mel_filterbank

    n_fft = 256 if rate <= 8000 else 512
    hop = n_fft // 2
    frames = np.lib.stride_tricks.sliding_window_view(np.pad(x, (0, n_fft)), n_fft)[::hop]
    power = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=1)) ** 2
    mel = np.log(power @ mel_filterbank(n_fft, rate, n_mels).T + 1e-8)
    return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])


def validate_separability(profile: FamilyProfile, rate: int = 8000, margin: float = 1.0,
                          seed: int = 0) -> float:
    """Minimum pairwise feature distance between (speaker, voc) prototypes; raises below ``margin``."""
    rng = np.random.default_rng(seed)
    feats = np.stack([clip_features(synth_vocalization(s, v, 1.5, profile, rng, rate), rate)
                      for s, v in PAIRS])
    d = np.linalg.norm(feats[:, None] - feats[None, :], axis=-1)
    d[np.diag_indices(len(PAIRS))] = np.inf
    worst = float(d.min())
    if worst < margin:
        raise ValueError(f"family {profile.family_id}: vocalization types not separable ({worst:.3f})")
    return worst


# ------------------------------------------------------------------ corpus


@dataclass
class CorpusConfig:
    n_families: int = 8
    out_families: int = 0
    labeled_minutes: float = 30.0
    unlabeled_minutes: float = 120.0
    segment_minutes: float = 2.5
    sample_rate: int = 8000
    overlap_prob: float = 0.05
    tilt_db_per_octave: float = -4.0
    out_noise_level: float = 0.02
    densities: dict = field(default_factory=lambda: {k.value: v for k, v in DEFAULT_DENSITY.items()})

    def __post_init__(self):
        if self.n_families < 1 or not 0 <= self.out_families <= self.n_families:
            raise ValueError("invalid family counts")
        if self.labeled_minutes < 0 or self.unlabeled_minutes < 0 or self.segment_minutes <= 0:
            raise ValueError("durations must be non-negative")


def family_ages(n: int) -> list[float]:
    """Spread families round-robin over the four infant age groups."""
    ages = []
    for i in range(n):
        lo, hi = AGE_GROUPS[i % len(AGE_GROUPS)]
        frac = ((i // len(AGE_GROUPS)) * 0.37 + 0.3) % 1.0
        ages.append(round(lo + (hi - lo) * (0.1 + 0.8 * frac), 2))
    return ages


def _segments(total_min: float, seg_min: float) -> list[float]:
    out = []
    left = total_min
    while left > 1e-9:
        out.append(min(seg_min, left))
        left -= seg_min
    return [m for m in out if m * 60 >= 2.0]


def synth_corpus(config: CorpusConfig, out_dir, seed: int = 0) -> list[ManifestEntry]:
    """Write WAVs, annotation TSVs and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rate = config.sample_rate
    densities = {Speaker(k): v for k, v in config.densities.items()}
    ages = family_ages(config.n_families)
    entries = []
    n_in = config.n_families - config.out_families
    for i in range(config.n_families):
        fam = f"fam{i:02d}"
        domain = "In" if i < n_in else "Out"
        profile = FamilyProfile.generate(
            seed, fam, ages[i], domain, noise_level=config.out_noise_level if domain == "Out" else None
        )
        validate_separability(profile, rate)
        tilt = config.tilt_db_per_octave if domain == "Out" else 0.0
        plan = [("lab", m) for m in _segments(config.labeled_minutes / config.n_families,
                                               config.segment_minutes)]
        plan += [("unl", m) for m in _segments(config.unlabeled_minutes / config.n_families,
                                                config.segment_minutes * 2)]
        for j, (kind, minutes) in enumerate(plan):
            rec_id = f"{fam}_{kind}{j:02d}"
            rng = np.random.default_rng(stable_seed(seed, rec_id))
            rec, anns = synth_recording(profile, minutes * 60.0, rng, densities, config.overlap_prob,
                                        rate, rec_id, tilt_db_per_octave=tilt)
            wav = out / "audio" / f"{rec_id}.wav"
            write_wav(wav, rec.samples, rate)
            entry = ManifestEntry(rec_id, fam, domain, str(wav.relative_to(out)), ages[i])
            if kind == "lab":
                tsv = out / "annotations" / f"{rec_id}.tsv"
                tsv.write_text(format_annotations((rec_id, a) for a in anns), encoding="utf-8")
                entry.annotation_path = str(tsv.relative_to(out))
            entries.append(entry)
    write_manifest(out / "manifest.jsonl", entries)
    (out / "corpus_config.json").write_text(
        json.dumps({"seed": seed, **asdict(config)}, indent=2, sort_keys=True), encoding="utf-8"
    )
    return read_manifest(out / "manifest.jsonl")
