"""Fixed-length window extraction, window labeling, energy gating and VAD segmentation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import (
    ADU_CLASSES,
    CHN_CLASSES,
    SD_CLASSES,
    Annotation,
    Recording,
    Speaker,
    VocClass,
    read_wav,
)

WIN_S = 2.0
HOP_S = 0.2
CENTER = (0.5, 1.5)
MIN_LABEL_S = 0.2
# interval arithmetic resolves at 1 ms; comparisons use half of that
TOL = 1e-3
EPS = 5e-4


@dataclass(frozen=True)
class WindowLabel:
    kind: str  # "silence" | "speech" | "discard"
    speaker: Optional[Speaker] = None
    voc: Optional[VocClass] = None
    reason: Optional[str] = None  # "MultiSpeaker" | "BelowEnergyGate" | "NoDurableLabel"

    @classmethod
    def silence(cls):
        return cls("silence")

    @classmethod
    def speech(cls, speaker, voc=None):
        return cls("speech", speaker, voc)

    @classmethod
    def discard(cls, reason):
        return cls("discard", reason=reason)

    @property
    def is_discard(self) -> bool:
        return self.kind == "discard"


@dataclass(frozen=True)
class TierMask:
    sd: bool = True
    chn: bool = True
    adu: bool = True

    def __post_init__(self):
        if not (self.sd or self.chn or self.adu):
            raise ValueError("tier mask must enable at least one tier")

    def as_tuple(self):
        return (self.sd, self.chn, self.adu)


FULL_MASK = TierMask(True, True, True)


@dataclass
class LabeledWindow:
    recording_id: str
    family_id: str
    start_s: float
    samples: np.ndarray
    sample_rate_hz: int
    sd: int
    chn: Optional[int] = None
    adu: Optional[int] = None
    domain: str = "In"
    tier_mask: TierMask = FULL_MASK
    audio_path: Optional[str] = None

    @property
    def speaker(self) -> str:
        return SD_CLASSES[self.sd]

    @property
    def is_silence(self) -> bool:
        return self.sd == 0

    @property
    def energy(self) -> float:
        return mean_square(self.samples)

    def with_samples(self, samples, tier_mask: TierMask):
        return replace(self, samples=samples, tier_mask=tier_mask)


def mean_square(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    return float(np.mean(x * x))


def enumerate_windows(duration_s: float, win_s: float = WIN_S, hop_s: float = HOP_S) -> list[float]:
    if duration_s + TOL < win_s:
        return []
    n = int(math.floor((duration_s - win_s + TOL) / hop_s)) + 1
    return [round(k * hop_s, 9) for k in range(n)]


def _labels_overlapping(annotations, lo, hi):
    """Per combined label: total overlap with [lo, hi) and earliest overlapping start."""
    cover: dict[tuple, float] = {}
    first: dict[tuple, float] = {}
    for a in annotations:
        ov = a.overlap(lo, hi)
        if ov <= EPS:
            continue
        key = (a.speaker, a.voc)
        cover[key] = cover.get(key, 0.0) + ov
        first[key] = min(first.get(key, math.inf), a.start_s)
    return cover, first


def assign_window_label(
    window_start_s: float,
    annotations: Sequence[Annotation],
    win_s: float = WIN_S,
    center: tuple[float, float] = CENTER,
    min_label_s: float = MIN_LABEL_S,
) -> WindowLabel:
    lo, hi = window_start_s, window_start_s + win_s
    cover, first = _labels_overlapping(annotations, lo, hi)
    if not cover:
        return WindowLabel.silence()
    if len({spk for spk, _ in cover}) >= 2:
        return WindowLabel.discard("MultiSpeaker")
    if len(cover) == 1:
        (key, ov), = cover.items()
        if ov + EPS >= min_label_s:
            return WindowLabel.speech(*key)
        return WindowLabel.discard("NoDurableLabel")
    # several vocalization labels: the centered sub-interval decides
    centered = [a for a in annotations if (a.speaker, a.voc) in cover]
    c_cover, _ = _labels_overlapping(centered, lo + center[0], lo + center[1])
    if not c_cover:
        return WindowLabel.discard("NoDurableLabel")
    best = max(c_cover.values())
    tied = [k for k, v in c_cover.items() if v >= best - EPS]
    key = min(tied, key=lambda k: first[k])
    return WindowLabel.speech(*key)


def label_ids(label: WindowLabel) -> tuple[int, Optional[int], Optional[int]]:
    """Map a non-discard label to (sd, chn, adu) class ids."""
    if label.kind == "silence":
        return 0, None, None
    if label.kind != "speech":
        raise ValueError("discarded windows carry no targets")
    sd = SD_CLASSES.index(label.speaker.value)
    chn = adu = None
    if label.speaker is Speaker.CHN:
        chn = CHN_CLASSES.index(label.voc.value)
    elif label.speaker in (Speaker.FAN, Speaker.MAN):
        adu = ADU_CLASSES.index(label.voc.value)
    return sd, chn, adu


def min_chn_energy_threshold(in_domain: Iterable[LabeledWindow]) -> float:
    energies = [w.energy for w in in_domain if w.domain == "In" and w.speaker == "CHN"]
    if not energies:
        raise ValueError("threshold undefined: no in-domain CHN windows")
    return min(energies)


def energy_gate(window: LabeledWindow, threshold: float) -> bool:
    """True to keep the window."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if window.domain != "Out" or window.is_silence:
        return True
    return window.energy >= threshold


# ------------------------------------------------------------------------- VAD


@dataclass
class VadParams:
    frame_len_s: float = 0.025
    hop_s: float = 0.010
    energy_percentile: float = 30.0
    hangover_frames: int = 5
    max_segment_s: float = 10.0
    min_segment_s: float = 1.0
    # threshold sits this fraction of the way from the low to the high percentile
    margin: float = 0.5
    high_percentile: float = 95.0
    floor_db: float = -60.0
    # stationary input puts every frame at the threshold; this slack keeps it active
    tolerance_db: float = 1.0

    def __post_init__(self):
        if not (0 < self.min_segment_s <= self.max_segment_s):
            raise ValueError("need 0 < min_segment_s <= max_segment_s")
        if not (0 < self.energy_percentile < 100):
            raise ValueError("energy_percentile must be in (0, 100)")


def frame_log_energy(samples: np.ndarray, rate: int, frame_len_s: float, hop_s: float) -> np.ndarray:
    flen = max(1, int(round(frame_len_s * rate)))
    hop = max(1, int(round(hop_s * rate)))
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < flen:
        return np.zeros(0)
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::hop]
    return 10.0 * np.log10(np.mean(frames * frames, axis=1) + 1e-10)


def vad_segments(recording: Recording, params: VadParams = VadParams()) -> list[tuple[float, float]]:
    rate = recording.sample_rate_hz
    duration = recording.duration_s
    log_e = frame_log_energy(recording.samples, rate, params.frame_len_s, params.hop_s)
    if log_e.size == 0:
        return []
    low = np.percentile(log_e, params.energy_percentile)
    high = np.percentile(log_e, params.high_percentile)
    thr = low + params.margin * (high - low)
    active = (log_e >= thr - params.tolerance_db) & (log_e > params.floor_db)
    if params.hangover_frames > 0 and active.any():
        held = active.copy()
        idx = np.flatnonzero(active)
        for h in range(1, params.hangover_frames + 1):
            nxt = idx + h
            held[nxt[nxt < len(held)]] = True
        active = held
    segments = []
    k = 0
    n = len(active)
    while k < n:
        if not active[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and active[j + 1]:
            j += 1
        start = k * params.hop_s
        # the last frame extends past its hop; stop at the next frame start so runs stay disjoint
        end = min(duration, j * params.hop_s + params.frame_len_s)
        if j + 1 < n:
            end = min(end, (j + 1) * params.hop_s)
        segments.extend(_split_run(start, end, params))
        k = j + 1
    return segments


def _split_run(start, end, params):
    out = []
    t = start
    while end - t > TOL:
        stop = min(end, t + params.max_segment_s)
        if stop - t + TOL >= params.min_segment_s:
            out.append((round(t, 6), round(stop, 6)))
        t = stop
    return out


# --------------------------------------------------------------------- dataset


@dataclass
class WindowDataset:
    windows: list[LabeledWindow]
    counts: Counter = field(default_factory=Counter)
    threshold: Optional[float] = None

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i):
        return self.windows[i]


def label_recording(
    recording: Recording,
    annotations: Sequence[Annotation],
    win_s: float = WIN_S,
    hop_s: float = HOP_S,
    audio_path: Optional[str] = None,
    counts: Optional[Counter] = None,
) -> list[LabeledWindow]:
    rate = recording.sample_rate_hz
    n = int(round(win_s * rate))
    ordered = sorted(annotations, key=lambda a: a.start_s)
    out = []
    for start in enumerate_windows(recording.duration_s, win_s, hop_s):
        near = [a for a in ordered if a.end_s > start and a.start_s < start + win_s]
        label = assign_window_label(start, near, win_s)
        if label.is_discard:
            if counts is not None:
                counts[label.reason] += 1
            continue
        sd, chn, adu = label_ids(label)
        i0 = int(round(start * rate))
        seg = recording.samples[i0 : i0 + n]
        if len(seg) < n:
            seg = np.pad(seg, (0, n - len(seg)))
        out.append(
            LabeledWindow(
                recording_id=recording.id,
                family_id=recording.family_id,
                start_s=start,
                samples=seg,
                sample_rate_hz=rate,
                sd=sd,
                chn=chn,
                adu=adu,
                domain=recording.domain,
                audio_path=audio_path,
            )
        )
    return out


def build_dataset(
    items: Sequence[tuple[Recording, Optional[Sequence[Annotation]]]],
    apply_gate: bool = True,
    win_s: float = WIN_S,
    hop_s: float = HOP_S,
    threshold: Optional[float] = None,
    audio_paths: Optional[dict[str, str]] = None,
) -> WindowDataset:
    """Window and label every recording, then energy-gate out-of-domain speech.

    ``threshold`` overrides the gate level; otherwise it is the minimum energy of
    the in-domain CHN windows produced here.
    """
    counts: Counter = Counter()
    windows: list[LabeledWindow] = []
    for rec, anns in sorted(items, key=lambda it: it[0].id):
        if anns is None:
            raise ValueError(f"recording {rec.id} has no annotations")
        path = audio_paths.get(rec.id) if audio_paths else None
        windows.extend(label_recording(rec, anns, win_s, hop_s, path, counts))
    if apply_gate and any(w.domain == "Out" and not w.is_silence for w in windows):
        if threshold is None:
            threshold = min_chn_energy_threshold(windows)
        kept = []
        for w in windows:
            if energy_gate(w, threshold):
                kept.append(w)
            else:
                counts["BelowEnergyGate"] += 1
        windows = kept
    windows.sort(key=lambda w: (w.recording_id, w.start_s))
    return WindowDataset(windows, counts, threshold)


# ---------------------------------------------------------------- jsonl export


def export_windows(path, windows: Iterable[LabeledWindow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            rec = {
                "recording_id": w.recording_id,
                "family_id": w.family_id,
                "start_s": w.start_s,
                "sd": SD_CLASSES[w.sd],
                "domain": w.domain,
                "audio_path": w.audio_path,
            }
            if w.chn is not None:
                rec["chn"] = CHN_CLASSES[w.chn]
            if w.adu is not None:
                rec["adu"] = ADU_CLASSES[w.adu]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_windows(path, win_s: float = WIN_S) -> list[LabeledWindow]:
    """Read a window JSONL file, slicing audio from each line's ``audio_path``."""
    path = Path(path)
    cache: dict[str, tuple[np.ndarray, int]] = {}
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        audio = obj.get("audio_path")
        if not audio:
            raise ValueError(f"{path}: window without audio_path")
        if not Path(audio).is_absolute():
            audio = str(path.parent / audio)
        if audio not in cache:
            cache[audio] = read_wav(audio)
        samples, rate = cache[audio]
        n = int(round(win_s * rate))
        i0 = int(round(obj["start_s"] * rate))
        seg = samples[i0 : i0 + n]
        if len(seg) < n:
            seg = np.pad(seg, (0, n - len(seg)))
        out.append(
            LabeledWindow(
                recording_id=obj["recording_id"],
                family_id=obj.get("family_id", ""),
                start_s=obj["start_s"],
                samples=seg,
                sample_rate_hz=rate,
                sd=SD_CLASSES.index(obj["sd"]),
                chn=CHN_CLASSES.index(obj["chn"]) if obj.get("chn") else None,
                adu=ADU_CLASSES.index(obj["adu"]) if obj.get("adu") else None,
                domain=obj.get("domain", "In"),
                audio_path=audio,
            )
        )
    return out
