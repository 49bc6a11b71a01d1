"""Recordings, annotations, and inter-coder reliability.

Annotation interchange is a flat TSV, one vocalization per line::

    recording_id <TAB> speaker <TAB> voc_or_dash <TAB> start_s <TAB> end_s

Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.io import wavfile


class Speaker(str, Enum):
    CHN = "CHN"  # key child
    FAN = "FAN"  # female adult
    MAN = "MAN"  # male adult
    CXN = "CXN"  # other child / sibling


class VocClass(str, Enum):
    CRY = "CRY"
    FUS = "FUS"
    BAB = "BAB"
    CDS = "CDS"
    ADS = "ADS"
    LAU = "LAU"
    SNG = "SNG"


CHILD_VOCS = (VocClass.CRY, VocClass.FUS, VocClass.BAB)
ADULT_VOCS = (VocClass.CDS, VocClass.ADS, VocClass.LAU, VocClass.SNG)

# class inventories, index order is the model's class-id order
SD_CLASSES = ("SIL", "CHN", "FAN", "MAN", "CXN")
CHN_CLASSES = tuple(v.value for v in CHILD_VOCS)
ADU_CLASSES = tuple(v.value for v in ADULT_VOCS)
DOMAIN_CLASSES = ("In", "Out")

SILENCE = "SIL"
FRAME_S = 0.2


def legal_pair(speaker: Speaker, voc: Optional[VocClass]) -> bool:
    if speaker is Speaker.CXN:
        return voc is None
    if speaker is Speaker.CHN:
        return voc in CHILD_VOCS
    return voc in ADULT_VOCS


@dataclass(frozen=True)
class Annotation:
    speaker: Speaker
    voc: Optional[VocClass]
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0.0 <= self.start_s < self.end_s):
            raise ValueError(f"start >= end or negative start: {self.start_s}, {self.end_s}")
        if not legal_pair(self.speaker, self.voc):
            raise ValueError(f"illegal speaker/voc combination: {self.speaker.value}/{self.voc}")

    @property
    def label(self) -> str:
        """Combined speaker/vocalization label, e.g. ``CHN/BAB`` or ``CXN``."""
        if self.voc is None:
            return self.speaker.value
        return f"{self.speaker.value}/{self.voc.value}"

    def overlap(self, lo: float, hi: float) -> float:
        return max(0.0, min(self.end_s, hi) - max(self.start_s, lo))


@dataclass
class Recording:
    id: str
    family_id: str
    domain: str  # "In" | "Out"
    sample_rate_hz: int
    samples: np.ndarray
    age_months: Optional[float] = None

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.domain not in DOMAIN_CLASSES:
            raise ValueError(f"unknown domain {self.domain!r}")
        s = np.asarray(self.samples)
        if s.ndim != 1:
            raise ValueError("recording must be mono")
        if not np.all(np.isfinite(s)) or (s.size and np.max(np.abs(s)) > 1.0):
            raise ValueError("samples must be finite and within [-1, 1]")
        self.samples = s

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameLabelSequence:
    labels: tuple
    frame_s: float = FRAME_S

    def __len__(self):
        return len(self.labels)


class AnnotationParseError(ValueError):
    """Raised with every offending line; ``errors`` holds ``(lineno, message)`` pairs."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        super().__init__("; ".join(f"line {n}: {msg}" for n, msg in errors))


def parse_annotation_file(text: str) -> list[tuple[str, Annotation]]:
    out = []
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            errors.append((lineno, f"malformed field count ({len(fields)} != 5)"))
            continue
        rec_id, spk, voc, start, end = (f.strip() for f in fields)
        try:
            start_s, end_s = float(start), float(end)
        except ValueError:
            errors.append((lineno, "non-numeric time"))
            continue
        if not (math.isfinite(start_s) and math.isfinite(end_s)) or start_s < 0:
            errors.append((lineno, "non-numeric time"))
            continue
        if start_s >= end_s:
            errors.append((lineno, "start >= end"))
            continue
        try:
            speaker = Speaker(spk)
            voc_cls = None if voc in ("-", "") else VocClass(voc)
        except ValueError:
            errors.append((lineno, "illegal speaker/voc combination"))
            continue
        if not legal_pair(speaker, voc_cls):
            errors.append((lineno, "illegal speaker/voc combination"))
            continue
        out.append((rec_id, Annotation(speaker, voc_cls, start_s, end_s)))
    if errors:
        raise AnnotationParseError(errors)
    out.sort(key=lambda item: (item[0], item[1].start_s))
    return out


def format_annotations(items: Iterable[tuple[str, Annotation]]) -> str:
    lines = []
    for rec_id, a in items:
        voc = "-" if a.voc is None else a.voc.value
        lines.append(f"{rec_id}\t{a.speaker.value}\t{voc}\t{a.start_s!r}\t{a.end_s!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def group_by_recording(items: Iterable[tuple[str, Annotation]]) -> dict[str, list[Annotation]]:
    out: dict[str, list[Annotation]] = {}
    for rec_id, a in items:
        out.setdefault(rec_id, []).append(a)
    return out


def n_frames(duration_s: float, frame_s: float = FRAME_S) -> int:
    # 1 ms slack so 1.0 / 0.2 does not round up to 6 frames
    return max(1, math.ceil((duration_s - 1e-3) / frame_s))


def framewise_labels(
    annotations: Sequence[Annotation], duration_s: float, frame_s: float = FRAME_S
) -> FrameLabelSequence:
    """Label each frame ``[k*frame_s, (k+1)*frame_s)`` by its best-covering annotation.

    Silence competes as a candidate with its uncovered duration; on a tie
    between silence and an annotation the annotation wins, and ties between
    annotations go to the earlier start.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n = n_frames(duration_s, frame_s)
    ordered = sorted(annotations, key=lambda a: a.start_s)
    labels = []
    for k in range(n):
        lo, hi = k * frame_s, min((k + 1) * frame_s, duration_s)
        best, best_cov, covered = SILENCE, 0.0, 0.0
        for a in ordered:
            if a.start_s >= hi:
                break
            cov = a.overlap(lo, hi)
            if cov <= 5e-4:
                continue
            covered += cov
            if cov > best_cov + 5e-4:
                best, best_cov = a.label, cov
        silence = (hi - lo) - covered
        if best != SILENCE and silence > best_cov + 5e-4:
            best = SILENCE
        labels.append(best)
    return FrameLabelSequence(tuple(labels), frame_s)


def project_labels(frames: FrameLabelSequence, level: str) -> FrameLabelSequence:
    """Reduce ``SPK/VOC`` labels to the speaker (``level='speaker'``) or the vocalization."""
    if level == "full":
        return frames
    if level == "speaker":
        return FrameLabelSequence(tuple(l.split("/")[0] for l in frames.labels), frames.frame_s)
    if level == "voc":
        return FrameLabelSequence(tuple(l.split("/")[-1] for l in frames.labels), frames.frame_s)
    raise ValueError(f"unknown level {level!r}")


def cohen_kappa(frames_a: FrameLabelSequence, frames_b: FrameLabelSequence) -> float:
    a, b = list(frames_a.labels), list(frames_b.labels)
    if len(a) != len(b):
        raise ValueError("frame sequences differ in length")
    if abs(frames_a.frame_s - frames_b.frame_s) > 1e-12:
        raise ValueError("frame sizes differ")
    n = len(a)
    if n == 0:
        raise ValueError("zero-length input")
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = sum(ca[k] * cb.get(k, 0) for k in ca) / (n * n)
    if p_e >= 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


# --------------------------------------------------------------------- audio io


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono WAV as float64 in [-1, 1]; 16/32-bit integer or float PCM."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: multi-channel audio ({data.shape[1]} channels) is not supported")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return x, int(rate)


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    wavfile.write(str(path), int(rate), pcm)


# --------------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    id: str
    family_id: str
    domain: str
    audio_path: str
    age_months: Optional[float] = None
    annotation_path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def labeled(self) -> bool:
        return self.annotation_path is not None

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "family_id": self.family_id,
            "domain": self.domain,
            "age_months": self.age_months,
            "audio_path": self.audio_path,
        }
        if self.annotation_path is not None:
            d["annotation_path"] = self.annotation_path
        d.update(self.extra)
        return d


_MANIFEST_KEYS = {"id", "family_id", "domain", "age_months", "audio_path", "annotation_path"}


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        missing = {"id", "family_id", "domain", "audio_path"} - obj.keys()
        if missing:
            raise ValueError(f"{path}:{lineno}: missing manifest fields {sorted(missing)}")
        entry = ManifestEntry(
            id=obj["id"],
            family_id=obj["family_id"],
            domain=obj["domain"],
            audio_path=_resolve(path.parent, obj["audio_path"]),
            age_months=obj.get("age_months"),
            annotation_path=_resolve(path.parent, obj["annotation_path"])
            if obj.get("annotation_path")
            else None,
            extra={k: v for k, v in obj.items() if k not in _MANIFEST_KEYS},
        )
        entries.append(entry)
    return entries


def _resolve(base: Path, p: str) -> str:
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def load_recording(entry: ManifestEntry) -> Recording:
    samples, rate = read_wav(entry.audio_path)
    return Recording(
        id=entry.id,
        family_id=entry.family_id,
        domain=entry.domain,
        sample_rate_hz=rate,
        samples=samples,
        age_months=entry.age_months,
    )


def load_annotations(path) -> dict[str, list[Annotation]]:
    return group_by_recording(parse_annotation_file(Path(path).read_text(encoding="utf-8")))
