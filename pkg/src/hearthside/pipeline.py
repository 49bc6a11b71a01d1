"""Glue between on-disk corpora and the training / evaluation stages."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import add_noise_snr, pink_noise
from .corpus import Annotation, ManifestEntry, Recording, load_annotations, load_recording, read_manifest
from .evaluation import SplitPlan, loso_split
from .training import pretrain_segments
from .windowing import HOP_S, LabeledWindow, VadParams, WindowDataset, build_dataset


@dataclass
class PreparedData:
    dataset: WindowDataset
    plan: SplitPlan
    train: list
    dev: list
    test: list


def _load_labeled(entry: ManifestEntry) -> tuple[Recording, list[Annotation]]:
    anns = load_annotations(entry.annotation_path).get(entry.id, [])
    return load_recording(entry), anns


def load_labeled(entries: Sequence[ManifestEntry], jobs: int = 1):
    """(Recording, annotations) pairs for every labeled manifest entry, in manifest order."""
    lab = [e for e in entries if e.labeled]
    if jobs > 1 and len(lab) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_load_labeled, lab))
    return [_load_labeled(e) for e in lab]


def family_ages(entries: Sequence[ManifestEntry]) -> dict[str, float]:
    ages: dict[str, float] = {}
    for e in entries:
        if e.age_months is None:
            raise ValueError(f"recording {e.id} has no age_months; cannot split by age group")
        if ages.setdefault(e.family_id, e.age_months) != e.age_months:
            raise ValueError(f"family {e.family_id} has inconsistent ages")
    return ages


def split_windows(windows: Sequence[LabeledWindow], plan: SplitPlan):
    tr = [w for w in windows if w.family_id in plan.train]
    dv = [w for w in windows if w.family_id in plan.dev]
    te = [w for w in windows if w.family_id in plan.test]
    return tr, dv, te


def prepare(manifest, hop_s: float = HOP_S, gate: bool = True, split_seed: int = 0, n_dev: int = 1,
            jobs: int = 1) -> PreparedData:
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    items = load_labeled(entries, jobs)
    paths = {e.id: e.audio_path for e in entries}
    ds = build_dataset(items, apply_gate=gate, hop_s=hop_s, audio_paths=paths)
    # in-domain families only take part in the age-group split; out-of-domain go to train
    ages = family_ages([e for e in entries if e.domain == "In"])
    plan = loso_split(ages, split_seed, n_dev)
    out_fams = {e.family_id for e in entries if e.domain == "Out"} - set(ages)
    if out_fams:
        plan = SplitPlan(plan.train | out_fams, plan.dev, plan.test, plan.groups)
    tr, dv, te = split_windows(ds.windows, plan)
    return PreparedData(ds, plan, tr, dv, te)


def unlabeled_segments(manifest, params: VadParams = VadParams(),
                       families: Optional[set] = None) -> list[np.ndarray]:
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    recs = [load_recording(e) for e in entries if not e.labeled
            and (families is None or e.family_id in families)]
    return pretrain_segments(recs, params)


def noisy_copy(windows: Sequence[LabeledWindow], snr_db_range=(0.0, 10.0), seed: int = 0,
               silence_rms: float = 0.05) -> list[LabeledWindow]:
    """Test-time corruption: fresh pink noise at a random SNR per window."""
    rng = np.random.default_rng(seed)
    out = []
    for w in windows:
        n = len(w.samples)
        noise = pink_noise(n, rng)
        snr = rng.uniform(*snr_db_range)
        if np.sqrt(np.mean(np.square(w.samples, dtype=np.float64))) == 0:
            y = np.clip(noise * silence_rms / (np.std(noise) * 10 ** (snr / 20)), -1, 1)
        else:
            y, _ = add_noise_snr(w.samples, noise, snr, rng)
        out.append(w.with_samples(y.astype(w.samples.dtype), w.tier_mask))
    return out
