"""Macro-F1 scoring, leave-one-family-out splits, and evaluation reports."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .corpus import ADU_CLASSES, CHN_CLASSES, DOMAIN_CLASSES, SD_CLASSES
from .windowing import LabeledWindow

REPORT_SCHEMA_VERSION = 1
AGE_GROUPS = ((1.1, 4.0), (4.0, 9.0), (9.0, 13.0), (13.0, 14.0))
TIER_CLASSES = {"sd": SD_CLASSES, "chn": CHN_CLASSES, "adu": ADU_CLASSES}


# ------------------------------------------------------------------ metrics


def confusion_matrix(refs, hyps, class_set: Sequence) -> np.ndarray:
    """Rows are reference classes, columns hypotheses, both in ``class_set`` order."""
    index = {c: i for i, c in enumerate(class_set)}
    cm = np.zeros((len(class_set), len(class_set)), dtype=np.int64)
    for r, h in zip(refs, hyps):
        cm[index[r], index[h]] += 1
    return cm


def per_class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; 0 wherever the denominator is 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    ref = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, ref, out=np.zeros_like(tp), where=ref > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1_from_confusion(cm: np.ndarray, strict: bool = False) -> float:
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    _, _, f1 = per_class_scores(cm)
    if strict:
        return float(f1.mean())
    occurs = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    return float(f1[occurs].mean())


def macro_f1(refs, hyps, class_set: Sequence, strict: bool = False) -> float:
    """Unweighted mean of per-class F1.

    By default only classes occurring in ``refs`` or ``hyps`` are averaged;
    ``strict=True`` averages over the whole ``class_set``.
    """
    refs = list(refs)
    hyps = list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"length mismatch: {len(refs)} refs vs {len(hyps)} hyps")
    if not refs:
        raise ValueError("empty input")
    known = set(class_set)
    bad = (set(refs) | set(hyps)) - known
    if bad:
        raise ValueError(f"labels outside class set: {sorted(map(str, bad))}")
    return macro_f1_from_confusion(confusion_matrix(refs, hyps, class_set), strict)


# ------------------------------------------------------------------- splits


def age_group(age_months: float) -> Optional[int]:
    """Index of the (lo, hi] age group containing ``age_months``, or None."""
    for i, (lo, hi) in enumerate(AGE_GROUPS):
        if lo < age_months <= hi:
            return i
    return None


@dataclass(frozen=True)
class SplitPlan:
    train: frozenset
    dev: frozenset
    test: frozenset
    groups: dict = field(default_factory=dict, compare=False)  # family -> age group index

    def __post_init__(self):
        if self.train & self.dev or self.train & self.test or self.dev & self.test:
            raise ValueError("split sets overlap")

    def to_json(self) -> dict:
        return {
            "train": sorted(self.train),
            "dev": sorted(self.dev),
            "test": sorted(self.test),
            "groups": {k: self.groups[k] for k in sorted(self.groups)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitPlan":
        return cls(frozenset(obj["train"]), frozenset(obj["dev"]), frozenset(obj["test"]),
                   dict(obj.get("groups", {})))


def loso_split(families: dict, seed: int = 0, n_dev: int = 1) -> SplitPlan:
    """One random family per age group to test, ``n_dev`` of the rest to dev.

    ``families`` maps family id to infant age in months.
    """
    rng = np.random.default_rng(seed)
    groups = {f: age_group(a) for f, a in families.items()}
    test = set()
    for g in range(len(AGE_GROUPS)):
        members = sorted(f for f, gi in groups.items() if gi == g)
        if not members:
            lo, hi = AGE_GROUPS[g]
            warnings.warn(f"age group ({lo}, {hi}] has no families; no test family drawn")
            continue
        test.add(members[int(rng.integers(len(members)))])
    rest = sorted(set(families) - test)
    if len(rest) <= n_dev:
        raise ValueError(f"{len(rest)} families left after test selection; need more than n_dev={n_dev}")
    order = rng.permutation(len(rest))
    dev = {rest[i] for i in order[:n_dev]}
    train = set(rest) - dev
    return SplitPlan(frozenset(train), frozenset(dev), frozenset(test), groups)


def check_disjoint(*sets_of_windows: Sequence[LabeledWindow]) -> None:
    seen: dict[str, int] = {}
    for i, ws in enumerate(sets_of_windows):
        for fam in {w.family_id for w in ws}:
            if fam in seen and seen[fam] != i:
                raise ValueError(f"family {fam} appears in more than one split")
            seen[fam] = i


# --------------------------------------------------------------- prediction


def targets_of(windows: Sequence[LabeledWindow]) -> dict[str, np.ndarray]:
    """Class ids per tier with -1 where a tier is undefined."""
    return {
        "sd": np.array([w.sd for w in windows], dtype=np.int64),
        "chn": np.array([-1 if w.chn is None else w.chn for w in windows], dtype=np.int64),
        "adu": np.array([-1 if w.adu is None else w.adu for w in windows], dtype=np.int64),
        "domain": np.array([DOMAIN_CLASSES.index(w.domain) for w in windows], dtype=np.int64),
    }


def predict(model, windows: Sequence[LabeledWindow], batch_size: int = 64,
            spk_emb: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Argmax class ids per tier for every window."""
    dtype = next(model.parameters()).dtype
    was = model.training
    model.eval()
    out: dict[str, list] = {}
    dom = targets_of(windows)["domain"]
    try:
        with torch.no_grad():
            for i in range(0, len(windows), batch_size):
                chunk = windows[i : i + batch_size]
                x = torch.as_tensor(np.stack([w.samples for w in chunk]), dtype=dtype)
                d = torch.as_tensor(dom[i : i + batch_size])
                e = None if spk_emb is None else torch.as_tensor(spk_emb[i : i + batch_size])
                logits = model(x, d, e)
                for k, v in logits.items():
                    out.setdefault(k, []).append(v.argmax(dim=-1).numpy())
    finally:
        model.train(was)
    return {k: np.concatenate(v) for k, v in out.items()}


# ------------------------------------------------------------------- report


@dataclass
class TierReport:
    classes: list
    macro_f1: Optional[float]
    precision: list
    recall: list
    f1: list
    confusion: list
    n_scored: int

    @classmethod
    def build(cls, refs, hyps, class_set, strict=False) -> "TierReport":
        if len(refs) == 0:
            k = len(class_set)
            return cls(list(class_set), None, [0.0] * k, [0.0] * k, [0.0] * k,
                       np.zeros((k, k), dtype=int).tolist(), 0)
        names = list(class_set)
        cm = confusion_matrix([names[r] for r in refs], [names[h] for h in hyps], names)
        p, r, f = per_class_scores(cm)
        return cls(names, macro_f1_from_confusion(cm, strict), p.tolist(), r.tolist(), f.tolist(),
                   cm.tolist(), int(cm.sum()))


@dataclass
class EvalReport:
    tiers: dict
    per_family: dict
    counts: dict
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def average(self) -> Optional[float]:
        vals = [t.macro_f1 for t in self.tiers.values() if t.macro_f1 is not None]
        return float(np.mean(vals)) if vals else None

    def f1(self, tier: str) -> Optional[float]:
        return self.tiers[tier].macro_f1

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "macro_f1": {k: t.macro_f1 for k, t in self.tiers.items()},
            "average_macro_f1": self.average,
            "tiers": {k: vars(t) for k, t in self.tiers.items()},
            "per_family": self.per_family,
            "counts": self.counts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {obj.get('schema_version')}")
        tiers = {k: TierReport(**v) for k, v in obj["tiers"].items()}
        return cls(tiers, obj["per_family"], obj["counts"], obj["schema_version"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def export_confusions(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for tier, t in self.tiers.items():
            p = out_dir / f"confusion_{tier}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["ref\\hyp"] + t.classes)
                for name, row in zip(t.classes, t.confusion):
                    w.writerow([name] + row)
            paths.append(p)
        return paths


Predictor = Callable[[Sequence[LabeledWindow]], dict]


def evaluate(model: Union[torch.nn.Module, Predictor], windows: Sequence[LabeledWindow],
             counts: Optional[dict] = None, strict: bool = False,
             spk_emb: Optional[np.ndarray] = None) -> EvalReport:
    """Score SD on every window, CHN on CHN windows, ADU on FAN/MAN windows.

    ``model`` may be a network or any callable returning per-tier id arrays.
    """
    windows = list(windows)
    if isinstance(model, torch.nn.Module):
        hyps = predict(model, windows, spk_emb=spk_emb)
    else:
        hyps = {k: np.asarray(v) for k, v in model(windows).items()}
    refs = targets_of(windows)
    fams = np.array([w.family_id for w in windows])

    def tier_reports(sel):
        out = {}
        for tier, classes in TIER_CLASSES.items():
            keep = sel & (refs[tier] >= 0)
            out[tier] = TierReport.build(refs[tier][keep], hyps[tier][keep], classes, strict)
        return out

    all_sel = np.ones(len(windows), dtype=bool)
    tiers = tier_reports(all_sel)
    per_family = {}
    for fam in sorted(set(fams)):
        rep = tier_reports(fams == fam)
        per_family[fam] = {k: {"macro_f1": t.macro_f1, "n_scored": t.n_scored} for k, t in rep.items()}
    c = {"windows": len(windows)}
    if counts:
        c.update({k: int(v) for k, v in counts.items()})
    return EvalReport(tiers, per_family, c)


def plot_report(report: EvalReport, out_dir) -> list[Path]:
    """Per-tier F1 bar chart and one confusion heatmap per tier, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps SVG output byte-stable across runs
    meta = {"Date": None, "Creator": None}
    paths = []
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(report.tiers)
    vals = [report.tiers[k].macro_f1 or 0.0 for k in names]
    ax.bar([n.upper() for n in names], vals, color="#4472c4")
    ax.set_ylim(0, 1)
    ax.set_ylabel("macro F1")
    fig.tight_layout()
    p = out_dir / "f1_bars.svg"
    fig.savefig(p, format="svg", metadata=meta)
    plt.close(fig)
    paths.append(p)
    for tier, t in report.tiers.items():
        cm = np.asarray(t.confusion, dtype=float)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(cm, cmap="Blues")
        ax.set_xticks(range(len(t.classes)), t.classes, rotation=45)
        ax.set_yticks(range(len(t.classes)), t.classes)
        ax.set_xlabel("hypothesis")
        ax.set_ylabel("reference")
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, int(cm[i, j]), ha="center", va="center", fontsize=7)
        ax.set_title(tier.upper())
        fig.tight_layout()
        p = out_dir / f"confusion_{tier}.svg"
        fig.savefig(p, format="svg", metadata=meta)
        plt.close(fig)
        paths.append(p)
    return paths
