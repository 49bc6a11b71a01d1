import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hearthside.evaluation import (
    AGE_GROUPS,
    EvalReport,
    SplitPlan,
    age_group,
    check_disjoint,
    confusion_matrix,
    evaluate,
    loso_split,
    macro_f1,
    macro_f1_from_confusion,
    plot_report,
    targets_of,
)


def binary_fixture():
    refs = ["p"] * 40 + ["n"] * 10 + ["p"] * 20 + ["n"] * 30
    hyps = ["p"] * 40 + ["p"] * 10 + ["n"] * 20 + ["n"] * 30
    return refs, hyps


def test_binary_fixture():
    refs, hyps = binary_fixture()
    # hand computation: P+ = 40/50, R+ = 40/60 -> 0.7273; P- = 30/50, R- = 30/40 -> 0.6667
    f_pos = 2 * 0.8 * (2 / 3) / (0.8 + 2 / 3)
    f_neg = 2 * 0.6 * 0.75 / (0.6 + 0.75)
    assert f_pos == pytest.approx(0.7273, abs=1e-4)
    assert f_neg == pytest.approx(0.6667, abs=1e-4)
    assert macro_f1(refs, hyps, ["p", "n"]) == pytest.approx(0.6970, abs=1e-4)


def test_identity_is_one():
    refs = ["a", "b", "c", "a", "c"]
    assert macro_f1(refs, refs, ["a", "b", "c"]) == 1.0


def test_absent_class_excluded():
    refs = ["a", "b", "a", "b"]
    hyps = ["a", "b", "b", "b"]
    assert macro_f1(refs, hyps, ["a", "b", "z"]) == macro_f1(refs, hyps, ["a", "b"])
    strict = macro_f1(refs, hyps, ["a", "b", "z"], strict=True)
    assert strict == pytest.approx(macro_f1(refs, hyps, ["a", "b"]) * 2 / 3)


def test_class_only_in_hyps_counts():
    # a spurious prediction of class c drags the macro average down
    assert macro_f1(["a", "a"], ["a", "c"], ["a", "c"]) == pytest.approx((2 / 3 + 0) / 2)


def test_macro_f1_errors():
    with pytest.raises(ValueError):
        macro_f1([], [], ["a"])
    with pytest.raises(ValueError):
        macro_f1(["a"], ["a", "a"], ["a"])
    with pytest.raises(ValueError):
        macro_f1(["a"], ["q"], ["a"])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
       st.permutations(range(4)))
def test_relabel_invariance(pairs, perm):
    refs = [r for r, _ in pairs]
    hyps = [h for _, h in pairs]
    base = macro_f1(refs, hyps, range(4))
    moved = macro_f1([perm[r] for r in refs], [perm[h] for h in hyps], range(4))
    assert moved == pytest.approx(base, abs=1e-12)
    assert 0.0 <= base <= 1.0


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_confusion_rows_are_ref_counts(pairs):
    refs = [r for r, _ in pairs]
    cm = confusion_matrix(refs, [h for _, h in pairs], range(3))
    assert cm.sum(axis=1).tolist() == [refs.count(c) for c in range(3)]
    assert cm.sum() == len(pairs)


# ------------------------------------------------------------------ splits


def families_22():
    fams = {}
    for i in range(22):
        lo, hi = AGE_GROUPS[i % 4]
        fams[f"f{i:02d}"] = lo + (hi - lo) * (0.2 + 0.6 * (i / 22))
    return fams


def test_age_groups_half_open():
    assert age_group(1.1) is None
    assert age_group(4.0) == 0
    assert age_group(4.01) == 1
    assert age_group(14.0) == 3
    assert age_group(15) is None


def test_loso_22_families():
    plan = loso_split(families_22(), seed=3)
    assert len(plan.test) == 4
    assert sorted(plan.groups[f] for f in plan.test) == [0, 1, 2, 3]
    assert len(plan.dev) == 1
    assert plan.train | plan.dev | plan.test == set(families_22())
    assert loso_split(families_22(), seed=3) == plan


def test_loso_thousand_seeds_disjoint():
    fams = families_22()
    overlaps = 0
    for seed in range(1000):
        p = loso_split(fams, seed)
        overlaps += len(p.train & p.dev) + len(p.train & p.test) + len(p.dev & p.test)
    assert overlaps == 0


def test_loso_empty_group_warns():
    fams = {"a": 2.0, "b": 3.0, "c": 5.0, "d": 6.0}
    with pytest.warns(UserWarning):
        plan = loso_split(fams, 0)
    assert len(plan.test) == 2


@pytest.mark.filterwarnings("ignore:age group")
def test_loso_too_few():
    with pytest.raises(ValueError):
        loso_split({"a": 2.0, "b": 5.0}, 0)


def test_split_plan_guards():
    with pytest.raises(ValueError):
        SplitPlan(frozenset({"a"}), frozenset({"a"}), frozenset())
    p = loso_split(families_22(), 1)
    assert SplitPlan.from_json(json.loads(json.dumps(p.to_json()))) == p


def test_check_disjoint(small_data):
    check_disjoint(small_data.train, small_data.dev, small_data.test)
    with pytest.raises(ValueError):
        check_disjoint(small_data.train, small_data.train[:3])


# ------------------------------------------------------------------ report


def oracle(windows):
    return targets_of(windows)


def test_oracle_scores_one(small_data):
    rep = evaluate(oracle, small_data.test)
    assert rep.f1("sd") == rep.f1("chn") == rep.f1("adu") == 1.0
    assert rep.average == 1.0


def test_constant_silence_on_silence(small_data):
    sil = [w for w in small_data.dataset.windows if w.sd == 0]
    assert sil
    rep = evaluate(lambda ws: {k: np.zeros(len(ws), int) for k in ("sd", "chn", "adu")}, sil)
    assert rep.f1("sd") == 1.0
    assert rep.f1("chn") is None and rep.f1("adu") is None


def test_report_self_consistent(tmp_path, small_data):
    rng = np.random.default_rng(0)

    def noisy(ws):
        t = targets_of(ws)
        out = {}
        for k, n in (("sd", 5), ("chn", 3), ("adu", 4)):
            flip = rng.random(len(ws)) < 0.3
            out[k] = np.where(flip, rng.integers(0, n, len(ws)), np.maximum(t[k], 0))
        return out

    rep = evaluate(noisy, small_data.test, counts={"discarded": 7})
    t = targets_of(small_data.test)
    for tier, tr in rep.tiers.items():
        cm = np.array(tr.confusion)
        assert macro_f1_from_confusion(cm) == pytest.approx(tr.macro_f1, abs=1e-9)
        assert cm.sum() == tr.n_scored == int((t[tier] >= 0).sum())
        assert all(0 <= v <= 1 for v in tr.precision + tr.recall + tr.f1)
    # CHN scored only on key-child windows, ADU on adult windows
    assert rep.tiers["chn"].n_scored == sum(w.speaker == "CHN" for w in small_data.test)
    assert rep.tiers["adu"].n_scored == sum(w.speaker in ("FAN", "MAN") for w in small_data.test)
    assert rep.counts == {"windows": len(small_data.test), "discarded": 7}

    rep.save(tmp_path / "r.json")
    back = EvalReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_json() == rep.to_json()
    assert set(json.loads((tmp_path / "r.json").read_text())["macro_f1"]) == {"sd", "chn", "adu"}
    csvs = rep.export_confusions(tmp_path / "csv")
    assert [p.name for p in csvs] == ["confusion_sd.csv", "confusion_chn.csv", "confusion_adu.csv"]
    svgs = plot_report(rep, tmp_path / "plots")
    assert svgs and all(p.read_text().lstrip().startswith("<?xml") for p in svgs)


def test_report_schema_version_checked():
    with pytest.raises(ValueError):
        EvalReport.from_json({"schema_version": 99, "tiers": {}, "per_family": {}, "counts": {}})
