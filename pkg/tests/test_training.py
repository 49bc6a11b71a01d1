import json

import numpy as np
import pytest
import torch

from hearthside.model import Encoder, EncoderConfig
from hearthside.nncore import load_checkpoint
from hearthside.pipeline import unlabeled_segments
from hearthside.training import (
    Checkpoint,
    EpochRecord,
    TrainConfig,
    TrainHistory,
    dev_average,
    finetune,
    load_model,
    pretrain,
    resolve_checkpoint,
    select_best_epoch,
)

TINY = EncoderConfig(layers=2, dim=32, heads=2, sample_rate=8000)


@pytest.fixture(scope="module")
def segments(small_corpus):
    return unlabeled_segments(small_corpus)


# ---------------------------------------------------------------- pretrain


def test_pretrain_zero_steps_is_init(segments):
    res = pretrain(segments, TINY, 0, seed=5)
    torch.manual_seed(5)
    ref = Encoder(TINY).state_dict()
    assert res.losses == []
    for k, v in ref.items():
        assert torch.equal(res.checkpoint.tensors[k], v)


def test_pretrain_deterministic(segments, tmp_path):
    a = pretrain(segments, TINY, 3, seed=1)
    b = pretrain(segments, TINY, 3, seed=1)
    a.checkpoint.save(tmp_path / "a.ckpt")
    b.checkpoint.save(tmp_path / "b.ckpt")
    assert a.losses == b.losses
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_pretrain_input_checks(segments):
    with pytest.raises(ValueError):
        pretrain([], TINY, 1)
    with pytest.raises(ValueError):
        pretrain([np.zeros(4000)], TINY, 1)
    assert all(8000 <= len(s) <= 80000 for s in segments)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pretrain_contrastive_drops(segments, seed):
    seen = {}
    pretrain(segments, EncoderConfig(sample_rate=8000), 200, seed=seed,
             progress=lambda d: seen.__setitem__(d["step"], d["contrastive"]))
    first, last = seen[1], seen[200]
    print(f"seed {seed}: contrastive step 1 {first:.3f} step 200 {last:.3f} ({1 - last / first:.1%} drop)")
    assert last <= 0.8 * first


# ---------------------------------------------------------------- history


def history_of(avgs):
    h = TrainHistory()
    for i, a in enumerate(avgs, 1):
        h.append(EpochRecord(i, 1.0, {"sd": a, "chn": a, "adu": a}, a, {"heads": 1e-4}))
    return h


def test_select_best_examples():
    assert select_best_epoch(history_of([0.5, 0.7, 0.6])) == 2
    assert select_best_epoch(history_of([0.4, 0.4, 0.4])) == 1
    with pytest.raises(ValueError):
        select_best_epoch(TrainHistory())


def test_history_epoch_guard_and_roundtrip():
    h = history_of([0.1, 0.2])
    with pytest.raises(ValueError):
        h.append(EpochRecord(4, 1.0, {}, 0.0, {}))
    assert TrainHistory.from_jsonl(h.to_jsonl()) == h


def test_dev_average_skips_null_tier():
    assert dev_average({"sd": 0.9, "chn": None, "adu": 0.5}) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        dev_average({"sd": None})


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="XX")
    with pytest.raises(ValueError):
        TrainConfig(domain_tagging="Bogus")
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr_heads, c.lr_encoder) == (10, 32, 1e-4, 1e-5)


# ---------------------------------------------------------------- finetune


def test_finetune_guards(small_data):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(ValueError):
        finetune(small_data.train, [], cfg, encoder_config=TINY)
    with pytest.raises(ValueError):
        finetune(small_data.train, small_data.train[:5], cfg, encoder_config=TINY)
    with pytest.raises(ValueError):
        finetune(small_data.train, small_data.dev, cfg)
    with pytest.raises(ValueError):
        finetune(small_data.train, small_data.dev, cfg, encoder_config=EncoderConfig(sample_rate=16000))


@pytest.fixture(scope="module")
def ft_run(small_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("ft")
    cfg = TrainConfig(epochs=3, batch_size=16, lr_heads=1e-3, lr_encoder=1e-4)
    model, hist = finetune(small_data.train, small_data.dev, cfg, encoder_config=TINY, run_dir=run)
    return run, model, hist


def test_run_dir_layout(ft_run):
    run, model, hist = ft_run
    assert len(hist) == 3
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["train_config"]["epochs"] == 3
    assert TrainHistory.from_jsonl((run / "history.jsonl").read_text()) == hist
    for k in (1, 2, 3):
        assert (run / "checkpoints" / f"epoch_{k}.ckpt").exists()
    best = select_best_epoch(hist)
    assert resolve_checkpoint(run / "best.ckpt") == run / "checkpoints" / f"epoch_{best}.ckpt"
    loaded = load_model(run / "best.ckpt")
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)


def test_history_recompute(ft_run):
    _, _, hist = ft_run
    for e in hist.epochs:
        vals = [v for v in e.dev_f1.values() if v is not None]
        assert abs(np.mean(vals) - e.dev_average) < 1e-9
        assert np.isfinite(e.train_loss) and e.train_loss > 0


def test_newbob_lrs_only_halve(ft_run):
    _, _, hist = ft_run
    for prev, cur in zip(hist.epochs, hist.epochs[1:]):
        for g, lr in cur.lrs.items():
            assert lr / prev.lrs[g] in (pytest.approx(1.0), pytest.approx(0.5))
    assert hist.epochs[0].lrs == {"heads": 1e-3, "encoder": 1e-4}


def test_newbob_trace_exact(ft_run):
    _, _, hist = ft_run
    best = hist.epochs[0].dev_average
    lr = dict(hist.epochs[0].lrs)
    for prev, cur in zip(hist.epochs, hist.epochs[1:]):
        if prev is not hist.epochs[0]:
            if (prev.dev_average - best) / max(abs(best), 1e-12) < 0.0025:
                lr = {k: v * 0.5 for k, v in lr.items()}
            best = max(best, prev.dev_average)
        assert cur.lrs == pytest.approx(lr)


def test_finetune_changes_encoder_in_ft(ft_run, small_data):
    _, model, _ = ft_run
    torch.manual_seed(0)
    from hearthside.model import FamilyAudioModel

    init = FamilyAudioModel(TINY, TrainConfig().head_config())
    changed = [not torch.equal(a, b) for a, b in zip(init.encoder.state_dict().values(),
                                                      model.encoder.state_dict().values())]
    assert any(changed)


def test_fr_leaves_encoder_bytes(small_data, tmp_path, segments):
    pre = pretrain(segments, TINY, 2, seed=0).checkpoint
    cfg = TrainConfig(epochs=2, batch_size=16, mode="FR", lr_heads=1e-3)
    model, hist = finetune(small_data.train, small_data.dev, cfg, init=pre, run_dir=tmp_path,
                           cache_dir=tmp_path / "cache")
    for k, v in model.encoder.state_dict().items():
        assert v.numpy().tobytes() == pre.tensors[k].numpy().tobytes(), k
    assert "encoder" not in hist.epochs[0].lrs
    saved, _ = load_checkpoint(tmp_path / "checkpoints" / "epoch_2.ckpt")
    for k, v in pre.tensors.items():
        assert saved["encoder." + k].numpy().tobytes() == v.numpy().tobytes()
    assert any((tmp_path / "cache").iterdir())


def test_finetune_replay_bit_exact(small_data):
    cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
    _, a = finetune(small_data.train[:40], small_data.dev[:20], cfg, encoder_config=TINY)
    _, b = finetune(small_data.train[:40], small_data.dev[:20], cfg, encoder_config=TINY)
    assert a.to_jsonl() == b.to_jsonl()
