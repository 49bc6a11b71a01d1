import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hearthside.model import (
    Encoder,
    EncoderConfig,
    FamilyAudioModel,
    HeadConfig,
    LossWeights,
    TierHeads,
    combine_losses,
    contrastive_pretrain_loss,
    diversity_penalty,
    encoder_forward,
    fuse_layers,
    gumbel_quantize,
    info_nce,
    mask_spans,
    multitask_loss,
    speaker_embed,
    SpeakerEmbedder,
)
from hearthside.nncore import grad_check


def small_encoder(**kw):
    torch.manual_seed(0)
    return Encoder(EncoderConfig(layers=2, dim=32, heads=2, **kw)).eval()


# ---------------------------------------------------------------- encoder


def test_two_seconds_is_400_frames():
    enc = small_encoder()
    z, ctx = encoder_forward(np.random.default_rng(0).normal(0, 0.1, 32000), enc)
    assert z.shape == (400, 32)
    assert ctx.shape == (2, 400, 32)


def test_zero_waveform_finite():
    z, ctx = encoder_forward(np.zeros(16000), small_encoder())
    assert torch.isfinite(z).all() and torch.isfinite(ctx).all()


@given(st.integers(16000, 80000))
def test_frame_count_doubles(n):
    c = EncoderConfig()
    assert c.total_stride == 80
    t1, t2 = n // c.total_stride, (2 * n) // c.total_stride
    assert abs(t2 - 2 * t1) <= 1


def test_frames_match_forward_for_odd_lengths():
    enc = small_encoder()
    for n in (16000, 16079, 23457):
        z, _ = encoder_forward(np.zeros(n), enc)
        assert z.shape[0] == enc.frames(n) == n // 80


def test_length_limits():
    enc = small_encoder()
    with pytest.raises(ValueError):
        encoder_forward(np.zeros(15999), enc)
    with pytest.raises(ValueError):
        encoder_forward(np.zeros(160001), enc)


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(mask_prob=0.1, mask_len=10)
    c = EncoderConfig()
    assert EncoderConfig.from_json(c.to_json()) == c
    assert c.ffn_dim == 4 * c.dim


# ---------------------------------------------------------------- masking


def test_mask_p0_forces_one_span():
    m = mask_spans(100, 0.0, 10, np.random.default_rng(0))
    assert m.sum() == 10
    s = int(np.argmax(m))
    assert m[s : s + 10].all()


def test_mask_p1_all():
    assert mask_spans(50, 1.0, 5, np.random.default_rng(0)).all()


def test_mask_fraction():
    fr = [mask_spans(10_000, 0.065, 10, np.random.default_rng(s)).mean() for s in range(20)]
    expected = 1 - (1 - 0.065) ** 10
    assert expected == pytest.approx(0.49, abs=0.01)
    assert abs(np.mean(fr) - expected) < 0.03


def test_mask_requires_t_gt_m():
    with pytest.raises(ValueError):
        mask_spans(10, 0.1, 10, np.random.default_rng(0))


# -------------------------------------------------------------- quantizer


def test_quantizer_low_temperature_argmax():
    torch.manual_seed(0)
    logits = torch.randn(7, 2, 5)
    book = torch.randn(2, 5, 3)
    q, probs, idx = gumbel_quantize(logits, book, 1e-4, hard=False, noise=False)
    expect = torch.cat([book[0][logits[:, 0].argmax(-1)], book[1][logits[:, 1].argmax(-1)]], dim=-1)
    assert torch.allclose(q, expect, atol=1e-5)
    assert torch.allclose(probs.sum(-1), torch.ones(7, 2), atol=1e-6)


def test_quantizer_hard_forward_is_codebook_entry():
    torch.manual_seed(1)
    logits = torch.randn(4, 2, 6)
    book = torch.randn(2, 6, 2)
    q, _, idx = gumbel_quantize(logits, book, 2.0, generator=torch.Generator().manual_seed(0))
    manual = torch.cat([book[0][idx[:, 0]], book[1][idx[:, 1]]], dim=-1)
    assert torch.allclose(q, manual, atol=1e-6)


def test_quantizer_soft_grad(float64):
    torch.manual_seed(2)
    logits = torch.randn(3, 2, 4, requires_grad=True)
    book = torch.randn(2, 4, 3, requires_grad=True)
    w = torch.randn(3, 6)
    f = lambda l, b: (gumbel_quantize(l, b, 0.7, hard=False, noise=False)[0] * w).sum()
    assert grad_check(f, [logits, book]) < 1e-4
    # straight-through: hard forward still hands a gradient to the logits
    lg = logits.detach().clone().requires_grad_(True)
    (gumbel_quantize(lg, book.detach(), 0.7, noise=False)[0] * w).sum().backward()
    assert lg.grad.abs().sum() > 0


def test_quantizer_bad_temperature():
    with pytest.raises(ValueError):
        gumbel_quantize(torch.zeros(1, 1, 2), torch.zeros(1, 2, 1), 0.0)


# ------------------------------------------------------------ contrastive


def test_info_nce_perfect_match():
    k, d = 20, 32
    basis = torch.eye(d)
    c = basis[0:1]
    neg = basis[1 : k + 1].unsqueeze(0)
    loss = info_nce(c, c.clone(), neg, 0.1)
    assert loss.item() == pytest.approx(math.log1p(k * math.exp(-10)), rel=1e-4)
    assert loss.item() < 1e-3


def test_info_nce_orthogonal_context():
    k, d = 20, 32
    basis = torch.eye(d)
    loss = info_nce(basis[0:1], basis[1:2], basis[2 : k + 2].unsqueeze(0), 0.1)
    assert loss.item() == pytest.approx(math.log(k + 1), abs=1e-6)


def test_diversity_extremes():
    g, v = 2, 64
    uniform = torch.full((10, g, v), 1 / v)
    assert diversity_penalty(uniform).item() == pytest.approx(0.0, abs=1e-5)
    collapse = torch.zeros(10, g, v)
    collapse[..., 3] = 1.0
    assert 0.1 * diversity_penalty(collapse).item() == pytest.approx(0.1 * (1 - 1 / v), abs=1e-5)


def test_pretrain_loss_finite_and_seeded():
    enc = small_encoder()
    enc.train()
    wave = torch.randn(2, 16000) * 0.1

    def run():
        return contrastive_pretrain_loss(enc, wave, 2.0, np.random.default_rng(5),
                                         torch.Generator().manual_seed(5))

    torch.manual_seed(9)
    a, pa = run()
    torch.manual_seed(9)
    b, pb = run()
    assert torch.isfinite(a) and a.item() == b.item() and pa == pb


# ----------------------------------------------------------------- fusion


def test_fuse_one_hot_limit():
    f = torch.randn(4, 3, 8)
    logits = torch.tensor([0.0, 80.0, 0.0, 0.0])
    assert torch.allclose(fuse_layers(f, logits), f[1], atol=1e-6)


def test_fuse_uniform():
    f = torch.randn(4, 3, 8)
    assert torch.allclose(fuse_layers(f, torch.zeros(4)), f.mean(0), atol=1e-6)


@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-50, 50))
def test_fuse_direct_eq(n_layers, seed, shift):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(n_layers, 5, dtype=torch.float64, generator=g)
    lg = torch.randn(n_layers, dtype=torch.float64, generator=g)
    alpha = np.exp(lg.numpy() - lg.numpy().max())
    alpha /= alpha.sum()
    assert (alpha > 0).all() and abs(alpha.sum() - 1) < 1e-12
    direct = (alpha[:, None] * f.numpy()).sum(0)
    assert np.allclose(fuse_layers(f, lg).numpy(), direct, atol=1e-9)
    assert torch.allclose(fuse_layers(f, lg + shift), fuse_layers(f, lg), atol=1e-9)


def test_fuse_layer_mismatch():
    with pytest.raises(ValueError):
        fuse_layers(torch.zeros(3, 2, 4), torch.zeros(2))


# ------------------------------------------------------------------ heads


def test_head_dims_toy():
    h = TierHeads(96, 4, HeadConfig(use_spk_emb=True))
    assert h.sd.net[0].in_features == 96
    assert h.chn.net[0].in_features == 96 + 48
    assert h.adu.net[0].in_features == 96 + 48
    assert h.sd.net[0].out_features == 48
    assert h.domain is None
    x = torch.randn(4, 5, 96)
    with pytest.raises(ValueError):
        h(x)
    out = h(x, spk_emb=torch.randn(5, 48))
    assert {k: v.shape[1] for k, v in out.items()} == {"sd": 5, "chn": 3, "adu": 4}


def test_head_layer_order():
    net = TierHeads(16, 2, HeadConfig()).sd.net
    names = [type(m).__name__ for m in net]
    assert names == ["Linear", "BatchNorm1d", "LeakyReLU", "Dropout", "Linear"]
    assert net[3].p == 0.1


def test_head_dims_paper_scale():
    cfg = HeadConfig(domain_tagging="OneHotEmbedding", hidden=384, domain_emb_dim=256, spk_emb_dim=192,
                     use_spk_emb=True)
    h = TierHeads(768, 12, cfg)
    assert h.feature_dim == 1024
    assert h.sd.net[0].in_features == 1024
    assert h.chn.net[0].in_features == 1024 + 192
    assert h.sd.net[0].out_features == 384


def test_multitask_head_and_missing_domain():
    h = TierHeads(8, 2, HeadConfig(domain_tagging="MultiTask"))
    out = h(torch.randn(2, 3, 8))
    assert out["domain"].shape == (3, 2)
    h1 = TierHeads(8, 2, HeadConfig(domain_tagging="OneHotEmbedding"))
    with pytest.raises(ValueError):
        h1(torch.randn(2, 3, 8))
    assert h1(torch.randn(2, 3, 8), domain=torch.tensor([0, 1, 0]))["sd"].shape == (3, 5)


def test_last_layer_mode_uses_top_layer():
    torch.manual_seed(0)
    h = TierHeads(8, 3, HeadConfig(feature_mode="LastLayer", dropout=0.0)).eval()
    x = torch.randn(3, 4, 8)
    y = x.clone()
    y[:2] = torch.randn(2, 4, 8)
    assert torch.equal(h(x)["sd"], h(y)["sd"])


def test_eval_deterministic():
    torch.manual_seed(0)
    m = FamilyAudioModel(EncoderConfig(layers=2, dim=32, heads=2), HeadConfig())
    m.train()
    m(torch.randn(4, 16000) * 0.1)  # populate BN running stats
    m.eval()
    x = torch.randn(3, 16000) * 0.1
    a, b = m(x), m(x)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_argmax_invariant_to_feature_scale():
    torch.manual_seed(3)
    h = TierHeads(12, 3, HeadConfig(dropout=0.0)).train()
    x = torch.randn(3, 16, 12, dtype=torch.float32)
    a, b = h(x), h(x * 7.5)
    for k in a:
        assert torch.equal(a[k].argmax(-1), b[k].argmax(-1))


# ------------------------------------------------------------------- loss


def test_loss_weights():
    assert LossWeights.for_heads(False) == LossWeights(0.33, 0.33, 0.33, 0.0)
    ones = {"sd": 1.0, "chn": 1.0, "adu": 1.0, "domain": 1.0}
    assert combine_losses(ones, LossWeights.for_heads(False)) == pytest.approx(0.99)
    assert combine_losses(ones, LossWeights.for_heads(True)) == pytest.approx(0.99)


def _loss_inputs(b, silence=False):
    g = torch.Generator().manual_seed(0)
    logits = {"sd": torch.randn(b, 5, generator=g), "chn": torch.randn(b, 3, generator=g),
              "adu": torch.randn(b, 4, generator=g), "domain": torch.randn(b, 2, generator=g)}
    if silence:
        tg = {"sd": torch.zeros(b, dtype=torch.long), "chn": torch.full((b,), -1),
              "adu": torch.full((b,), -1)}
    else:
        tg = {"sd": torch.tensor([1, 2, 3, 4]), "chn": torch.tensor([0, -1, -1, -1]),
              "adu": torch.tensor([-1, 1, 2, -1])}
    tg["domain"] = torch.zeros(b, dtype=torch.long)
    return logits, tg


def test_silence_batch_sd_only():
    logits, tg = _loss_inputs(4, silence=True)
    w = LossWeights.for_heads(False)
    total, parts = multitask_loss(logits, tg, w, torch.ones(4, 3, dtype=torch.bool))
    assert parts["chn"].item() == 0 and parts["adu"].item() == 0
    sd = torch.nn.functional.cross_entropy(logits["sd"], tg["sd"])
    assert total.item() == pytest.approx(0.33 * sd.item(), rel=1e-6)


def test_loss_matches_manual_masked_means():
    logits, tg = _loss_inputs(4)
    mask = torch.ones(4, 3, dtype=torch.bool)
    mask[2, 2] = False  # tier mask drops the second ADU row
    w = LossWeights.for_heads(True)
    total, parts = multitask_loss(logits, tg, w, mask)
    ce = torch.nn.functional.cross_entropy
    sd = ce(logits["sd"], tg["sd"])
    chn = ce(logits["chn"][:1], tg["chn"][:1])
    adu = ce(logits["adu"][1:2], tg["adu"][1:2])
    dom = ce(logits["domain"], tg["domain"])
    assert total.item() == pytest.approx((0.32 * (sd + chn + adu) + 0.03 * dom).item(), rel=1e-6)


def test_full_head_stack_grad(float64):
    torch.manual_seed(4)
    h = TierHeads(6, 3, HeadConfig(domain_tagging="MultiTask", use_spk_emb=True, spk_emb_dim=4, dropout=0.0))
    h.train()
    pooled = torch.randn(3, 4, 6, requires_grad=True)
    spk = torch.randn(4, 4)
    _, tg = _loss_inputs(4)
    mask = torch.ones(4, 3, dtype=torch.bool)
    w = LossWeights.for_heads(True)
    f = lambda p: multitask_loss(h(p, spk_emb=spk), tg, w, mask)[0]
    assert grad_check(f, [pooled], params=h.parameters(), epsilon=1e-4, order=4, floor=1e-6) < 1e-4


# ---------------------------------------------------------- speaker embed


def test_untrained_embedder_flagged():
    with pytest.raises(RuntimeError):
        speaker_embed(SpeakerEmbedder(rate=8000), np.zeros(16000))


@pytest.fixture(scope="module")
def embedder(small_data):
    from hearthside.training import train_speaker_embedder

    return train_speaker_embedder(small_data.train, epochs=5, seed=0)


def test_speaker_embedding_unit_norm(embedder, small_data):
    w = next(w for w in small_data.test if not w.is_silence)
    e = speaker_embed(embedder, w.samples)
    assert e.shape == (48,)
    assert abs(np.linalg.norm(e) - 1) < 1e-6
    assert np.array_equal(e, speaker_embed(embedder, w.samples))


def test_speaker_separation_held_out(embedder, small_data):
    from hearthside.training import embed_windows

    # single-speaker windows from families the embedder has never seen
    speech = [w for w in small_data.test if not w.is_silence and w.speaker]
    emb = embed_windows(embedder, speech)
    ids = np.array([f"{w.family_id}:{w.speaker}" for w in speech])
    sim = emb @ emb.T
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    gap = sim[same & off].mean() - sim[~same].mean()
    print("speaker gap", gap)
    assert gap > 0.2
