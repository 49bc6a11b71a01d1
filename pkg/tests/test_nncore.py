import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st
from torch import nn

from hearthside.nncore import (
    GroupAdam,
    MultiHeadSelfAttention,
    NewBobState,
    adam_init,
    adam_step,
    check_finite,
    grad_check,
    load_checkpoint,
    newbob_update,
    reference_attention,
    save_checkpoint,
)


def test_grad_check_square(float64):
    x = torch.randn(6, requires_grad=True)
    assert grad_check(lambda x: (x * x).sum(), [x]) < 1e-9


def test_grad_check_detects_wrong_gradient(float64):
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(3, dtype=torch.float64) * g

    x = torch.randn(3, requires_grad=True)
    assert grad_check(lambda x: Bad.apply(x), [x]) > 0.1


def test_grad_check_non_finite(float64):
    x = torch.tensor([0.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: (1.0 / x).sum(), [x])


def test_linear_leaky_ce(float64):
    torch.manual_seed(0)
    lin = nn.Linear(5, 3)
    x = torch.randn(4, 5, requires_grad=True)
    y = torch.tensor([0, 2, 1, 1])
    f = lambda x: F.cross_entropy(F.leaky_relu(lin(x)), y)
    assert grad_check(f, [x], params=lin.parameters()) < 1e-6


LAYERS = {
    "conv1d": lambda: (nn.Conv1d(2, 3, 4, stride=2), (2, 2, 17)),
    "linear": lambda: (nn.Linear(4, 3), (3, 4)),
    "layernorm": lambda: (nn.LayerNorm(5), (3, 5)),
    "leaky_relu": lambda: (nn.LeakyReLU(), (4, 5)),
    "softmax": lambda: (nn.Softmax(dim=-1), (3, 6)),
    "gelu": lambda: (nn.GELU(), (3, 4)),
    "attention": lambda: (MultiHeadSelfAttention(8, 2), (2, 5, 8)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_grad(float64, name):
    torch.manual_seed(1)
    layer, shape = LAYERS[name]()
    layer.eval()
    x = torch.randn(*shape, requires_grad=True)
    w = torch.randn(layer(x).shape)
    # key biases get an exact-zero gradient (softmax shift invariance), so floor the denominator
    assert grad_check(lambda x: (layer(x) * w).sum(), [x], params=layer.parameters(), floor=1e-4) < 1e-6


def test_batchnorm_grad(float64):
    torch.manual_seed(2)
    bn = nn.BatchNorm1d(4)
    bn.train()
    x = torch.randn(6, 4, requires_grad=True)
    w = torch.randn(6, 4)
    # training-mode batch norm: gradients run through the batch statistics
    assert grad_check(lambda x: (bn(x) * w).sum(), [x], params=bn.parameters(), epsilon=1e-4, order=4) < 1e-4


def test_dropout_eval_identity_and_softmax_sums(rng):
    d = nn.Dropout(0.5).eval()
    x = torch.randn(10, 10)
    assert torch.equal(d(x), x)
    p = torch.softmax(torch.randn(20, 7, dtype=torch.float64), dim=-1)
    assert torch.allclose(p.sum(-1), torch.ones(20, dtype=torch.float64), atol=1e-9)


def test_batchnorm_eval_deterministic():
    bn = nn.BatchNorm1d(3)
    bn(torch.randn(8, 3))
    bn.eval()
    x = torch.randn(4, 3)
    assert torch.equal(bn(x), bn(x))


def test_fused_attention_matches_reference(float64):
    torch.manual_seed(3)
    attn = MultiHeadSelfAttention(12, 3).eval()
    x = torch.randn(2, 7, 12)
    assert torch.allclose(attn(x), reference_attention(x, attn), atol=1e-12)


def test_attention_dim_check():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(10, 3)


def test_check_finite():
    with pytest.raises(FloatingPointError):
        check_finite(torch.tensor([1.0, float("nan")]))


# ---------------------------------------------------------------- adam


def test_adam_zero_grad():
    p = [torch.randn(3)]
    before = p[0].clone()
    st_ = adam_init(p)
    adam_step(p, [torch.zeros(3)], st_, 1e-3)
    assert torch.equal(p[0], before)
    assert st_.step == 1


def test_adam_first_step_closed_form():
    g = torch.tensor([0.3, -2.0, 1e-3], dtype=torch.float64)
    p = [torch.zeros(3, dtype=torch.float64)]
    adam_step(p, [g], adam_init(p), 1e-4)
    # m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
    expected = -1e-4 * g / (g.abs() + 1e-8)
    assert torch.allclose(p[0], expected, atol=1e-15)
    assert torch.allclose(p[0].abs(), torch.full((3,), 1e-4, dtype=torch.float64), atol=1e-6)


def test_adam_shape_mismatch():
    p = [torch.zeros(3)]
    with pytest.raises(ValueError):
        adam_step(p, [torch.zeros(4)], adam_init(p), 1e-3)


def test_adam_matches_torch_optim(rng):
    torch.manual_seed(4)
    a = [torch.randn(4, 3, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]
    b = [t.clone().requires_grad_(True) for t in a]
    ref = torch.optim.Adam(b, lr=3e-3, betas=(0.9, 0.999), eps=1e-8)
    state = adam_init(a)
    for _ in range(25):
        grads = [torch.randn_like(t) for t in a]
        adam_step(a, grads, state, 3e-3)
        for t, g in zip(b, grads):
            t.grad = g.clone()
        ref.step()
    for x, y in zip(a, b):
        assert torch.allclose(x, y.detach(), atol=1e-12)


def test_group_adam_independent_lrs():
    h = nn.Parameter(torch.zeros(2))
    e = nn.Parameter(torch.zeros(2))
    opt = GroupAdam({"heads": [h], "encoder": [e]}, {"heads": 1e-4, "encoder": 1e-5})
    (h.sum() + e.sum()).backward()
    opt.step()
    assert torch.allclose(h.detach(), torch.full((2,), -1e-4), atol=1e-9)
    assert torch.allclose(e.detach(), torch.full((2,), -1e-5), atol=1e-10)


# --------------------------------------------------------------- new-bob


def test_newbob_examples():
    s = NewBobState({"heads": 1e-4, "encoder": 1e-5}, best_metric=0.5)
    assert newbob_update(s, 0.55).lrs == s.lrs
    assert newbob_update(s, 0.5).lrs == {"heads": 5e-5, "encoder": 5e-6}


def test_newbob_sequence_quarters():
    s = NewBobState({"heads": 1e-4})
    for m in (0.5, 0.5, 0.5):
        s = newbob_update(s, m)
    assert s.lrs["heads"] == pytest.approx(1e-4 / 4)
    assert s.best_metric == 0.5


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_newbob_lr_monotone_and_positive(metrics):
    s = NewBobState({"a": 1.0})
    prev = 1.0
    for m in metrics:
        s = newbob_update(s, m)
        assert 0 < s.lrs["a"] <= prev
        prev = s.lrs["a"]
    assert s.best_metric == max(metrics)


def test_newbob_validation():
    with pytest.raises(ValueError):
        NewBobState({"a": 1.0}, anneal_factor=1.0)
    with pytest.raises(ValueError):
        NewBobState({"a": 0.0})
    with pytest.raises(ValueError):
        newbob_update(NewBobState({"a": 1.0}), float("nan"))


# ------------------------------------------------------------ checkpoint


def test_checkpoint_roundtrip(tmp_path):
    t = {
        "w": torch.randn(3, 4),
        "d": torch.randn(2, dtype=torch.float64),
        "i": torch.arange(5),
        "b": torch.tensor([True, False]),
        "s": torch.tensor(2.5),
    }
    save_checkpoint(tmp_path / "c.ckpt", t, {"note": "x", "n": 3})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x", "n": 3}
    for k in t:
        assert back[k].dtype == t[k].dtype
        assert back[k].shape == t[k].shape
        assert back[k].numpy().tobytes() == t[k].numpy().tobytes()


def test_checkpoint_header_layout(tmp_path):
    import json
    import struct

    save_checkpoint(tmp_path / "c.ckpt", {"a": torch.ones(2, 2)})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"HSCKPT01"
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    assert header["format_version"] == 1
    [e] = header["tensors"]
    assert (e["name"], e["shape"], e["dtype"], e["offset"], e["nbytes"]) == ("a", [2, 2], "float32", 0, 16)
    assert np.frombuffer(raw[16 + n :], "<f4").tolist() == [1.0] * 4


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")
