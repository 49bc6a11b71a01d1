"""Numerics core on top of torch autograd.

Provides the finite-difference gradient checker, multi-head self-attention,
Adam with per-group learning rates, new-bob annealing, and the binary
checkpoint container.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"HSCKPT01"
CKPT_VERSION = 1


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")
    return t


# ------------------------------------------------------------ gradient check


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    params: Iterable[torch.Tensor] = (),
    order: int = 2,
    floor: float = 1e-8,
) -> float:
    """Max elementwise relative error between autograd and finite differences.

    ``fn(*inputs)`` must return a scalar. Every tensor in ``inputs`` and
    ``params`` is perturbed in place one element at a time. ``order=4``
    uses the five-point stencil, which tolerates a larger ``epsilon``.
    Relative error is ``|g - g_fd| / max(|g|, |g_fd|, floor)``; raise ``floor``
    when some true gradients are exactly zero.
    """
    inputs = list(inputs)
    targets = [t for t in inputs if t.requires_grad] + [p for p in params if p.requires_grad]
    if not targets:
        raise ValueError("nothing to differentiate")
    out = fn(*inputs)
    if out.numel() != 1:
        raise ValueError("function must be scalar-valued")
    check_finite(out.detach(), "function value")
    analytic = torch.autograd.grad(out, targets, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(targets, analytic):
            g = torch.zeros_like(t) if g is None else g
            check_finite(g, "analytic gradient")
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def f_at(delta):
                    flat[i] = orig + delta
                    v = fn(*inputs).item()
                    flat[i] = orig
                    return v

                if order == 2:
                    num = (f_at(epsilon) - f_at(-epsilon)) / (2 * epsilon)
                elif order == 4:
                    num = (
                        -f_at(2 * epsilon) + 8 * f_at(epsilon) - 8 * f_at(-epsilon) + f_at(-2 * epsilon)
                    ) / (12 * epsilon)
                else:
                    raise ValueError("order must be 2 or 4")
                if not math.isfinite(num):
                    raise FloatingPointError("non-finite finite-difference value")
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ layers


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout = dropout
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        p = self.dropout if self.training else 0.0
        y = F.scaled_dot_product_attention(q, k, v, dropout_p=p)
        return self.out(y.transpose(1, 2).reshape(b, t, d))


def reference_attention(x: torch.Tensor, attn: MultiHeadSelfAttention) -> torch.Tensor:
    """Unfused softmax(QK^T / sqrt(d_h)) V, used to cross-check the fused kernel."""
    b, t, d = x.shape
    q, k, v = attn.qkv(x).view(b, t, 3, attn.heads, attn.head_dim).permute(2, 0, 3, 1, 4)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(attn.head_dim), dim=-1)
    return attn.out((w @ v).transpose(1, 2).reshape(b, t, d))


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_init(params: Sequence[torch.Tensor]) -> AdamState:
    return AdamState([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One in-place Adam update; ``None`` gradients count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter / gradient / state count mismatch")
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


class GroupAdam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, list[torch.Tensor]], lrs: dict[str, float]):
        self.groups = {k: [p for p in v if p.requires_grad] for k, v in groups.items()}
        self.lrs = dict(lrs)
        self.states = {k: adam_init(v) for k, v in self.groups.items()}

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                p.grad = None

    def step(self):
        for name, ps in self.groups.items():
            if ps:
                adam_step(ps, [p.grad for p in ps], self.states[name], self.lrs[name])

    def clip_grad_norm(self, max_norm: float) -> float:
        ps = [p for g in self.groups.values() for p in g if p.grad is not None]
        if not ps:
            return 0.0
        return float(torch.nn.utils.clip_grad_norm_(ps, max_norm))


# ------------------------------------------------------------------ new-bob


@dataclass
class NewBobState:
    lrs: dict
    improvement_threshold: float = 0.0025
    anneal_factor: float = 0.5
    best_metric: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.anneal_factor < 1:
            raise ValueError("anneal_factor must be in (0, 1)")
        if any(lr <= 0 for lr in self.lrs.values()):
            raise ValueError("learning rates must be positive")


def newbob_update(state: NewBobState, dev_metric: float) -> NewBobState:
    """Anneal every group's lr when the relative dev improvement falls short (higher is better)."""
    if not math.isfinite(dev_metric):
        raise ValueError("dev metric must be finite")
    lrs = dict(state.lrs)
    best = state.best_metric
    if best is not None:
        improvement = (dev_metric - best) / max(abs(best), 1e-12)
        if improvement < state.improvement_threshold:
            lrs = {k: v * state.anneal_factor for k, v in lrs.items()}
    new_best = dev_metric if best is None else max(best, dev_metric)
    return NewBobState(lrs, state.improvement_threshold, state.anneal_factor, new_best)


# --------------------------------------------------------------- checkpoint

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "bool": (torch.bool, "|b1"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Write ``magic | u64 header length | header JSON | raw little-endian tensor bytes``."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        dname = _TORCH_TO_NAME[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dname, "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": CKPT_VERSION, "tensors": entries, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        _, np_dtype = _DTYPES[e["dtype"]]
        buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np_dtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header["meta"]
