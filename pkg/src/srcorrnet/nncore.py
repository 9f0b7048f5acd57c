"""Differentiable primitives on top of torch autograd.

All feature maps are channel-last. Weight layouts follow torch conventions
(``linear``: [out, in]; ``conv2d``: [out, in, kt, kf]; ``conv1d_grouped``:
[out, in // groups, k]).
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ROPE_BASE = 10000.0


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    return F.linear(x, weight, bias)


def conv2d(x, weight, bias=None):
    """Same-padded 2-D convolution over (T, F) of a [..., T, F, Cin] map."""
    kt, kf = weight.shape[-2:]
    if kt % 2 == 0 or kf % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError("conv2d: channel mismatch")
    lead = x.shape[:-3]
    h = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    h = F.conv2d(h, weight, bias, padding=(kt // 2, kf // 2))
    return h.permute(0, 2, 3, 1).reshape(*lead, *h.shape[-2:], h.shape[1])


def conv1d_grouped(x, weight, bias=None, groups: int = 1):
    """Same-padded 1-D convolution along the sequence axis of [..., S, C]."""
    C = x.shape[-1]
    if C % groups or weight.shape[0] % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ValueError("conv1d requires an odd kernel size")
    lead = x.shape[:-2]
    h = x.reshape(-1, *x.shape[-2:]).transpose(1, 2)
    h = F.conv1d(h, weight, bias, padding=k // 2, groups=groups)
    return h.transpose(1, 2).reshape(*lead, h.shape[-1], h.shape[1])


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def swiglu(x):
    if x.shape[-1] % 2:
        raise ValueError("swiglu needs an even last dimension")
    a, b = x.chunk(2, dim=-1)
    return a * F.silu(b)


def rope(x, positions=None, base: float = ROPE_BASE):
    """Rotate consecutive channel pairs of [..., S, D] by position-dependent angles."""
    S, D = x.shape[-2:]
    if D % 2:
        raise ValueError("rope needs an even head dimension")
    if positions is None:
        positions = torch.arange(S, dtype=x.dtype, device=x.device)
    inv_freq = base ** (-torch.arange(0, D, 2, dtype=x.dtype, device=x.device) / D)
    ang = positions.to(x.dtype)[:, None] * inv_freq[None, :]
    cos, sin = ang.cos(), ang.sin()
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1)
    return out.flatten(-2)


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32, device=None):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    ang = pos / (10000.0 ** (idx / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)[:, : dim // 2]
    return pe.to(dtype=dtype, device=device)


def mhsa(x, wq, wk, wv, wo, heads: int, use_rope: bool = False, causal: bool = False,
         kv=None, bq=None, bk=None, bv=None, bo=None, positions=None):
    """Multi-head scaled dot-product attention over [..., S, C].

    ``kv`` switches to cross-attention; ``causal`` lets position s see
    positions <= s only.
    """
    C = x.shape[-1]
    if C % heads:
        raise ValueError(f"channels {C} not divisible by heads {heads}")
    src = x if kv is None else kv
    q = _split_heads(linear(x, wq, bq), heads)
    k = _split_heads(linear(src, wk, bk), heads)
    v = _split_heads(linear(src, wv, bv), heads)
    if use_rope:
        q = rope(q, positions)
        k = rope(k, positions)
    out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
    out = out.transpose(-3, -2).flatten(-2)
    return linear(out, wo, bo)


def _split_heads(h, heads):
    return h.unflatten(-1, (heads, -1)).transpose(-3, -2)


def backward(loss):
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    loss.backward()


def fd_check(f, x: torch.Tensor, h: float = 1e-4, num_samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between central differences and autograd.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. With
    ``num_samples`` only that many coordinates (drawn with ``seed``) are probed.
    """
    x0 = x.detach().clone().double().requires_grad_(True)
    loss = f(x0)
    backward(loss)
    g_ad = x0.grad.detach().flatten()
    flat = x0.detach().flatten()
    idx = np.arange(flat.numel())
    if num_samples is not None and num_samples < flat.numel():
        idx = np.random.default_rng(seed).choice(flat.numel(), size=num_samples, replace=False)
    worst = 0.0
    with torch.no_grad():
        for j in idx:
            xp = flat.clone()
            xp[j] += h
            xm = flat.clone()
            xm[j] -= h
            g_fd = (f(xp.view_as(x0)).item() - f(xm.view_as(x0)).item()) / (2 * h)
            g = g_ad[j].item()
            err = abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-6)
            worst = max(worst, err)
    return worst


def fd_check_module(module: nn.Module, loss_fn, h: float = 1e-4, num_samples: int = 8, seed: int = 0) -> float:
    """fd_check over a module's flattened parameters; ``loss_fn()`` rebuilds the loss."""
    module.double()
    params = [p for p in module.parameters() if p.requires_grad]
    shapes = [p.shape for p in params]
    sizes = [p.numel() for p in params]
    base = torch.cat([p.detach().flatten() for p in params])

    def load(vec):
        chunks = torch.split(vec, sizes)
        for p, c, s in zip(params, chunks, shapes):
            p.data = c.reshape(s).detach().clone()

    # autograd path: gradient w.r.t. parameters, gathered into one vector
    module.zero_grad(set_to_none=True)
    load(base)
    loss = loss_fn()
    backward(loss)
    g_ad = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten() for p in params])
    idx = np.random.default_rng(seed).choice(base.numel(), size=min(num_samples, base.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for j in idx:
            vp = base.clone()
            vp[j] += h
            load(vp)
            lp = loss_fn().item()
            vm = base.clone()
            vm[j] -= h
            load(vm)
            lm = loss_fn().item()
            g_fd = (lp - lm) / (2 * h)
            g = g_ad[j].item()
            worst = max(worst, abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-6))
    load(base)
    return worst


def init_parameters(module: nn.Module) -> None:
    """Uniform(-a, a), a = sqrt(1/fan_in) for weights; zero biases; unit norm gains."""
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            if m.weight is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            continue
        for name, p in m.named_parameters(recurse=False):
            if name.startswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() >= 2:
                fan_in = p[0].numel()
                a = math.sqrt(1.0 / fan_in)
                nn.init.uniform_(p, -a, a)


class Linear(nn.Linear):
    pass


class Conv2d(nn.Module):
    def __init__(self, cin, cout, kernel=(3, 3)):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, *kernel))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


class Conv1d(nn.Module):
    def __init__(self, cin, cout, kernel=3, groups=1):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(cout, cin // groups, kernel))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return conv1d_grouped(x, self.weight, self.bias, self.groups)


class ConvFFN(nn.Module):
    """conv1d -> SwiGLU (hidden ``hidden``) -> conv1d along the sequence axis."""

    def __init__(self, dim, hidden, kernel=3):
        super().__init__()
        self.conv_in = Conv1d(dim, 2 * hidden, kernel)
        self.conv_out = Conv1d(hidden, dim, kernel)

    def forward(self, x):
        return self.conv_out(swiglu(self.conv_in(x)))


class FFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, use_rope=False, causal=False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.use_rope = use_rope
        self.causal = causal
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)

    def forward(self, x, kv=None):
        return mhsa(x, self.q.weight, self.k.weight, self.v.weight, self.o.weight, self.heads,
                    self.use_rope, self.causal, kv,
                    self.q.bias, self.k.bias, self.v.bias, self.o.bias)


# -- parameter store and checkpoints -------------------------------------------

MAGIC = b"SRCNCKPT"


class ParamStore:
    """Ordered name -> tensor map with the seed that produced it."""

    def __init__(self, params=None, rng_seed: int = 0):
        self.params = OrderedDict()
        self.rng_seed = rng_seed
        for name, t in (params or {}).items():
            self[name] = t

    @classmethod
    def from_module(cls, module: nn.Module, rng_seed: int = 0):
        return cls(OrderedDict(module.named_parameters()), rng_seed)

    def __setitem__(self, name, tensor):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = tensor

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def grads(self):
        return OrderedDict((n, p.grad) for n, p in self.params.items())


def save_checkpoint(path, tensors, meta=None) -> None:
    """Write ``MAGIC | u64 header_len | JSON header | float32 LE records``.

    The header lists ``{name, shape, offset, nbytes}`` per record (offsets are
    relative to the start of the data section) plus a free-form ``meta`` dict.
    """
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": 1, "dtype": "float32", "byte_order": "little",
                         "tensors": entries, "meta": meta or {}}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        data = fh.read()
    tensors = OrderedDict()
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header.get("meta", {})
