"""SR-CorrNet: correlation embedding, TF encoder, split, weight-shared decoder, filter heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from . import nncore as nc
from .corr import correlate_tensor, to_real_tensor
from .dsp import apply_filter_tensor, istft_tensor, stft_tensor, unfold_context_tensor


@dataclass
class ModelConfig:
    C: int = 32
    C_H: int = 64
    B_E: int = 1
    B_D: int = 2
    B_A: int = 2
    heads: int = 2
    conv_kernel: int = 3
    L: int = 1
    I: int = 1
    M: int = 1
    K: int = 2
    K0: int = 3
    split_kind: str = "fixed"
    beta: float = 0.5
    norm_kind: str = "scot_beta"
    filter_combine: str = "sigmoid_mask"
    frame_len: int = 128
    hop: int = 64
    sample_rate: int = 8000

    def __post_init__(self):
        if self.C % self.heads:
            raise ValueError(f"C={self.C} not divisible by heads={self.heads}")
        if self.C % 4:
            raise ValueError("C must be a multiple of 4 (2-d positional embedding)")
        if self.B_E < 1:
            raise ValueError("B_E must be >= 1")
        # B_D = 0 is the late-split baseline (no reconstruction decoder)
        if self.B_D < 0 or self.B_A < 1:
            raise ValueError("B_D must be >= 0 and B_A >= 1")
        if self.split_kind not in ("fixed", "attractor"):
            raise ValueError(f"unknown split_kind {self.split_kind!r}")
        if self.filter_combine not in ("sigmoid_mask", "tanh_bounded"):
            raise ValueError(f"unknown filter_combine {self.filter_combine!r}")
        if self.M < 1 or self.K < 1 or self.K0 < 1:
            raise ValueError("M, K and K0 must be positive")

    @property
    def num_taps(self) -> int:
        return self.M * (2 * self.L + 1) * (2 * self.I + 1)

    @property
    def max_streams(self) -> int:
        return self.K if self.split_kind == "fixed" else self.K0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class CorrelationEmbed(nn.Module):
    """conv3x3 -> SwiGLU -> conv3x3 -> LN -> + frequency positional encoding."""

    def __init__(self, in_ch, C):
        super().__init__()
        self.conv1 = nc.Conv2d(in_ch, 2 * C)
        self.conv2 = nc.Conv2d(C, C)
        self.norm = nn.LayerNorm(C)
        self.in_ch = in_ch

    def forward(self, feat):
        if feat.shape[-1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} feature channels, got {feat.shape[-1]}")
        h = self.norm(self.conv2(nc.swiglu(self.conv1(feat))))
        F_, C = h.shape[-2:]
        return h + nc.sinusoidal_encoding(F_, C, h.dtype, h.device)


class UnitModule(nn.Module):
    """Macaron unit over [N, S, C]: half ConvFFN, RoPE MHSA, half ConvFFN, all pre-norm."""

    def __init__(self, C, C_H, heads, kernel):
        super().__init__()
        self.norm1 = nn.LayerNorm(C)
        self.ffn1 = nc.ConvFFN(C, C_H, kernel)
        self.norm_attn = nn.LayerNorm(C)
        self.attn = nc.MultiHeadAttention(C, heads, use_rope=True)
        self.norm2 = nn.LayerNorm(C)
        self.ffn2 = nc.ConvFFN(C, C_H, kernel)

    def forward(self, x):
        x = x + 0.5 * self.ffn1(self.norm1(x))
        x = x + self.attn(self.norm_attn(x))
        return x + 0.5 * self.ffn2(self.norm2(x))


class TFBlock(nn.Module):
    """Frequency module (sequence over F) followed by time module (sequence over T)."""

    def __init__(self, C, C_H, heads, kernel):
        super().__init__()
        self.freq = UnitModule(C, C_H, heads, kernel)
        self.time = UnitModule(C, C_H, heads, kernel)

    def forward(self, x):
        T, F_, C = x.shape[-3:]
        lead = x.shape[:-3]
        h = self.freq(x.reshape(-1, F_, C)).reshape(*lead, T, F_, C)
        h = h.transpose(-3, -2)
        h = self.time(h.reshape(-1, T, C)).reshape(*lead, F_, T, C)
        return h.transpose(-3, -2)


class SpeakerInteraction(nn.Module):
    """Pre-norm transformer encoder block attending across speaker streams per TF bin."""

    def __init__(self, C, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(C)
        self.attn = nc.MultiHeadAttention(C, heads)
        self.norm2 = nn.LayerNorm(C)
        self.ffn = nc.FFN(C, 4 * C)

    def forward(self, x):
        # x: [..., K, T, F, C]
        h = x.movedim(-4, -2)
        shape = h.shape
        h = h.reshape(-1, shape[-2], shape[-1])
        h = h + self.attn(self.norm1(h))
        h = h + self.ffn(self.norm2(h))
        return h.reshape(shape).movedim(-2, -4)


class FixedSplit(nn.Module):
    """C -> 2KC -> SwiGLU -> KC -> KC, reshaped to K streams and layer-normed."""

    def __init__(self, C, K):
        super().__init__()
        self.K = K
        self.fc1 = nc.Linear(C, 2 * K * C)
        self.fc2 = nc.Linear(K * C, K * C)
        self.norm = nn.LayerNorm(C)

    def forward(self, E):
        h = self.fc2(nc.swiglu(self.fc1(E)))
        h = h.unflatten(-1, (self.K, -1)).movedim(-2, -4)
        return self.norm(h)


class AttractorBlock(nn.Module):
    """Transformer decoder block: cross-attention, causal self-attention, FFN."""

    def __init__(self, C, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(C)
        self.cross = nc.MultiHeadAttention(C, heads)
        self.norm_s = nn.LayerNorm(C)
        self.self_attn = nc.MultiHeadAttention(C, heads, causal=True)
        self.norm_f = nn.LayerNorm(C)
        self.ffn = nc.FFN(C, 4 * C)

    def forward(self, a, mem):
        a = a + self.cross(self.norm_q(a), kv=mem)
        a = a + self.self_attn(self.norm_s(a))
        return a + self.ffn(self.norm_f(a))


def positional_2d(T, F_, C, dtype=torch.float32, device=None):
    """Fixed sinusoidal embedding: first C/2 channels encode time, the rest frequency."""
    half = C // 2
    pt = nc.sinusoidal_encoding(T, half, dtype, device)[:, None, :].expand(T, F_, half)
    pf = nc.sinusoidal_encoding(F_, half, dtype, device)[None, :, :].expand(T, F_, half)
    return torch.cat([pt, pf], dim=-1)


@dataclass
class AttractorSet:
    attractors: torch.Tensor  # [B, K0+1, C]
    probs: torch.Tensor  # [B, K0+1]
    queries: torch.Tensor  # [K0+1, C]


def count_speakers(probs: torch.Tensor, K0: int) -> torch.Tensor:
    """Leading run of p > 0.5 starting at the first slot, clamped to [1, K0]."""
    active = (probs > 0.5).long()
    run = torch.cumprod(active, dim=-1).sum(-1)
    return run.clamp(1, K0)


class AttractorSplit(nn.Module):
    def __init__(self, C, heads, K0, B_A):
        super().__init__()
        self.K0 = K0
        self.queries = nn.Parameter(torch.empty(K0 + 1, C))
        self.norm_mem = nn.LayerNorm(C)
        self.blocks = nn.ModuleList(AttractorBlock(C, heads) for _ in range(B_A))
        self.norm_out = nn.LayerNorm(C)
        self.prob = nc.Linear(C, 1)
        self.fc1 = nc.Linear(2 * C, 2 * C)
        self.fc2 = nc.Linear(C, C)
        self.norm = nn.LayerNorm(C)

    def attractors(self, E) -> AttractorSet:
        T, F_, C = E.shape[-3:]
        mem = self.norm_mem(E + positional_2d(T, F_, C, E.dtype, E.device)).reshape(-1, T * F_, C)
        a = self.queries.unsqueeze(0).expand(mem.shape[0], -1, -1)
        for blk in self.blocks:
            a = blk(a, mem)
        a = self.norm_out(a)
        probs = torch.sigmoid(self.prob(a)).squeeze(-1)
        return AttractorSet(a, probs, self.queries)

    def forward(self, E, K_true=None):
        att = self.attractors(E)
        if K_true is None:
            K = int(count_speakers(att.probs, self.K0).max())
        else:
            K = int(K_true)
            if not 1 <= K <= self.K0:
                raise ValueError(f"K_true={K} outside [1, {self.K0}]")
        sel = att.attractors[:, :K]  # [B, K, C]
        T, F_, C = E.shape[-3:]
        a = sel[:, :, None, None, :].expand(-1, -1, T, F_, -1)
        e = E.unsqueeze(1).expand(-1, K, -1, -1, -1)
        h = self.fc2(nc.swiglu(self.fc1(torch.cat([a, e], dim=-1))))
        return self.norm(h), att


class FilterHead(nn.Module):
    """Three parallel point-wise projections (real, imag, magnitude gate) -> complex taps."""

    def __init__(self, C, taps, combine="sigmoid_mask"):
        super().__init__()
        self.real = nc.Linear(C, taps)
        self.imag = nc.Linear(C, taps)
        self.mag = nc.Linear(C, taps)
        self.combine = combine

    def forward(self, D):
        return combine_filter(self.real(D), self.imag(D), self.mag(D), self.combine)


def combine_filter(r, i, m, combine="sigmoid_mask"):
    if combine == "sigmoid_mask":
        return torch.complex(torch.sigmoid(m) * r, torch.sigmoid(m) * i)
    # tanh-bounded: tanh(|v|) v / |v| with v = r + j i; the gate m is unused
    mag = torch.sqrt(r * r + i * i + 1e-12)
    g = torch.tanh(mag) / mag
    return torch.complex(g * r, g * i)


class SRCorrNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        P = cfg.num_taps
        self.embed = CorrelationEmbed(2 * P, cfg.C)
        self.encoder = nn.ModuleList(TFBlock(cfg.C, cfg.C_H, cfg.heads, cfg.conv_kernel) for _ in range(cfg.B_E))
        if cfg.split_kind == "fixed":
            self.split = FixedSplit(cfg.C, cfg.K)
        else:
            self.split = AttractorSplit(cfg.C, cfg.heads, cfg.K0, cfg.B_A)
        if cfg.B_D > 0:
            self.decoder_tf = TFBlock(cfg.C, cfg.C_H, cfg.heads, cfg.conv_kernel)
            self.decoder_spk = SpeakerInteraction(cfg.C, cfg.heads)
            self.aux_head = FilterHead(cfg.C, P, cfg.filter_combine)
        self.head = FilterHead(cfg.C, P, cfg.filter_combine)
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                nc.init_parameters(self)
                if cfg.split_kind == "attractor":
                    nn.init.uniform_(self.split.queries, -1.0, 1.0)

    # -- stages --------------------------------------------------------------
    def features(self, X):
        """[B, T, F, M] complex -> (real correlation features, context stack)."""
        cfg = self.cfg
        if X.shape[-1] != cfg.M:
            raise ValueError(f"model expects M={cfg.M} channels, got {X.shape[-1]}")
        ctx = unfold_context_tensor(X, cfg.L, cfg.I)
        z = correlate_tensor(X, cfg.L, cfg.I, cfg.norm_kind, cfg.beta)
        return to_real_tensor(z), ctx

    def encode(self, E):
        for blk in self.encoder:
            E = blk(E)
        return E

    def decode_stage(self, D):
        return self.decoder_spk(self.decoder_tf(D))

    def forward(self, X, K_true=None, aux: bool | None = None):
        """Returns ``{"outputs": [Y^(b)...], "attractors": AttractorSet | None}``.

        ``outputs`` holds [B, K, T, F] complex spectrograms for every stage
        when ``aux`` (default: ``self.training``), else only the final one.
        """
        if aux is None:
            aux = self.training
        feat, ctx = self.features(X)
        dtype = self.head.real.weight.dtype
        E = self.encode(self.embed(feat.to(dtype)))
        att = None
        if self.cfg.split_kind == "fixed":
            D = self.split(E)
        else:
            D, att = self.split(E, K_true)
        ctx = ctx.to(torch.complex128 if dtype == torch.float64 else torch.complex64)
        outputs = []
        for _ in range(self.cfg.B_D):
            if aux:
                outputs.append(apply_filter_tensor(self.aux_head(D), ctx))
            D = self.decode_stage(D)
        outputs.append(apply_filter_tensor(self.head(D), ctx))
        return {"outputs": outputs, "attractors": att}

    # -- waveform helpers ------------------------------------------------------
    def analyze(self, wave):
        """[B, M, N] real -> [B, T, F, M] complex."""
        cfg = self.cfg
        return stft_tensor(wave, cfg.frame_len, cfg.hop).movedim(-3, -1)

    def synthesize(self, Y, out_len):
        return istft_tensor(Y, out_len, self.cfg.frame_len, self.cfg.hop)

    def separate(self, wave, K_true=None):
        """[B, M, N] -> ([B, K, N] waveforms, AttractorSet | None), inference mode."""
        dtype = self.head.real.weight.dtype
        out = self.forward(self.analyze(wave.to(dtype)), K_true, aux=False)
        return self.synthesize(out["outputs"][-1], wave.shape[-1]), out["attractors"]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_model(path, model: SRCorrNet, extra_meta=None) -> None:
    meta = {"model_config": asdict(model.cfg)}
    meta.update(extra_meta or {})
    nc.save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path) -> SRCorrNet:
    tensors, meta = nc.load_checkpoint(path)
    model = SRCorrNet(ModelConfig.from_dict(meta["model_config"]), seed=None)
    # training checkpoints also carry optimizer moments under "opt."
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    return model
