"""Spatio-spectro-temporal correlation features relative to a reference channel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dsp import ComplexSpectrogram, unfold_context_tensor

EPS = 1e-8
NORM_KINDS = ("phat_beta", "scot_beta", "none")


@dataclass(frozen=True)
class CorrelationTensor:
    data: np.ndarray  # [T, F, M * (2L+1) * (2I+1)] complex
    beta: float = 0.0
    norm_kind: str = "none"


@dataclass(frozen=True)
class RealFeature:
    data: np.ndarray  # [T, F, 2 * taps], (re, im) interleaved


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")


def _guarded_pow(mag: torch.Tensor, beta: float) -> torch.Tensor:
    return torch.clamp(mag, min=EPS) ** beta


def correlate_tensor(X: torch.Tensor, L: int, I: int, norm_kind: str = "scot_beta",
                     beta: float = 0.5, ref: int = 0) -> torch.Tensor:
    """[..., T, F, M] complex -> [..., T, F, taps] complex correlations.

    Entry (t, f, tap) = X[t, f, ref] * conj(X[t+l, f+i, m]) with the chosen
    magnitude normalization. SCOT is fused so that each operand is
    normalized separately.
    """
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm_kind {norm_kind!r}")
    _check_beta(beta)
    ctx = unfold_context_tensor(X, L, I)
    x_ref = X[..., ref:ref + 1]
    if norm_kind == "scot_beta":
        x_ref = x_ref / _guarded_pow(x_ref.abs(), beta)
        ctx = ctx / _guarded_pow(ctx.abs(), beta)
        return x_ref * ctx.conj()
    z = x_ref * ctx.conj()
    if norm_kind == "phat_beta":
        z = phat_tensor(z, beta)
    return z


def phat_tensor(z: torch.Tensor, beta: float) -> torch.Tensor:
    _check_beta(beta)
    return z / _guarded_pow(z.abs(), beta)


def to_real_tensor(z: torch.Tensor) -> torch.Tensor:
    return torch.view_as_real(z).flatten(-2)


def from_real_tensor(r: torch.Tensor) -> torch.Tensor:
    if r.shape[-1] % 2:
        raise ValueError("real feature channel count must be even")
    return torch.view_as_complex(r.unflatten(-1, (-1, 2)).contiguous())


# -- dataclass-level API -------------------------------------------------------

def correlate_miso(X: ComplexSpectrogram, L: int, I: int) -> CorrelationTensor:
    z = correlate_tensor(torch.from_numpy(X.data), L, I, "none")
    return CorrelationTensor(z.numpy(), 0.0, "none")


def normalize_phat_beta(Z: CorrelationTensor, beta: float) -> CorrelationTensor:
    if Z.norm_kind != "none":
        raise ValueError("PHAT-beta expects raw correlations")
    return CorrelationTensor(phat_tensor(torch.from_numpy(Z.data), beta).numpy(), beta, "phat_beta")


def normalize_scot_beta(X: ComplexSpectrogram, L: int, I: int, beta: float) -> CorrelationTensor:
    z = correlate_tensor(torch.from_numpy(X.data), L, I, "scot_beta", beta)
    return CorrelationTensor(z.numpy(), beta, "scot_beta")


def to_real_features(Z: CorrelationTensor) -> RealFeature:
    return RealFeature(to_real_tensor(torch.from_numpy(np.ascontiguousarray(Z.data))).numpy())


def from_real_features(R: RealFeature, beta: float = 0.0, norm_kind: str = "none") -> CorrelationTensor:
    return CorrelationTensor(from_real_tensor(torch.from_numpy(R.data)).numpy(), beta, norm_kind)
