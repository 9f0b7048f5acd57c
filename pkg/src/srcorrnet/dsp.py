"""Waveform/spectrogram conversion, context unfolding and deep-filter application.

Tensor-level functions operate on torch tensors with arbitrary leading batch
dimensions and are differentiable; the dataclass wrappers (``Waveform``,
``ComplexSpectrogram``, ...) carry the [channels x samples] / [T x F x M]
layouts used at module boundaries.

Tap ordering for every context vector is frequency offset (outer), time
offset (middle), channel (inner).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # [M, N]
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError(f"waveform must be [channels, samples], got shape {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite values")
        object.__setattr__(self, "samples", s)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ComplexSpectrogram:
    data: np.ndarray  # [T, F, M] complex
    frame_len: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        if self.data.shape[-2] != self.frame_len // 2 + 1:
            raise ValueError("bin count does not match frame_len")


@dataclass(frozen=True)
class ContextStack:
    data: np.ndarray  # [T, F, M * (2L+1) * (2I+1)] complex
    L: int
    I: int

    @property
    def num_taps(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True)
class FilterTensor:
    data: np.ndarray  # [K, T, F, M * (2L+1) * (2I+1)] complex


def make_window(kind: str, length: int) -> np.ndarray:
    """Periodic analysis window; only ``"hann"`` is supported."""
    if length < 2:
        raise ValueError("window length must be >= 2")
    if kind != "hann":
        raise ValueError(f"unsupported window kind {kind!r}")
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))


def num_frames(num_samples: int, frame_len: int, hop: int) -> int:
    # center padding by frame_len // 2 on both ends
    return num_samples // hop + 1


def _as_window(window, frame_len, ref: torch.Tensor) -> torch.Tensor:
    if window is None:
        window = make_window("hann", frame_len)
    dtype = ref.real.dtype if ref.is_complex() else ref.dtype
    return torch.as_tensor(window, dtype=dtype, device=ref.device)


def stft_tensor(x: torch.Tensor, frame_len: int, hop: int, window=None) -> torch.Tensor:
    """[..., N] real -> [..., T, F] complex, centered frames, one-sided bins."""
    if hop <= 0:
        raise ValueError("hop must be positive")
    if hop > frame_len or frame_len % 2:
        raise ValueError("frame_len must be even and >= hop")
    if x.shape[-1] == 0:
        raise ValueError("empty signal")
    win = _as_window(window, frame_len, x)
    pad = frame_len // 2
    xp = torch.nn.functional.pad(x, (pad, pad))
    frames = xp.unfold(-1, frame_len, hop)
    return torch.fft.rfft(frames * win, dim=-1)


def istft_tensor(X: torch.Tensor, out_len: int, frame_len: int, hop: int, window=None) -> torch.Tensor:
    """Weighted overlap-add inverse of :func:`stft_tensor`: [..., T, F] -> [..., out_len]."""
    win = _as_window(window, frame_len, X)
    T = X.shape[-2]
    frames = torch.fft.irfft(X, n=frame_len, dim=-1) * win
    total = (T - 1) * hop + frame_len
    lead = X.shape[:-2]
    # overlap-add through fold: [B, frame_len, T] -> [B, 1, 1, total]
    flat = frames.reshape(-1, T, frame_len).transpose(1, 2)
    y = torch.nn.functional.fold(flat, (1, total), (1, frame_len), stride=(1, hop))
    y = y.reshape(*lead, total)
    wsq = (win * win).reshape(1, frame_len, 1).expand(1, frame_len, T)
    norm = torch.nn.functional.fold(wsq, (1, total), (1, frame_len), stride=(1, hop)).reshape(total)
    pad = frame_len // 2
    y = y[..., pad:pad + out_len]
    norm = norm[pad:pad + out_len]
    assert bool(torch.all(norm > 1e-10)), "overlap-add normalization vanished"
    if y.shape[-1] < out_len:
        y = torch.nn.functional.pad(y, (0, out_len - y.shape[-1]))
        norm = torch.nn.functional.pad(norm, (0, out_len - norm.shape[-1]), value=1.0)
    return y / norm


def unfold_context_tensor(X: torch.Tensor, L: int, I: int) -> torch.Tensor:
    """[..., T, F, M] -> [..., T, F, (2I+1)(2L+1)M] with zeros outside the grid."""
    if L < 0 or I < 0:
        raise ValueError("context half-widths must be non-negative")
    T, F = X.shape[-3], X.shape[-2]
    # pad F (dim -2) by I and T (dim -3) by L; pad spec runs from the last dim
    Xp = torch.nn.functional.pad(X, (0, 0, I, I, L, L))
    taps = []
    for i in range(2 * I + 1):
        for l in range(2 * L + 1):
            taps.append(Xp[..., l:l + T, i:i + F, :])
    return torch.cat(taps, dim=-1)


def apply_filter_tensor(W: torch.Tensor, Xc: torch.Tensor) -> torch.Tensor:
    """Y = sum over taps of W * context (no conjugation).

    W: [..., K, T, F, P], Xc: [..., T, F, P] -> [..., K, T, F]
    """
    if W.shape[-3:] != Xc.shape[-3:]:
        raise ValueError(f"filter geometry {tuple(W.shape[-3:])} != context {tuple(Xc.shape[-3:])}")
    return (W * Xc.unsqueeze(-4)).sum(-1)


# -- dataclass-level API -------------------------------------------------------

def stft(x: Waveform, frame_len: int = 128, hop: int = 64, window=None) -> ComplexSpectrogram:
    if x.num_samples == 0:
        raise ValueError("empty signal")
    X = stft_tensor(torch.from_numpy(np.ascontiguousarray(x.samples, dtype=np.float64)), frame_len, hop, window)
    return ComplexSpectrogram(X.permute(1, 2, 0).numpy(), frame_len, hop, x.sample_rate)


def istft(X: ComplexSpectrogram, out_len: int, window=None) -> Waveform:
    data = torch.from_numpy(np.ascontiguousarray(X.data)).permute(2, 0, 1)
    y = istft_tensor(data, out_len, X.frame_len, X.hop, window)
    return Waveform(y.numpy(), X.sample_rate)


def unfold_context(X: ComplexSpectrogram, L: int, I: int) -> ContextStack:
    out = unfold_context_tensor(torch.from_numpy(X.data), L, I)
    return ContextStack(out.numpy(), L, I)


def apply_filter(W: FilterTensor, Xc: ContextStack) -> np.ndarray:
    """Returns the filtered spectrogram as a [K, T, F, 1] complex array."""
    Y = apply_filter_tensor(torch.from_numpy(W.data), torch.from_numpy(Xc.data))
    return Y.numpy()[..., None]


# -- WAV I/O -------------------------------------------------------------------

def read_wav(path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return Waveform(data.T, int(sr))


def write_wav(path, wave: Waveform, subtype: str = "float32") -> None:
    """Write little-endian WAV as ``float32`` or ``pcm16``."""
    data = wave.samples.T
    if subtype == "float32":
        data = data.astype("<f4")
    elif subtype == "pcm16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), wave.sample_rate, data)
