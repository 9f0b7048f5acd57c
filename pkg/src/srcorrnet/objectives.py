"""Separation losses, PIT assignment and the stage-weighted training objective."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .dsp import stft_tensor

EPS = 1e-8


@dataclass
class LossConfig:
    alpha: float = 0.5
    alpha_decay: float = 0.95
    alpha_decay_start: int = 30
    clip_db: float = 30.0
    loss_family: str = "sisnr_family"
    frame_len: int = 128
    hop: int = 64
    attractor_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.loss_family not in ("sisnr_family", "l1_tf_family"):
            raise ValueError(f"unknown loss_family {self.loss_family!r}")


@dataclass
class PitAssignment:
    permutation: tuple  # permutation[k] = source index assigned to output k
    loss_value: float


def alpha_at(cfg: LossConfig, epoch: int) -> float:
    return cfg.alpha * cfg.alpha_decay ** max(0, epoch - cfg.alpha_decay_start)


# -- SI-SNR --------------------------------------------------------------------

def _db(num, den, ref):
    """10 log10(num / (den + eps * ref)) floored at 10 log10(eps) = -80 dB."""
    return 10 * torch.log10(torch.clamp(num / (den + EPS * ref + 1e-30), min=EPS))


def si_snr_tensor(y, s, clip_db: float | None = 30.0):
    """Scale-invariant SNR in dB along the last axis, capped at ``clip_db``.

    10 log10(|g s|^2 / (|g s - y|^2 + eps |y|^2)) with g = <y, s> / |s|^2, floored
    at 10 log10(eps) = -80 dB (the value for an output orthogonal to the target).
    The guard is relative to the output energy so rescaling y or s leaves the
    value unchanged.
    """
    s_energy = (s * s).sum(-1, keepdim=True)
    if bool(torch.any(s_energy <= 0)):
        raise ValueError("degenerate all-zero target")
    gamma = (y * s).sum(-1, keepdim=True) / s_energy
    proj = gamma * s
    val = _db((proj * proj).sum(-1), ((proj - y) ** 2).sum(-1), (y * y).sum(-1))
    if clip_db is not None:
        val = torch.clamp(val, max=clip_db)
    return val


def si_snr(y, s, clip_db: float | None = 30.0) -> float:
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    s = torch.as_tensor(np.asarray(s, dtype=np.float64))
    return float(si_snr_tensor(y, s, clip_db))


def sdr_tensor(y, s):
    """20 log10(|s_proj| / |y - s_proj|), s_proj the least-squares projection of y on s."""
    s_energy = (s * s).sum(-1, keepdim=True)
    if bool(torch.any(s_energy <= 0)):
        raise ValueError("degenerate all-zero target")
    proj = (y * s).sum(-1, keepdim=True) / s_energy * s
    return _db((proj * proj).sum(-1), ((y - proj) ** 2).sum(-1), (y * y).sum(-1))


# -- PIT -----------------------------------------------------------------------

def pit_assign(loss_matrix) -> PitAssignment:
    """Minimum-total-loss bijection for ``loss_matrix[k, j]`` (output k vs source j)."""
    m = np.asarray(loss_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"loss matrix must be square, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("loss matrix contains non-finite entries")
    K = m.shape[0]
    if K <= 4:
        best, best_perm = math.inf, None
        for perm in itertools.permutations(range(K)):
            v = sum(m[k, perm[k]] for k in range(K))
            if v < best:
                best, best_perm = v, perm
        return PitAssignment(tuple(best_perm), float(best))
    rows, cols = linear_sum_assignment(m)
    perm = tuple(int(c) for c in cols[np.argsort(rows)])
    return PitAssignment(perm, float(m[np.arange(K), perm].sum()))


def _pairwise(fn, y, s):
    """loss[b, k, j] = fn(y[b, k], s[b, j])."""
    K, J = y.shape[1], s.shape[1]
    return fn(y.unsqueeze(2).expand(-1, K, J, -1), s.unsqueeze(1).expand(-1, K, J, -1))


def _permute(s, perms):
    idx = torch.as_tensor(perms, dtype=torch.long, device=s.device)
    return torch.stack([s[b, idx[b]] for b in range(s.shape[0])])


# -- per-pair losses (summed over speakers by callers) ---------------------------

def neg_si_snr_pairs(y, s, clip_db=30.0):
    return -si_snr_tensor(y, s, clip_db)


def mag_loss_pairs(y, s, cfg: LossConfig):
    """Magnitude-spectrum SI-SNR form with the time-domain scale g applied to s."""
    s_energy = (s * s).sum(-1, keepdim=True)
    if bool(torch.any(s_energy <= 0)):
        raise ValueError("degenerate all-zero target")
    gamma = (y * s).sum(-1, keepdim=True) / s_energy
    ms = stft_tensor(gamma * s, cfg.frame_len, cfg.hop).abs()
    my = stft_tensor(y, cfg.frame_len, cfg.hop).abs()
    num = (ms * ms).sum((-1, -2))
    den = ((ms - my) ** 2).sum((-1, -2))
    val = torch.clamp(_db(num, den, (my * my).sum((-1, -2))), max=cfg.clip_db)
    return -val


def l1_mag_pairs(y, s, cfg: LossConfig):
    Y = stft_tensor(y, cfg.frame_len, cfg.hop)
    S = stft_tensor(s, cfg.frame_len, cfg.hop)
    return (Y.abs() - S.abs()).abs().sum((-1, -2))


def l1_tf_pairs(y, s, cfg: LossConfig):
    Y = stft_tensor(y, cfg.frame_len, cfg.hop)
    S = stft_tensor(s, cfg.frame_len, cfg.hop)
    lm = (Y.abs() - S.abs()).abs().sum((-1, -2))
    lr = (Y.real - S.real).abs().sum((-1, -2))
    li = (Y.imag - S.imag).abs().sum((-1, -2))
    return lm + 0.5 * lr + 0.5 * li


def mag_loss_sisnr_form(y, s, cfg: LossConfig | None = None):
    """Sum over speakers of the magnitude-domain SI-SNR loss; y, s: [K, N] (already aligned)."""
    cfg = cfg or LossConfig()
    return mag_loss_pairs(torch.as_tensor(y), torch.as_tensor(s), cfg).sum()


def l1_tf_loss(y, s, cfg: LossConfig | None = None):
    """Sum over speakers of L_M + L_R/2 + L_I/2; y, s: [K, N] (already aligned)."""
    cfg = cfg or LossConfig()
    return l1_tf_pairs(torch.as_tensor(y), torch.as_tensor(s), cfg).sum()


# -- attractor existence loss -----------------------------------------------------

def attractor_bce(probs, K_true: int):
    """Mean BCE over the K0+1 slots: first ``K_true`` active, the rest inactive.

    ``probs`` is [K0+1] or [B, K0+1]; ``K_true`` an int or per-item sequence.
    """
    p = torch.as_tensor(probs)
    single = p.dim() == 1
    if single:
        p = p.unsqueeze(0)
    K0 = p.shape[-1] - 1
    ks = torch.as_tensor(K_true).reshape(-1).expand(p.shape[0])
    if bool(torch.any(ks < 1)) or bool(torch.any(ks > K0)):
        raise ValueError(f"K_true must lie in [1, {K0}]")
    target = (torch.arange(K0 + 1, device=p.device)[None, :] < ks[:, None].to(p.device)).to(p.dtype)
    # clamp log terms at -100 as torch's BCE does, so saturated probabilities stay finite
    ll = target * torch.clamp(torch.log(p), min=-100) + (1 - target) * torch.clamp(torch.log1p(-p), min=-100)
    loss = -ll.mean(-1)
    return loss[0] if single else loss.mean()


# -- combined objective ------------------------------------------------------------

def combined_loss(outputs, targets, cfg: LossConfig, epoch: int = 0, probs=None, K_true=None,
                  final_only_B_D: int | None = None):
    """Stage-weighted loss with one PIT permutation (from the final stage) reused for all stages.

    ``outputs``: list of [B, K, N] waveforms, auxiliary stages first and the
    final stage last. ``targets``: [B, K, N]. Returns (loss, info dict).
    """
    if not outputs:
        raise ValueError("missing stage outputs")
    B_D = len(outputs) - 1
    if final_only_B_D is not None and final_only_B_D != B_D:
        raise ValueError(f"expected {final_only_B_D + 1} stage outputs, got {len(outputs)}")
    final = outputs[-1]
    if cfg.loss_family == "sisnr_family":
        main_fn = lambda y, s: neg_si_snr_pairs(y, s, cfg.clip_db)  # noqa: E731
        aux_fn = lambda y, s: mag_loss_pairs(y, s, cfg)  # noqa: E731
    else:
        main_fn = lambda y, s: l1_tf_pairs(y, s, cfg)  # noqa: E731
        aux_fn = lambda y, s: l1_mag_pairs(y, s, cfg)  # noqa: E731
    with torch.no_grad():
        mat = _pairwise(main_fn, final.detach(), targets)
    perms = [pit_assign(mat[b].cpu().numpy()).permutation for b in range(mat.shape[0])]
    aligned = _permute(targets, perms)
    main = main_fn(final, aligned).sum(-1).mean()
    aux_losses = [aux_fn(o, aligned).sum(-1).mean() for o in outputs[:-1]]
    a = alpha_at(cfg, epoch)
    if B_D > 0:
        loss = (1 - a) * main + a * sum(aux_losses) / B_D
    else:
        loss = main
    info = {"main": main.item(), "aux": [v.item() for v in aux_losses], "alpha": a, "perms": perms}
    if probs is not None:
        attr = attractor_bce(probs, K_true)
        loss = loss + cfg.attractor_weight * attr
        info["attractor"] = attr.item()
    return loss, info


def stage_weighted(final_loss: float, aux_losses, alpha: float) -> float:
    """(1 - alpha) L_final + alpha * mean(L_aux); plain arithmetic on precomputed stage losses."""
    if not aux_losses:
        return final_loss
    return (1 - alpha) * final_loss + alpha * sum(aux_losses) / len(aux_losses)
