"""Training loop, evaluation metrics and chunk-wise continuous separation."""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import nncore as nc
from .mixsim import DatasetSpec, MixtureSample, generate_sample
from .model import ModelConfig, SRCorrNet, count_speakers
from .objectives import LossConfig, alpha_at, combined_loss, pit_assign, sdr_tensor, si_snr_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    segment: float = 0.5  # seconds; None trains on full utterances
    peak_lr: float = 1e-3
    warmup_steps: int = 5000
    lr_decay: float = 0.95
    lr_decay_start: int = 50
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    steps_per_epoch: int = 1000
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    data_mode: str = "pool"  # "pool": fixed sample list; "fresh": new generator sample per draw
    normalize_input: bool = True

    def __post_init__(self):
        if self.data_mode not in ("pool", "fresh"):
            raise ValueError(f"unknown data_mode {self.data_mode!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(hp: TrainConfig, step: int, epoch: int) -> float:
    """Linear warm-up over ``warmup_steps`` then exponential per-epoch decay after ``lr_decay_start``."""
    warm = 1.0 if hp.warmup_steps <= 0 else min(1.0, step / hp.warmup_steps)
    return hp.peak_lr * warm * hp.lr_decay ** max(0, epoch - hp.lr_decay_start)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    best_metric: float | None = None
    order: list = field(default_factory=list)  # remaining pool indices in the current epoch


# -- data -----------------------------------------------------------------------

class Batcher:
    """Random fixed-length crops; pool order reshuffled every pass."""

    def __init__(self, hp: TrainConfig, pool=None, spec: DatasetSpec | None = None):
        if hp.data_mode == "pool" and not pool:
            raise ValueError("pool mode needs a non-empty sample list")
        if hp.data_mode == "fresh" and spec is None:
            raise ValueError("fresh mode needs a DatasetSpec")
        self.hp, self.pool, self.spec = hp, pool, spec
        self.rng = np.random.default_rng(hp.seed)
        self.order: list = []
        self.fresh_index = 0

    def state(self):
        return {"rng": self.rng.bit_generator.state, "order": list(self.order), "fresh_index": self.fresh_index}

    def load_state(self, st):
        self.rng.bit_generator.state = st["rng"]
        self.order = list(st["order"])
        self.fresh_index = st["fresh_index"]

    def _draw(self) -> MixtureSample:
        if self.hp.data_mode == "fresh":
            # offset keeps training draws disjoint from evaluation indices
            sample, _ = generate_sample(self.spec, 1_000_000 + self.fresh_index)
            self.fresh_index += 1
            return sample
        if not self.order:
            self.order = [int(i) for i in self.rng.permutation(len(self.pool))]
        return self.pool[self.order.pop(0)]

    def next(self):
        mixes, tgts, ks = [], [], []
        first_k = None
        for _ in range(self.hp.batch_size):
            s = self._draw()
            if first_k is None:
                first_k = s.K_true
            elif s.K_true != first_k:
                # batch items must share K; keep the first item's count
                continue
            mix, tgt = s.mixture.samples, s.targets
            N = mix.shape[-1]
            if self.hp.segment is not None:
                seg = int(round(self.hp.segment * s.mixture.sample_rate))
                if seg < N:
                    off = int(self.rng.integers(0, N - seg + 1))
                    mix, tgt = mix[:, off:off + seg], tgt[:, off:off + seg]
            mixes.append(mix)
            tgts.append(tgt)
            ks.append(s.K_true)
        mix = torch.tensor(np.stack(mixes), dtype=torch.float32)
        tgt = torch.tensor(np.stack(tgts), dtype=torch.float32)
        if self.hp.normalize_input:
            scale = mix[:, :1].pow(2).mean(-1, keepdim=True).sqrt().clamp(min=1e-8)
            mix, tgt = mix / scale, tgt / scale
        # rare crops can silence a target; nudge them so SI-SNR stays defined
        dead = tgt.pow(2).sum(-1) < 1e-10
        if bool(dead.any()):
            tgt = tgt + dead.unsqueeze(-1) * 1e-4 * torch.randn(tgt.shape, generator=torch.Generator().manual_seed(0))
        return mix, tgt, ks[0]


# -- training --------------------------------------------------------------------

def _opt_tensors(opt, model):
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in opt.state.items():
        n = names[id(p)]
        out[f"opt.{n}.exp_avg"] = st["exp_avg"]
        out[f"opt.{n}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def save_train_checkpoint(path, model, opt, state: TrainState, batcher: Batcher, configs: dict):
    tensors = dict(model.state_dict())
    tensors.update(_opt_tensors(opt, model))
    opt_steps = {n: float(opt.state[p]["step"]) for n, p in model.named_parameters() if p in opt.state}
    meta = {"model_config": asdict(model.cfg), "train_state": {"step": state.step, "epoch": state.epoch,
                                                               "best_metric": state.best_metric},
            "batcher": batcher.state(), "opt_steps": opt_steps, "configs": configs}
    nc.save_checkpoint(path, tensors, meta)


def load_train_checkpoint(path, hp: TrainConfig, pool=None, spec=None):
    tensors, meta = nc.load_checkpoint(path)
    model = SRCorrNet(ModelConfig.from_dict(meta["model_config"]), seed=None)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    opt = make_optimizer(model, hp)
    for n, p in model.named_parameters():
        if f"opt.{n}.exp_avg" in tensors:
            opt.state[p] = {"step": torch.tensor(meta["opt_steps"][n]),
                            "exp_avg": tensors[f"opt.{n}.exp_avg"].clone(),
                            "exp_avg_sq": tensors[f"opt.{n}.exp_avg_sq"].clone()}
    ts = meta["train_state"]
    state = TrainState(ts["step"], ts["epoch"], best_metric=ts["best_metric"])
    batcher = Batcher(hp, pool, spec)
    batcher.load_state(meta["batcher"])
    return model, opt, state, batcher


def make_optimizer(model, hp: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=hp.peak_lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=hp.weight_decay)


def train_step(model, opt, batch, loss_cfg: LossConfig, hp: TrainConfig, state: TrainState):
    """One optimizer update; returns the log record."""
    mix, tgt, K = batch
    model.train()
    lr = lr_at(hp, state.step + 1, state.epoch)
    for g in opt.param_groups:
        g["lr"] = lr
    X = model.analyze(mix)
    out = model(X, K_true=K if model.cfg.split_kind == "attractor" else None, aux=True)
    waves = [model.synthesize(Y, mix.shape[-1]) for Y in out["outputs"]]
    diag = f"at step {state.step} (epoch {state.epoch}); batch drawn by run seed {hp.seed} at step {state.step}"
    if not all(bool(torch.isfinite(w).all()) for w in waves):
        raise TrainingDiverged(f"non-finite model output {diag}")
    probs = out["attractors"].probs if out["attractors"] is not None else None
    loss, info = combined_loss(waves, tgt, loss_cfg, state.epoch, probs, K)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {diag}")
    opt.zero_grad(set_to_none=True)
    nc.backward(loss)
    pre = float(torch.nn.utils.clip_grad_norm_(model.parameters(), hp.clip_norm))
    opt.step()
    state.step += 1
    state.epoch = state.step // hp.steps_per_epoch
    rec = {"step": state.step, "loss": loss.item(), "lr": lr, "alpha": info["alpha"], "grad_norm": pre,
           "clipped": pre > hp.clip_norm, "main": info["main"]}
    if "attractor" in info:
        rec["attractor"] = info["attractor"]
    return rec


def train(model: SRCorrNet, loss_cfg: LossConfig, hp: TrainConfig, pool=None, spec=None,
          out_dir=None, opt=None, state: TrainState | None = None, batcher: Batcher | None = None,
          callback=None, stop_step: int | None = None):
    """Run ``hp.steps`` updates (or up to ``stop_step``); returns (model, opt, state, batcher, log).

    When ``out_dir`` is given, a JSON-lines metric log and periodic/final
    checkpoints are written there. ``callback(state, record)`` may return
    True to stop early.
    """
    torch.manual_seed(hp.seed)
    opt = opt or make_optimizer(model, hp)
    state = state or TrainState()
    batcher = batcher or Batcher(hp, pool, spec)
    records = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "a")
    configs = {"loss": asdict(loss_cfg), "train": asdict(hp)}
    end = hp.steps if stop_step is None else stop_step
    try:
        while state.step < end:
            rec = train_step(model, opt, batcher.next(), loss_cfg, hp, state)
            records.append(rec)
            if log_fh and state.step % hp.log_every == 0:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if out_dir is not None and hp.checkpoint_every and state.step % hp.checkpoint_every == 0:
                save_train_checkpoint(out_dir / "last.ckpt", model, opt, state, batcher, configs)
            if callback is not None and callback(state, rec):
                break
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_train_checkpoint(out_dir / "last.ckpt", model, opt, state, batcher, configs)
    return model, opt, state, batcher, records


# -- evaluation ------------------------------------------------------------------

def separation_metrics(est, refs, mixture_ref, clip_db=30.0):
    """PIT-aligned SI-SNRi / SDRi for one sample.

    est, refs: [K, N]; mixture_ref: [N]. Returns dict with per-speaker and mean values.
    """
    est = torch.as_tensor(np.ascontiguousarray(est, dtype=np.float64))
    refs = torch.as_tensor(np.ascontiguousarray(refs, dtype=np.float64))
    mix = torch.as_tensor(np.ascontiguousarray(mixture_ref, dtype=np.float64))
    K = refs.shape[0]
    if est.shape[0] < K:
        est = torch.cat([est, torch.zeros(K - est.shape[0], est.shape[-1], dtype=est.dtype)])
    mat = np.array([[-float(si_snr_tensor(est[k], refs[j], clip_db)) for j in range(K)] for k in range(est.shape[0])])
    if mat.shape[0] > K:
        # more outputs than sources: pick the best K outputs
        best = None
        for rows in itertools.combinations(range(mat.shape[0]), K):
            a = pit_assign(mat[list(rows)])
            if best is None or a.loss_value < best[1].loss_value:
                best = (rows, a)
        rows, assign = best
        est = est[list(rows)]
    else:
        assign = pit_assign(mat)
    aligned = est[list(np.argsort(assign.permutation))]  # aligned[j] matches refs[j]
    si = si_snr_tensor(aligned, refs, clip_db)
    si_mix = si_snr_tensor(mix.expand_as(refs), refs, clip_db)
    sdr = sdr_tensor(aligned, refs)
    sdr_mix = sdr_tensor(mix.expand_as(refs), refs)
    return {"si_snri": float((si - si_mix).mean()), "sdri": float((sdr - sdr_mix).mean()),
            "si_snri_per_spk": (si - si_mix).tolist(), "sdri_per_spk": (sdr - sdr_mix).tolist()}


@torch.no_grad()
def evaluate(model: SRCorrNet, samples, oracle_count: bool = True, normalize_input: bool = True):
    """Per-sample and mean SI-SNRi / SDRi (and speaker-count accuracy for attractor models)."""
    model.eval()
    per = []
    for s in samples:
        mix = torch.tensor(s.mixture.samples, dtype=torch.float32)[None]
        scale = 1.0
        if normalize_input:
            scale = float(mix[:, :1].pow(2).mean().sqrt().clamp(min=1e-8))
        K = s.K_true if (oracle_count and model.cfg.split_kind == "attractor") else None
        est, att = model.separate(mix / scale, K_true=K)
        rec = separation_metrics(est[0].double().numpy() * scale, s.targets, s.mixture.samples[0])
        if att is not None:
            rec["K_pred"] = int(count_speakers(att.probs, model.cfg.K0)[0])
            rec["K_true"] = s.K_true
        per.append(rec)
    agg = {"si_snri": float(np.mean([r["si_snri"] for r in per])) if per else float("nan"),
           "sdri": float(np.mean([r["sdri"] for r in per])) if per else float("nan")}
    if per and "K_pred" in per[0]:
        agg["count_accuracy"] = float(np.mean([r["K_pred"] == r["K_true"] for r in per]))
    return {"per_sample": per, "aggregate": agg}


@torch.no_grad()
def count_accuracy(model: SRCorrNet, samples, normalize_input: bool = True) -> float:
    model.eval()
    hits = 0
    for s in samples:
        mix = torch.tensor(s.mixture.samples, dtype=torch.float32)[None]
        if normalize_input:
            mix = mix / mix[:, :1].pow(2).mean().sqrt().clamp(min=1e-8)
        feat, _ = model.features(model.analyze(mix))
        E = model.encode(model.embed(feat))
        probs = model.split.attractors(E).probs
        hits += int(count_speakers(probs, model.cfg.K0)[0]) == s.K_true
    return hits / max(1, len(samples))


# -- continuous speech separation ------------------------------------------------------

@dataclass
class CssConfig:
    V_h: float = 1.2
    V: float = 0.8
    V_f: float = 0.4
    K_streams: int = 2

    def __post_init__(self):
        if self.V <= 0 or self.V_h < 0 or self.V_f < 0:
            raise ValueError("CSS segment lengths must be non-negative with V > 0")
        if not 1 <= self.K_streams <= 3:
            raise ValueError("K_streams must lie in [1, 3]")

    @property
    def chunk(self) -> float:
        return self.V_h + self.V + self.V_f


def _ncc(a, b, eps=1e-8):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + eps))


def stitch_align(prev_tail, cur_head):
    """Permutation pi maximizing sum_k ncc(prev_tail[k], cur_head[pi[k]]) at zero lag."""
    prev_tail = np.asarray(prev_tail, dtype=np.float64)
    cur_head = np.asarray(cur_head, dtype=np.float64)
    if prev_tail.shape != cur_head.shape:
        raise ValueError("overlap regions must have equal shapes")
    K = prev_tail.shape[0]
    sim = np.array([[_ncc(prev_tail[k], cur_head[j]) for j in range(K)] for k in range(K)])
    return pit_assign(-sim).permutation


def _fit_streams(y, K):
    if y.shape[0] >= K:
        # keep the K most energetic streams, in their original order
        keep = np.sort(np.argsort(-np.sum(y**2, axis=-1))[:K])
        return y[keep]
    return np.concatenate([y, np.zeros((K - y.shape[0], y.shape[-1]))])


def css_separate(separate_fn, wave: np.ndarray, cfg: CssConfig, sample_rate: int = 8000):
    """Chunk-wise separation with stream stitching.

    ``separate_fn(chunk [M, n]) -> [K, n]`` separates one chunk. Returns
    [K_streams, N] continuous streams.
    """
    wave = np.atleast_2d(np.asarray(wave, dtype=np.float64))
    N = wave.shape[-1]
    Vh = int(round(cfg.V_h * sample_rate))
    V = int(round(cfg.V * sample_rate))
    W = int(round(cfg.chunk * sample_rate))
    K = cfg.K_streams
    if N <= W:
        return _fit_streams(np.asarray(separate_fn(wave)), K)[:, :N]
    out = np.zeros((K, N))
    prev = None  # (start, stitched chunk output)
    start = 0
    while True:
        end = min(N, start + W)
        y = _fit_streams(np.asarray(separate_fn(wave[:, start:end])), K)
        if prev is not None:
            p_start, p_y = prev
            lo, hi = start, min(p_start + p_y.shape[-1], end)
            perm = stitch_align(p_y[:, lo - p_start:hi - p_start], y[:, :hi - lo])
            y = y[list(perm)]
        emit_lo = 0 if start == 0 else Vh
        emit_hi = (end - start) if end == N else Vh + V
        out[:, start + emit_lo:start + emit_hi] = y[:, emit_lo:emit_hi]
        if end == N:
            break
        prev = (start, y)
        start += V
    return out


def model_separate_fn(model: SRCorrNet, normalize_input: bool = True):
    """Adapter from a model to the ``separate_fn`` signature used by :func:`css_separate`."""

    @torch.no_grad()
    def fn(chunk):
        model.eval()
        x = torch.tensor(chunk, dtype=torch.float32)[None]
        scale = 1.0
        if normalize_input:
            scale = float(x[:, :1].pow(2).mean().sqrt().clamp(min=1e-8))
        y, _ = model.separate(x / scale)
        return y[0].double().numpy() * scale

    return fn
