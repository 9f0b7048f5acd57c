"""Synthetic multi-channel noisy-reverberant mixtures with truncated-RIR targets."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .dsp import Waveform, read_wav, write_wav

MANIFEST_VERSION = 1


@dataclass
class ToyRoom:
    M: int
    rt60: float | None  # None: anechoic
    direct_delay: np.ndarray  # [K, M] samples
    rirs: list  # rirs[k][m] -> 1-D array
    seed: int


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: np.ndarray  # [K, N] dry
    targets: np.ndarray  # [K, N] truncated-RIR images at the reference mic
    K_true: int
    snr_db: float
    metadata: dict = field(default_factory=dict)


@dataclass
class DatasetSpec:
    count: int = 8
    K_range: tuple = (2, 2)
    rt60_range: tuple | None = None  # None: anechoic
    snr_range: tuple | None = None  # None: noiseless
    seed: int = 0
    duration: float = 2.0
    M: int = 1
    sample_rate: int = 8000
    n_offset: int | None = None  # default: 256 for M > 1, 512 for M == 1
    level_range_db: tuple = (-2.5, 2.5)
    max_tdoa: int = 6
    min_tdoa_gap: int = 3
    rir_length: int = 4096

    def __post_init__(self):
        self.K_range = tuple(self.K_range)
        if self.rt60_range is not None:
            self.rt60_range = tuple(self.rt60_range)
        if self.snr_range is not None:
            self.snr_range = tuple(self.snr_range)
        self.level_range_db = tuple(self.level_range_db)
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not 1 <= self.K_range[0] <= self.K_range[1]:
            raise ValueError(f"invalid K_range {self.K_range}")

    @property
    def offset(self) -> int:
        if self.n_offset is not None:
            return self.n_offset
        return 256 if self.M > 1 else 512

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


# -- room impulse responses ----------------------------------------------------

def gen_toy_rir(rt60: float, delay: int, length: int, seed: int, sample_rate: int = 8000,
                tail_gain: float = 0.5) -> np.ndarray:
    """Unit direct tap at ``delay`` followed by an exponentially decaying noise tail.

    The amplitude envelope exp(-6.9 t / rt60) puts the tail 60 dB down at
    t = rt60. Tail samples are uniform in [-tail_gain, tail_gain] before the
    envelope so the direct tap stays the peak.
    """
    if rt60 <= 0:
        raise ValueError("rt60 must be positive")
    rng = np.random.default_rng(seed)
    h = np.zeros(length)
    if delay < length:
        h[delay] = 1.0
    n = np.arange(1, length - delay)
    env = np.exp(-6.9 * n / (rt60 * sample_rate))
    h[delay + 1:] = tail_gain * rng.uniform(-1.0, 1.0, n.size) * env
    return h


def truncate_rir(h: np.ndarray, n_offset: int) -> np.ndarray:
    """Keep h[0 : n_peak + n_offset + 1] (peak inclusive), zero the rest."""
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty RIR")
    peak = int(np.argmax(np.abs(h)))
    out = np.zeros_like(h)
    end = min(h.size, peak + n_offset + 1)
    out[:end] = h[:end]
    return out


def delta_rir(delay: int, length: int) -> np.ndarray:
    h = np.zeros(length)
    h[delay] = 1.0
    return h


def make_room(K: int, M: int, rng: np.random.Generator, rt60: float | None = None,
              max_tdoa: int = 6, min_tdoa_gap: int = 3, rir_length: int = 4096,
              sample_rate: int = 8000) -> ToyRoom:
    """Linear-array toy room: source k reaches mic m after base + m * tdoa_k samples."""
    seed = int(rng.integers(2**31))
    r = np.random.default_rng(seed)
    tdoas = _spread_tdoas(K, max_tdoa, min_tdoa_gap, r) if M > 1 else np.zeros(K, dtype=int)
    base = max_tdoa * (M - 1) + int(r.integers(0, 4))
    delays = np.array([[base + m * tdoas[k] for m in range(M)] for k in range(K)], dtype=int)
    rirs = []
    for k in range(K):
        row = []
        for m in range(M):
            if rt60 is None:
                row.append(delta_rir(int(delays[k, m]), rir_length))
            else:
                row.append(gen_toy_rir(rt60, int(delays[k, m]), rir_length, int(r.integers(2**31)), sample_rate))
        rirs.append(row)
    return ToyRoom(M, rt60, delays, rirs, seed)


def _spread_tdoas(K, max_tdoa, gap, rng):
    choices = np.arange(-max_tdoa, max_tdoa + 1)
    for _ in range(1000):
        t = rng.choice(choices, size=K, replace=False)
        if K == 1 or np.min(np.diff(np.sort(t))) >= gap:
            return t
    raise ValueError("cannot place sources with the requested TDOA gap")


# -- sources -------------------------------------------------------------------

def speech_like(num_samples: int, rng: np.random.Generator, sample_rate: int = 8000,
                f0_range=(90.0, 260.0)) -> np.ndarray:
    """Voiced syllables of formant-shaped harmonics with a drifting f0, plus sparse noise bursts.

    Returned signal has unit RMS.
    """
    t = np.arange(num_samples) / sample_rate
    f0_base = rng.uniform(*f0_range)
    # slow f0 drift: smoothed random walk plus vibrato
    knots = rng.normal(0.0, 0.06, size=int(num_samples / sample_rate * 4) + 2)
    drift = np.interp(t, np.linspace(0, t[-1] + 1e-9, knots.size), np.cumsum(knots) * 0.5)
    vib = 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    f0 = f0_base * np.exp(np.clip(drift, -0.4, 0.4) + vib)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    f1, f2 = rng.uniform(300, 900), rng.uniform(1000, 2600)
    voiced = np.zeros(num_samples)
    nyq = sample_rate / 2
    for h in range(1, int(nyq / (f0_range[0] * 0.6))):
        fh = h * f0
        amp = (np.exp(-((fh - f1) / 250.0) ** 2) + 0.6 * np.exp(-((fh - f2) / 400.0) ** 2) + 0.3 / h)
        amp = np.where(fh < nyq - 100, amp, 0.0)
        if not amp.any():
            break
        voiced += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    env = _syllable_envelope(num_samples, rng, sample_rate)
    sig = voiced * env
    # fricative-like bursts in some gaps
    gaps = np.flatnonzero(env < 1e-3)
    if gaps.size and rng.random() < 0.7:
        burst = rng.normal(size=num_samples)
        burst = lfilter([1.0, -0.95], [1.0], burst)
        mask = np.zeros(num_samples)
        for _ in range(int(rng.integers(1, 4))):
            c = int(rng.choice(gaps))
            w = int(rng.uniform(0.03, 0.08) * sample_rate)
            lo, hi = max(0, c - w // 2), min(num_samples, c + w // 2)
            mask[lo:hi] = np.hanning(hi - lo) if hi - lo > 1 else 0.0
        sig = sig + 0.15 * burst * mask
    rms = np.sqrt(np.mean(sig**2))
    if rms < 1e-12:
        raise ValueError("degenerate all-zero source")
    return sig / rms


def _syllable_envelope(n, rng, sr):
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    while pos < n:
        dur = int(rng.uniform(0.12, 0.35) * sr)
        seg = np.hanning(dur + 2)[1:-1] ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(n, pos + dur)
        env[pos:end] = seg[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.15) * sr)
    return env


# -- mixing --------------------------------------------------------------------

def synthesize_mixture(sources, room: ToyRoom, noise_snr_db: float, K: int,
                       n_offset: int = 512, seed: int = 0, sample_rate: int = 8000,
                       noise_kind: str = "white") -> MixtureSample:
    """Convolve each source with its per-mic RIR, sum, and add noise at ``noise_snr_db``.

    SNR is measured against the louder source image summed over all mics.
    ``noise_snr_db = inf`` gives a noiseless mixture.
    """
    sources = np.asarray(sources, dtype=np.float64)
    if sources.ndim != 2 or K > sources.shape[0] or K > len(room.rirs):
        raise ValueError(f"K={K} exceeds available sources")
    if K < 1:
        raise ValueError("K must be >= 1")
    sources = sources[:K]
    N = sources.shape[1]
    images = np.zeros((K, room.M, N))
    targets = np.zeros((K, N))
    for k in range(K):
        for m in range(room.M):
            images[k, m] = fftconvolve(sources[k], room.rirs[k][m])[:N]
        targets[k] = fftconvolve(sources[k], truncate_rir(room.rirs[k][0], n_offset))[:N]
    mixture = images.sum(0)
    if np.isfinite(noise_snr_db):
        rng = np.random.default_rng(seed)
        noise = rng.normal(size=(room.M, N))
        if noise_kind == "lowpass":
            noise = lfilter([1.0], [1.0, -0.7], noise, axis=-1)
        loud = max(float(np.sum(images[k] ** 2)) for k in range(K))
        noise *= math.sqrt(loud / (np.sum(noise**2) * 10 ** (noise_snr_db / 10)))
        mixture = mixture + noise
    meta = {"seed": seed, "rt60": room.rt60}
    return MixtureSample(Waveform(mixture, sample_rate), sources, targets, K, float(noise_snr_db), meta)


def measured_snr_db(sample: MixtureSample, room: ToyRoom) -> float:
    """Post-hoc SNR of a generated sample (louder image vs residual noise)."""
    N = sample.sources.shape[1]
    images = np.array([[fftconvolve(sample.sources[k], room.rirs[k][m])[:N] for m in range(room.M)]
                       for k in range(sample.K_true)])
    noise = sample.mixture.samples - images.sum(0)
    loud = max(float(np.sum(images[k] ** 2)) for k in range(sample.K_true))
    return 10 * math.log10(loud / np.sum(noise**2))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_sample(spec: DatasetSpec, index: int, K: int | None = None):
    """Draw sample ``index`` of the dataset described by ``spec``; returns (MixtureSample, ToyRoom)."""
    s = sample_seed(spec.seed, index)
    rng = np.random.default_rng(s)
    K_true = int(rng.integers(spec.K_range[0], spec.K_range[1] + 1)) if K is None else K
    rt60 = None if spec.rt60_range is None else float(rng.uniform(*spec.rt60_range))
    snr = math.inf if spec.snr_range is None else float(rng.uniform(*spec.snr_range))
    N = spec.num_samples
    srcs = np.stack([speech_like(N, rng, spec.sample_rate) for _ in range(K_true)])
    gains = 10 ** (rng.uniform(*spec.level_range_db, size=K_true) / 20)
    srcs = srcs * gains[:, None]
    room = make_room(K_true, spec.M, rng, rt60, spec.max_tdoa, spec.min_tdoa_gap, spec.rir_length,
                     spec.sample_rate)
    sample = synthesize_mixture(srcs, room, snr, K_true, spec.offset, int(rng.integers(2**31)),
                                spec.sample_rate)
    sample.metadata.update({"seed": s, "index": index})
    return sample, room


def make_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write mixture/target WAVs and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.count):
        sample, _ = generate_sample(spec, i)
        sid = f"s{i:05d}"
        mix_path = f"{sid}_mix.wav"
        write_wav(out / mix_path, sample.mixture)
        tpaths = []
        for k in range(sample.K_true):
            p = f"{sid}_tgt{k}.wav"
            write_wav(out / p, Waveform(sample.targets[k][None], spec.sample_rate))
            tpaths.append(p)
        records.append({"id": sid, "mixture_path": mix_path, "target_paths": tpaths,
                        "K_true": sample.K_true, "rt60": sample.metadata["rt60"],
                        "snr_db": None if not np.isfinite(sample.snr_db) else sample.snr_db,
                        "seed": sample.metadata["seed"]})
    manifest = {"version": MANIFEST_VERSION, "spec": asdict(spec), "samples": records}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    manifest["root"] = str(path.parent)
    return manifest


def load_samples(path) -> list:
    """Read every sample of a manifest back into :class:`MixtureSample` objects."""
    man = load_manifest(path)
    root = Path(man["root"])
    out = []
    for rec in man["samples"]:
        mix = read_wav(root / rec["mixture_path"])
        tg = np.stack([read_wav(root / p).samples[0] for p in rec["target_paths"]])
        snr = math.inf if rec["snr_db"] is None else rec["snr_db"]
        meta = {"id": rec["id"], "seed": rec["seed"], "rt60": rec["rt60"]}
        out.append(MixtureSample(mix, np.zeros_like(tg), tg, rec["K_true"], snr, meta))
    return out


def make_meeting(duration: float, num_speakers: int, seed: int, M: int = 1, sample_rate: int = 8000,
                 utt_range=(1.5, 3.0), overlap_prob: float = 0.3):
    """Long recording with speakers taking turns (occasionally overlapping).

    Returns (mixture Waveform, per-speaker reference images [S, N], activity [S, N] bool).
    """
    rng = np.random.default_rng(seed)
    N = int(round(duration * sample_rate))
    room = make_room(num_speakers, M, rng)
    voices = np.zeros((num_speakers, N))
    pos, spk = int(0.2 * sample_rate), 0
    while pos < N - int(0.5 * sample_rate):
        L = int(rng.uniform(*utt_range) * sample_rate)
        end = min(N, pos + L)
        utt = speech_like(end - pos, rng, sample_rate)
        voices[spk, pos:end] += utt
        spk = (spk + 1) % num_speakers
        if rng.random() < overlap_prob:
            pos = end - int(rng.uniform(0.2, 0.6) * sample_rate)
        else:
            pos = end + int(rng.uniform(0.1, 0.5) * sample_rate)
    mix = np.zeros((M, N))
    refs = np.zeros((num_speakers, N))
    for k in range(num_speakers):
        for m in range(M):
            img = fftconvolve(voices[k], room.rirs[k][m])[:N]
            mix[m] += img
            if m == 0:
                refs[k] = img
    return Waveform(mix, sample_rate), refs, np.abs(voices) > 0
