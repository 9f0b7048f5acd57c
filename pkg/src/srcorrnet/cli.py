"""Command-line entry point: ``srcorrnet {synth,train,separate,eval}``.

Exit codes: 0 ok, 1 usage / config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dsp import Waveform, read_wav, write_wav
from .mixsim import DatasetSpec, generate_sample, load_samples, make_dataset
from .model import ModelConfig, SRCorrNet, load_model
from .objectives import LossConfig
from .pipeline import (
    CssConfig, TrainConfig, TrainingDiverged, css_separate, evaluate, load_train_checkpoint, model_separate_fn,
    separation_metrics, train,
)

log = logging.getLogger("srcorrnet")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    css: CssConfig = field(default_factory=CssConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_manifest: str | None = None  # train on WAVs from disk instead of generating the pool
    out: str = "run"
    seed: int = 0

    def to_dict(self):
        return {"model": asdict(self.model), "loss": asdict(self.loss), "css": asdict(self.css),
                "data": asdict(self.data), "train": asdict(self.train), "train_manifest": self.train_manifest,
                "out": self.out, "seed": self.seed}


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "css": CssConfig, "data": DatasetSpec, "train": TrainConfig}


def _build(cls, section, d):
    if not isinstance(d, dict):
        raise UsageError(f"config section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise UsageError(f"unknown config key '{section}.{k}'")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid '{section}' config: {e}") from None


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a merged config document; every unknown key is an error."""
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    for k in doc:
        if k not in top:
            raise UsageError(f"unknown config key '{k}'")
    kw = {name: _build(cls, name, doc.get(name, {})) for name, cls in _SECTIONS.items()}
    for k, typ in (("seed", int), ("out", str)):
        if k in doc and not isinstance(doc[k], typ):
            raise UsageError(f"config key '{k}' must be {typ.__name__}")
    tm = doc.get("train_manifest")
    if tm is not None and not isinstance(tm, str):
        raise UsageError("config key 'train_manifest' must be a path string")
    return RunConfig(**kw, train_manifest=tm, out=doc.get("out", "run"), seed=doc.get("seed", 0))


def load_run_config(path, args) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
    cfg = parse_run_config(doc)
    # flags win over the file
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args)
    spec = cfg.data
    if args.seed is not None:
        spec.seed = args.seed
    try:
        path = make_dataset(spec, cfg.out)
    except OSError as e:
        raise RuntimeError(f"cannot write dataset to {cfg.out}: {e}") from None
    print(path)
    return 0


def _train_pool(cfg: RunConfig):
    if cfg.train_manifest:
        return load_samples(cfg.train_manifest)
    if cfg.train.data_mode == "fresh":
        return None
    return [generate_sample(cfg.data, i)[0] for i in range(cfg.data.count)]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args)
    hp = cfg.train
    hp.seed = cfg.seed
    out = Path(cfg.out)
    pool = _train_pool(cfg)
    resume_from = args.checkpoint or (out / "last.ckpt" if args.resume else None)
    if resume_from is not None:
        if not Path(resume_from).exists():
            raise RuntimeError(f"checkpoint not found: {resume_from}")
        model, opt, state, batcher = load_train_checkpoint(resume_from, hp, pool, cfg.data)
        log.info("resuming at step %d", state.step)
    else:
        model = SRCorrNet(cfg.model, seed=cfg.seed)
        opt = state = batcher = None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    _, _, state, _, recs = train(model, cfg.loss, hp, pool=pool, spec=cfg.data, out_dir=out, opt=opt, state=state,
                                 batcher=batcher)
    last = recs[-1]["loss"] if recs else float("nan")
    print(f"trained to step {state.step}, last loss {last:.4f}, checkpoint {out / 'last.ckpt'}")
    return 0


def _load_checkpoint_model(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise RuntimeError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_separate(args) -> int:
    model = _load_checkpoint_model(args.checkpoint)
    cfg = load_run_config(args.config, args)
    wave = read_wav(args.wav_in)
    if wave.sample_rate != model.cfg.sample_rate:
        raise RuntimeError(f"sample rate {wave.sample_rate} != model rate {model.cfg.sample_rate}")
    if wave.samples.shape[0] < model.cfg.M:
        raise RuntimeError(f"input has {wave.samples.shape[0]} channels, model needs {model.cfg.M}")
    x = wave.samples[:model.cfg.M]
    fn = model_separate_fn(model)
    if args.css:
        streams = css_separate(fn, x, cfg.css, wave.sample_rate)
    else:
        streams = fn(x)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.wav_in).stem
    for k, s in enumerate(streams):
        p = out / f"{stem}_s{k + 1}.wav"
        write_wav(p, Waveform(np.asarray(s)[None], wave.sample_rate))
        print(p)
    return 0


def cmd_eval(args) -> int:
    samples = load_samples(args.manifest)
    if args.mode == "model":
        model = _load_checkpoint_model(args.checkpoint)
        res = evaluate(model, samples)
    else:
        per = []
        for s in samples:
            mix = s.mixture.samples[0]
            est = s.targets if args.mode == "oracle" else np.repeat(mix[None], s.K_true, 0)
            per.append(separation_metrics(est, s.targets, mix))
        agg = {k: float(np.mean([r[k] for r in per])) if per else float("nan") for k in ("si_snri", "sdri")}
        res = {"per_sample": per, "aggregate": agg}
    print(f"{'sample':>8} {'SI-SNRi':>9} {'SDRi':>9}")
    for i, r in enumerate(res["per_sample"]):
        print(f"{i:>8} {r['si_snri']:>9.3f} {r['sdri']:>9.3f}")
    print(f"{'mean':>8} {res['aggregate']['si_snri']:>9.3f} {res['aggregate']['sdri']:>9.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(res, indent=2))
    return 0


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srcorrnet", description="Correlation-based speech separation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--checkpoint", help="resume from this training checkpoint")
    sp.add_argument("--resume", action="store_true", help="resume from <out>/last.ckpt")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("separate", help="separate a WAV file")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--css", action="store_true", help="chunk-wise continuous separation")
    sp.add_argument("wav_in")
    sp.set_defaults(func=cmd_separate)

    sp = sub.add_parser("eval", help="score a model on a dataset manifest")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=("model", "oracle", "mixture"), default="model",
                    help="score the model, the targets themselves, or the unprocessed mixture")
    sp.set_defaults(func=cmd_eval)
    return p


def _set_threads():
    n = os.environ.get("SRCORRNET_THREADS")
    if n is None:
        return
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SRCORRNET_THREADS must be a positive integer, got {n!r}") from None
    torch.set_num_threads(k)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (synth, train, separate, eval)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        _set_threads()
        return args.func(args)
    except UsageError as e:
        print(f"srcorrnet: error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"srcorrnet: training diverged: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ValueError) as e:
        print(f"srcorrnet: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
