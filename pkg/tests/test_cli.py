import json
import subprocess
import sys

import numpy as np
import pytest

from srcorrnet.cli import UsageError, main, parse_run_config
from srcorrnet.dsp import Waveform, read_wav, write_wav
from srcorrnet.mixsim import load_manifest

TINY = {"model": {"C": 8, "C_H": 8, "heads": 2, "B_D": 1},
        "data": {"count": 2, "duration": 0.3, "seed": 4},
        "train": {"steps": 10, "segment": 0.1, "warmup_steps": 5, "steps_per_epoch": 5}}


def write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root, TINY)
    assert main(["train", "--config", cfg, "--out", str(root / "run"), "--seed", "1"]) == 0
    return root, cfg


class TestConfig:
    def test_defaults(self):
        cfg = parse_run_config({})
        assert cfg.model.C == 32 and cfg.seed == 0

    @pytest.mark.parametrize("doc,key", [({"modle": {}}, "modle"), ({"model": {"Cx": 3}}, "model.Cx"),
                                         ({"train": {"lr": 1}}, "train.lr"), ({"css": {"V_x": 1}}, "css.V_x")])
    def test_unknown_key_named(self, doc, key):
        with pytest.raises(UsageError, match=key.replace(".", r"\.")):
            parse_run_config(doc)

    def test_invalid_value(self):
        with pytest.raises(UsageError):
            parse_run_config({"model": {"C": 10, "heads": 4}})

    def test_bad_schema_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"data": {"cout": 2}})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 1
        err = capsys.readouterr().err
        assert "data.cout" in err and err.count("\n") == 1
        assert not (tmp_path / "d").exists()


class TestUsage:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["eval"], ["train", "--seed", "x"]])
    def test_invalid_invocations(self, argv, capsys):
        assert main(argv) == 1
        assert capsys.readouterr().err.count("\n") == 1

    def test_bad_thread_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SRCORRNET_THREADS", "zero")
        assert main(["synth", "--out", str(tmp_path)]) == 1

    def test_console_module(self):
        r = subprocess.run([sys.executable, "-m", "srcorrnet.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "synth" in r.stdout


class TestSynth:
    def test_two_samples_and_determinism(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, TINY)
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert capsys.readouterr().out.strip().endswith("manifest.json")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        man = load_manifest(tmp_path / "a" / "manifest.json")
        assert len(man["samples"]) == 2
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len([f for f in files if f.endswith("_mix.wav")]) == 2
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_flag_changes_data(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        main(["synth", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["synth", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "99"])
        a = (tmp_path / "a" / "s00000_mix.wav").read_bytes()
        assert a != (tmp_path / "b" / "s00000_mix.wav").read_bytes()


class TestTrain:
    def test_smoke_ten_lines(self, trained):
        root, _ = trained
        lines = (root / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 10 and json.loads(lines[-1])["step"] == 10

    def test_resume_continues(self, tmp_path):
        doc = json.loads(json.dumps(TINY))
        cfg10 = write_cfg(tmp_path, doc, "c10.json")
        assert main(["train", "--config", cfg10, "--out", str(tmp_path / "full")]) == 0
        doc["train"]["steps"] = 4
        assert main(["train", "--config", write_cfg(tmp_path, doc, "c4.json"), "--out", str(tmp_path / "part")]) == 0
        assert main(["train", "--config", cfg10, "--out", str(tmp_path / "part"), "--resume"]) == 0
        full = [json.loads(s) for s in (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()]
        part = [json.loads(s) for s in (tmp_path / "part" / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in part] == list(range(1, 11))
        assert [r["loss"] for r in part] == [r["loss"] for r in full]

    def test_nan_exits_runtime(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TINY))
        doc["train"].update(peak_lr=1e30, warmup_steps=0)
        assert main(["train", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "r")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_resume_checkpoint(self, tmp_path):
        cfg = write_cfg(tmp_path, TINY)
        assert main(["train", "--config", cfg, "--out", str(tmp_path), "--checkpoint", str(tmp_path / "no")]) == 2


class TestSeparate:
    def test_two_files(self, trained, tmp_path):
        root, _ = trained
        x = np.random.default_rng(0).normal(size=(1, 4000)) * 0.1
        write_wav(tmp_path / "in.wav", Waveform(x, 8000))
        before = (tmp_path / "in.wav").read_bytes()
        assert main(["separate", "--checkpoint", str(root / "run" / "last.ckpt"), "--out", str(tmp_path / "o"),
                     str(tmp_path / "in.wav")]) == 0
        outs = sorted((tmp_path / "o").glob("*.wav"))
        assert [p.name for p in outs] == ["in_s1.wav", "in_s2.wav"]
        assert read_wav(outs[0]).samples.shape == (1, 4000)
        assert (tmp_path / "in.wav").read_bytes() == before

    def test_css_preserves_duration(self, trained, tmp_path):
        root, _ = trained
        x = np.random.default_rng(1).normal(size=(1, 8000 * 7 + 123)) * 0.1
        write_wav(tmp_path / "long.wav", Waveform(x, 8000))
        assert main(["separate", "--checkpoint", str(root / "run" / "last.ckpt"), "--out", str(tmp_path / "o"),
                     "--css", str(tmp_path / "long.wav")]) == 0
        for k in (1, 2):
            assert read_wav(tmp_path / "o" / f"long_s{k}.wav").samples.shape == (1, 8000 * 7 + 123)

    def test_missing_checkpoint(self, tmp_path):
        write_wav(tmp_path / "in.wav", Waveform(np.zeros((1, 100)), 8000))
        assert main(["separate", "--checkpoint", str(tmp_path / "nope.ckpt"), str(tmp_path / "in.wav")]) == 2


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    doc = {"data": {"count": 3, "duration": 0.5, "seed": 2, "snr_range": [10, 20]}}
    main(["synth", "--config", write_cfg(root, doc), "--out", str(root / "d")])
    return root / "d" / "manifest.json"


class TestEval:
    def test_mixture_passthrough_zero(self, manifest, tmp_path):
        assert main(["eval", "--manifest", str(manifest), "--mode", "mixture", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "metrics.json").read_text())
        assert all(abs(r["si_snri"]) < 1e-9 for r in res["per_sample"])

    def test_oracle_ceiling_and_mean(self, manifest, tmp_path):
        assert main(["eval", "--manifest", str(manifest), "--mode", "oracle", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "metrics.json").read_text())
        from srcorrnet.mixsim import load_samples
        from srcorrnet.objectives import si_snr
        for r, s in zip(res["per_sample"], load_samples(manifest)):
            mix_term = np.mean([si_snr(s.mixture.samples[0], t) for t in s.targets])
            assert r["si_snri"] == pytest.approx(30.0 - mix_term, abs=1e-6)
        assert res["aggregate"]["si_snri"] == pytest.approx(np.mean([r["si_snri"] for r in res["per_sample"]]))

    def test_model_mode(self, manifest, trained, tmp_path, capsys):
        root, _ = trained
        assert main(["eval", "--manifest", str(manifest), "--checkpoint", str(root / "run" / "last.ckpt")]) == 0
        assert "mean" in capsys.readouterr().out

    def test_model_mode_needs_checkpoint(self, manifest):
        assert main(["eval", "--manifest", str(manifest)]) == 1
