import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srcorrnet.dsp import read_wav
from srcorrnet.mixsim import (
    DatasetSpec, delta_rir, gen_toy_rir, generate_sample, load_manifest, make_dataset, make_meeting, make_room,
    measured_snr_db, speech_like, synthesize_mixture, truncate_rir,
)


class TestRir:
    def test_direct_tap_is_peak(self):
        h = gen_toy_rir(0.4, 17, 4096, seed=1)
        assert h[17] == 1.0 and np.all(h[:17] == 0) and int(np.argmax(np.abs(h))) == 17

    def test_decay_reaches_minus_60_db_at_rt60(self):
        rt60, sr = 0.3, 8000
        hs = np.stack([gen_toy_rir(rt60, 0, 4096, seed=s) for s in range(200)])
        power = np.mean(hs[:, 1:] ** 2, axis=0)
        n = np.arange(1, 4096)
        slope, _ = np.polyfit(n / sr, 10 * np.log10(power), 1)
        assert slope * rt60 == pytest.approx(-60.0, abs=1.0)

    def test_tail_energy(self):
        # E[sum tail^2] = g^2 / 3 * sum_n exp(-13.8 n / (rt60 sr))
        rt60, g = 0.2, 0.5
        energies = [np.sum(gen_toy_rir(rt60, 0, 4096, seed=s)[1:] ** 2) for s in range(100)]
        n = np.arange(1, 4096)
        expected = g * g / 3 * np.sum(np.exp(-13.8 * n / (rt60 * 8000)))
        assert np.mean(energies) == pytest.approx(expected, rel=0.05)

    def test_bad_rt60(self):
        with pytest.raises(ValueError):
            gen_toy_rir(0.0, 0, 100, 0)


class TestTruncate:
    def test_keeps_peak_plus_offset(self):
        h = np.arange(1, 11, dtype=float) * 0.01
        h[3] = 5.0
        out = truncate_rir(h, 2)
        np.testing.assert_array_equal(out[:6], h[:6])
        assert np.all(out[6:] == 0)

    def test_zero_offset_keeps_through_peak(self):
        h = np.array([0.1, 0.2, -3.0, 0.4])
        np.testing.assert_array_equal(truncate_rir(h, 0), [0.1, 0.2, -3.0, 0.0])

    def test_offset_beyond_length(self):
        h = gen_toy_rir(0.3, 5, 64, 0)
        np.testing.assert_array_equal(truncate_rir(h, 1000), h)

    def test_empty(self):
        with pytest.raises(ValueError):
            truncate_rir(np.zeros(0), 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 100), st.integers(0, 2**31 - 1))
    def test_prefix_property(self, delay, offset, seed):
        h = gen_toy_rir(0.25, delay, 256, seed)
        out = truncate_rir(h, offset)
        end = min(256, delay + offset + 1)
        assert np.array_equal(out[:end], h[:end]) and not np.any(out[end:])


class TestMixture:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.srcs = np.stack([speech_like(4000, rng) for _ in range(2)])

    def test_delta_room_noiseless_is_shifted_sum(self):
        room = make_room(2, 1, np.random.default_rng(1))
        smp = synthesize_mixture(self.srcs, room, math.inf, 2)
        d = room.direct_delay[:, 0]
        ref = sum(np.concatenate([np.zeros(d[k]), self.srcs[k]])[:4000] for k in range(2))
        np.testing.assert_allclose(smp.mixture.samples[0], ref, atol=1e-10)
        np.testing.assert_allclose(smp.targets.sum(0), ref, atol=1e-10)

    def test_targets_sum_to_mixture_without_tail_or_noise(self):
        room = make_room(2, 2, np.random.default_rng(2))
        smp = synthesize_mixture(self.srcs, room, math.inf, 2, n_offset=256)
        np.testing.assert_allclose(smp.targets.sum(0), smp.mixture.samples[0], atol=1e-10)

    @pytest.mark.parametrize("snr", [-5.0, 0.0, 10.0, 25.0])
    @pytest.mark.parametrize("kind", ["white", "lowpass"])
    def test_snr_accuracy(self, snr, kind):
        room = make_room(2, 2, np.random.default_rng(3), rt60=0.3)
        smp = synthesize_mixture(self.srcs, room, snr, 2, seed=4, noise_kind=kind)
        assert measured_snr_db(smp, room) == pytest.approx(snr, abs=0.1)

    def test_tdoa_spread(self):
        room = make_room(3, 4, np.random.default_rng(5))
        tdoa = room.direct_delay[:, 1] - room.direct_delay[:, 0]
        gaps = np.abs(tdoa[:, None] - tdoa[None, :])[~np.eye(3, dtype=bool)]
        assert np.all(gaps >= 3) and np.all(np.abs(tdoa) <= 6)
        np.testing.assert_array_equal(room.direct_delay[:, 3] - room.direct_delay[:, 0], 3 * tdoa)

    def test_speech_like_unit_rms(self):
        x = speech_like(8000, np.random.default_rng(6))
        assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)

    def test_too_many_speakers(self):
        room = make_room(2, 1, np.random.default_rng(1))
        with pytest.raises(ValueError):
            synthesize_mixture(self.srcs, room, math.inf, 3)


class TestDataset:
    def test_deterministic(self):
        spec = DatasetSpec(count=2, rt60_range=(0.2, 0.4), snr_range=(5, 15), M=2, duration=0.5)
        a, _ = generate_sample(spec, 1)
        b, _ = generate_sample(spec, 1)
        c, _ = generate_sample(spec, 0)
        assert np.array_equal(a.mixture.samples, b.mixture.samples)
        assert not np.array_equal(a.mixture.samples, c.mixture.samples)

    def test_speaker_counts_cover_range(self):
        spec = DatasetSpec(K_range=(1, 3), duration=0.1)
        ks = {generate_sample(spec, i)[0].K_true for i in range(40)}
        assert ks == {1, 2, 3}

    def test_empty_dataset(self, tmp_path):
        path = make_dataset(DatasetSpec(count=0), tmp_path)
        assert load_manifest(path)["samples"] == []

    def test_manifest_and_wavs(self, tmp_path):
        spec = DatasetSpec(count=3, K_range=(1, 2), duration=0.25, snr_range=(10, 10))
        path = make_dataset(spec, tmp_path)
        man = load_manifest(path)
        raw = json.loads(path.read_text())
        assert raw["version"] == 1 and len(man["samples"]) == 3
        for i, rec in enumerate(man["samples"]):
            smp, _ = generate_sample(spec, i)
            mix = read_wav(tmp_path / rec["mixture_path"])
            np.testing.assert_allclose(mix.samples, smp.mixture.samples, atol=1e-6)
            assert len(rec["target_paths"]) == rec["K_true"] == smp.K_true
            assert rec["snr_db"] == pytest.approx(10.0)

    def test_bad_version(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"version": 99, "samples": []}))
        with pytest.raises(ValueError):
            load_manifest(tmp_path / "manifest.json")

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            DatasetSpec(K_range=(0, 2))
        with pytest.raises(ValueError):
            DatasetSpec(count=-1)


def test_meeting_shapes_and_turns():
    mix, refs, act = make_meeting(10.0, 2, seed=3)
    assert mix.samples.shape == (1, 80000) and refs.shape == act.shape == (2, 80000)
    assert act[0].any() and act[1].any()
    np.testing.assert_allclose(refs.sum(0), mix.samples[0], atol=1e-9)
