"""Scene synthesis: renderers, statistics, determinism, manifest, augmentation."""

import json

import numpy as np
import pytest

from sedgen.dsp import read_wav
from sedgen.errors import ConfigError
from sedgen.scenes import (
    ClassSpec,
    SceneSpec,
    default_scene_classes,
    generate_dataset,
    load_manifest,
    manifest_events,
    pink_noise,
    render_event,
    shift_augment,
    synthesize_clip,
)
from sedgen.vocab import Event

RATE = 16000


def spectrum_hz(x, rate):
    mag = np.abs(np.fft.rfft(x))
    return np.fft.rfftfreq(x.size, 1.0 / rate), mag


class TestRenderers:
    def test_sine_peak_at_base(self):
        rng = np.random.default_rng(0)
        x = render_event(ClassSpec("a", "sine", 440.0), 1.0, RATE, rng)
        freqs, mag = spectrum_hz(x, RATE)
        assert abs(freqs[np.argmax(mag)] - 440.0) < 3.0

    def test_chirp_sweeps_one_octave(self):
        rng = np.random.default_rng(0)
        x = render_event(ClassSpec("a", "chirp", 900.0), 2.0, RATE, rng)
        freqs, mag = spectrum_hz(x, RATE)
        power = mag**2
        band = (freqs >= 900.0 * 0.95) & (freqs <= 1800.0 * 1.05)
        assert power[band].sum() / power.sum() > 0.95
        # energy is spread, not a single line: no bin dominates
        assert power.max() / power.sum() < 0.30

    def test_am_has_sidebands(self):
        rng = np.random.default_rng(0)
        x = render_event(ClassSpec("a", "am", 220.0), 2.0, RATE, rng)
        freqs, mag = spectrum_hz(x, RATE)
        carrier = mag[np.argmin(np.abs(freqs - 220.0))]
        side = mag[np.argmin(np.abs(freqs - 228.0))]
        assert side > 0.1 * carrier

    def test_noise_band_limited(self):
        rng = np.random.default_rng(0)
        x = render_event(ClassSpec("a", "noise", 4000.0), 1.0, RATE, rng)
        freqs, mag = spectrum_hz(x, RATE)
        power = mag**2
        band = (freqs >= 4000 / np.sqrt(2) * 0.98) & (freqs <= 4000 * np.sqrt(2) * 1.02)
        assert power[band].sum() / power.sum() > 0.98

    def test_harmonic_stack_has_multiples(self):
        rng = np.random.default_rng(0)
        x = render_event(ClassSpec("a", "harmonic", 300.0), 1.0, RATE, rng)
        freqs, mag = spectrum_hz(x, RATE)
        for k in (1, 2, 3):
            idx = np.argmin(np.abs(freqs - 300.0 * k))
            assert mag[idx] > 0.05 * mag.max()

    def test_unit_peak_and_fades(self):
        rng = np.random.default_rng(1)
        x = render_event(ClassSpec("a", "sine", 440.0), 1.0, RATE, rng)
        assert np.max(np.abs(x)) <= 1.0 + 1e-12
        n_fade = int(0.010 * RATE)
        assert np.all(np.abs(x[:3]) < 0.01)  # fade-in starts near zero
        assert np.all(np.abs(x[-3:]) < 0.01)
        assert np.max(np.abs(x[n_fade : x.size - n_fade])) > 0.9

    def test_unknown_renderer_rejected(self):
        with pytest.raises(ConfigError):
            ClassSpec("a", "square", 440.0)


class TestPinkNoise:
    def test_unit_rms_and_low_frequency_tilt(self):
        x = pink_noise(RATE * 4, np.random.default_rng(0))
        assert abs(np.sqrt(np.mean(x * x)) - 1.0) < 1e-9
        freqs, mag = spectrum_hz(x, RATE)
        power = mag**2
        low = power[(freqs > 20) & (freqs < 200)].mean()
        high = power[(freqs > 2000) & (freqs < 8000)].mean()
        assert low > 5 * high


class TestSynthesizeClip:
    def test_deterministic_given_rng_key(self):
        spec = SceneSpec()
        a, ev_a, _ = synthesize_clip(spec, np.random.default_rng([7, 0, 3]))
        b, ev_b, _ = synthesize_clip(spec, np.random.default_rng([7, 0, 3]))
        assert np.array_equal(a.samples, b.samples)
        assert ev_a == ev_b

    def test_peak_normalized(self):
        clip, _, _ = synthesize_clip(SceneSpec(), np.random.default_rng(0))
        assert abs(np.max(np.abs(clip.samples)) - 0.9) < 1e-9

    def test_clean_track_supported_only_inside_events(self):
        spec = SceneSpec()
        clip, events, clean = synthesize_clip(spec, np.random.default_rng(5))
        mask = np.zeros(clip.samples.size, dtype=bool)
        for ev in events:
            a = int(round(ev.onset * RATE))
            b = int(round(ev.offset * RATE))
            mask[a:b] = True
        assert np.max(np.abs(clean[~mask]), initial=0.0) == 0.0
        assert np.max(np.abs(clean[mask])) > 0.0

    def test_event_count_statistics(self):
        spec = SceneSpec()
        counts = [
            len(synthesize_clip(spec, np.random.default_rng([0, 0, i]))[1]) for i in range(1000)
        ]
        assert set(counts) <= {1, 2, 3, 4}
        assert abs(np.mean(counts) - 2.5) < 0.15

    def test_events_inside_clip_and_long_enough(self):
        spec = SceneSpec()
        for i in range(50):
            _, events, _ = synthesize_clip(spec, np.random.default_rng([1, 0, i]))
            for ev in events:
                assert 0.0 <= ev.onset < ev.offset <= spec.clip_seconds + 1e-9
                assert 0.5 - 1e-6 <= ev.duration <= 3.0 + 1e-3

    def test_events_audible_above_floor(self):
        spec = SceneSpec(events_per_clip=(1, 1), snr_db=(20.0, 20.0))
        clip, events, _ = synthesize_clip(spec, np.random.default_rng(2))
        ev = events[0]
        a, b = int(ev.onset * RATE), int(ev.offset * RATE)
        inside = np.mean(clip.samples[a:b] ** 2)
        outside = np.concatenate([clip.samples[:a], clip.samples[b:]])
        assert inside > 10 * np.mean(outside**2)


class TestSceneSpecValidation:
    def test_bad_event_count_range(self):
        with pytest.raises(ConfigError):
            SceneSpec(events_per_clip=(4, 1))

    def test_event_longer_than_clip(self):
        with pytest.raises(ConfigError):
            SceneSpec(event_seconds=(0.5, 20.0))

    def test_base_above_nyquist(self):
        with pytest.raises(ConfigError):
            SceneSpec(classes=[ClassSpec("a", "sine", 9000.0)])

    def test_duplicate_class_names(self):
        with pytest.raises(ConfigError):
            SceneSpec(classes=[ClassSpec("a", "sine", 440.0), ClassSpec("a", "am", 220.0)])


class TestDataset:
    def test_manifest_round_trip_and_disjoint_ids(self, tmp_path):
        spec = SceneSpec(seed=11)
        path = generate_dataset(spec, tmp_path, {"train": 3, "val": 2, "test": 2}, config_hash="abc")
        manifest = load_manifest(path)
        assert manifest["classes"] == spec.class_names
        assert manifest["config_hash"] == "abc"
        ids = [c["id"] for c in manifest["clips"]]
        assert len(ids) == len(set(ids)) == 7
        splits = {c["split"] for c in manifest["clips"]}
        assert splits == {"train", "val", "test"}
        for clip_entry in manifest["clips"]:
            clip = read_wav(tmp_path / clip_entry["wav_path"])
            assert clip.rate == spec.sample_rate
            assert clip.samples.size == int(spec.clip_seconds * spec.sample_rate)
            for ev in manifest_events(clip_entry):
                assert 0.0 <= ev.onset < ev.offset <= spec.clip_seconds + 1e-9

    def test_regeneration_is_identical(self, tmp_path):
        spec = SceneSpec(seed=3)
        p1 = generate_dataset(spec, tmp_path / "a", {"train": 2})
        p2 = generate_dataset(spec, tmp_path / "b", {"train": 2})
        m1, m2 = json.loads(p1.read_text()), json.loads(p2.read_text())
        assert m1["clips"] == m2["clips"]
        w1 = read_wav(tmp_path / "a" / m1["clips"][0]["wav_path"])
        w2 = read_wav(tmp_path / "b" / m2["clips"][0]["wav_path"])
        assert np.array_equal(w1.samples, w2.samples)

    def test_splits_use_distinct_streams(self, tmp_path):
        spec = SceneSpec(seed=3)
        path = generate_dataset(spec, tmp_path, {"train": 1, "val": 1})
        manifest = load_manifest(path)
        a, b = (read_wav(tmp_path / c["wav_path"]) for c in manifest["clips"])
        assert not np.array_equal(a.samples, b.samples)

    def test_unknown_split_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_dataset(SceneSpec(), tmp_path, {"dev": 1})


class TestShiftAugment:
    def test_audio_and_labels_move_together(self):
        spec = SceneSpec(events_per_clip=(1, 1), snr_db=(20.0, 20.0))
        clip, events, _ = synthesize_clip(spec, np.random.default_rng(4))
        out, shifted = shift_augment(
            clip.samples, events, spec.clip_seconds, RATE, 2.0, np.random.default_rng(9)
        )
        assert len(shifted) == 1
        ev = shifted[0]
        a, b = int(ev.onset * RATE), int(ev.offset * RATE)
        inside = np.mean(out[a:b] ** 2)
        outside = np.concatenate([out[:a], out[b:]])
        assert inside > 10 * np.mean(outside**2)

    def test_vacated_region_is_zero(self):
        x = np.ones(100)
        out, _ = shift_augment(x, [], 10.0, 10, 5.0, np.random.default_rng(1))
        k = int(np.sum(out == 0.0))
        assert k > 0  # some shift happened for this seed
        if out[0] == 0.0:
            assert np.all(out[:k] == 0.0) and np.all(out[k:] == 1.0)
        else:
            assert np.all(out[-k:] == 0.0) and np.all(out[:-k] == 1.0)

    def test_short_survivors_dropped(self):
        x = np.zeros(RATE * 10)
        events = [Event("a", 0.0, 1.0)]
        # force a large negative shift by choosing a seed that produces one
        rng = np.random.default_rng(0)
        for _ in range(200):
            out, shifted = shift_augment(x, events, 10.0, RATE, 3.0, rng)
            for ev in shifted:
                assert ev.duration >= 0.25 - 1e-9
                assert 0.0 <= ev.onset < ev.offset <= 10.0

    def test_zero_max_shift_is_identity(self):
        x = np.arange(10.0)
        events = [Event("a", 0.1, 0.5)]
        out, shifted = shift_augment(x, events, 1.0, 10, 0.0, np.random.default_rng(0))
        assert np.array_equal(out, x)
        assert shifted == events

    def test_negative_max_shift_rejected(self):
        with pytest.raises(ConfigError):
            shift_augment(np.zeros(4), [], 1.0, 4, -1.0, np.random.default_rng(0))


def test_default_scene_classes_cover_four_renderers():
    specs = default_scene_classes()
    assert [c.name for c in specs] == ["Beep", "Chirp", "Buzz", "Hiss"]
    assert len({c.renderer for c in specs}) == 4
