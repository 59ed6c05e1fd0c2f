import numpy as np
import pytest

from meegnet.data import dataset_imbalance, recording_bytes, window_cases
from meegnet.errors import ConfigError
from meegnet.synth import (SynthConfig, colored_noise, mean_power_spectra, planned_ratio,
                           realized_ratio, spike_wave_train, synth_event_plan, synth_generate)


def test_planned_ratio_within_twenty_percent_over_seeds():
    # [DERIVED] Monte-Carlo over 10 synth seeds at 20 cases x 600 s
    for seed in range(10):
        r = planned_ratio(SynthConfig(seed=seed))
        assert abs(r - 0.027) / 0.027 < 0.2, (seed, r)


def test_realized_matches_plan_and_annotations_cover_events():
    cfg = SynthConfig(n_cases=3, duration_sec=120, seed=4)
    cases = synth_generate(cfg)
    plan = synth_event_plan(cfg)
    assert realized_ratio(cases) == pytest.approx(planned_ratio(cfg, plan), abs=1e-12)
    for (rec, anns), events in zip(cases, plan):
        assert len(anns) == len(events)
        for a, ev in zip(anns, events):
            assert a.onset_sec == ev.start_sample / 500 and a.offset_sec == ev.stop_sample / 500
            assert a.electrode_indices() == ev.electrodes
        assert rec.samples.shape == (16, 60000)


def test_zero_ratio_has_no_annotations():
    cases = synth_generate(SynthConfig(n_cases=2, duration_sec=30, target_abnormal_ratio=0.0))
    assert all(not anns for _, anns in cases)
    assert window_cases(cases).Y.sum() == 0


def test_same_seed_byte_identical():
    cfg = SynthConfig(n_cases=2, duration_sec=40, seed=11)
    a = [recording_bytes(r) for r, _ in synth_generate(cfg)]
    b = [recording_bytes(r) for r, _ in synth_generate(SynthConfig(n_cases=2, duration_sec=40, seed=11))]
    assert a == b
    c = [recording_bytes(r) for r, _ in synth_generate(SynthConfig(n_cases=2, duration_sec=40, seed=12))]
    assert a != c


def test_infeasible_ratio():
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(n_cases=1, duration_sec=20, target_abnormal_ratio=0.9,
                                   case_ratio_spread=0.0))


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(burst_freq_hz=300)
    with pytest.raises(ConfigError):
        SynthConfig(target_abnormal_ratio=1.0)
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"n_case": 3})
    assert SynthConfig.from_dict(SynthConfig(seed=3).to_dict()) == SynthConfig(seed=3)


def test_imbalance_follows_ratio():
    cases = synth_generate(SynthConfig(n_cases=4, duration_sec=300, seed=2))
    ds = window_cases(cases)
    r = realized_ratio(cases)
    assert dataset_imbalance(ds) == pytest.approx((1 - r) / r, rel=1e-9)


def test_colored_noise_slope():
    x = colored_noise(np.random.default_rng(0), 32, 2 ** 14, 500, 1.0)
    p = (np.abs(np.fft.rfft(x, axis=-1)) ** 2).mean(axis=0)
    f = np.fft.rfftfreq(2 ** 14, 1 / 500)
    band = (f > 2) & (f < 100)
    slope = np.polyfit(np.log(f[band]), np.log(p[band]), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)
    np.testing.assert_allclose(x.std(axis=-1), 1.0)


def test_spike_wave_train_is_periodic_and_zero_mean():
    x = spike_wave_train(1500, 500, 3.0, np.random.default_rng(1))
    assert abs(x.mean()) < 1e-12
    f = np.fft.rfftfreq(1500, 1 / 500)
    assert f[np.argmax(np.abs(np.fft.rfft(x)))] == pytest.approx(3.0)


def test_spectral_signature():
    cases = synth_generate(SynthConfig(n_cases=3, duration_sec=300, seed=5))
    freqs, annotated, normal = mean_power_spectra(cases)
    assert freqs[np.argmax(annotated)] == pytest.approx(3.0, abs=0.5)
    assert freqs[np.argmax(normal)] == pytest.approx(10.0, abs=1.5)
    band3 = (freqs >= 2) & (freqs <= 4)
    assert annotated[band3].sum() > 5 * normal[band3].sum()
