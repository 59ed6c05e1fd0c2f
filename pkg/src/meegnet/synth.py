"""Synthetic absence-epilepsy EEG: pink background plus 3 Hz spike-and-wave bursts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import CANONICAL_ELECTRODES, Annotation, Recording
from .errors import ConfigError

# posterior electrodes carry the strongest alpha rhythm
_ALPHA_GAIN = {"O1": 1.0, "O2": 1.0, "P3": 0.8, "P4": 0.8, "T5": 0.7, "T6": 0.7}


@dataclass
class SynthConfig:
    n_cases: int = 20
    duration_sec: float = 600.0
    target_abnormal_ratio: float = 0.027
    burst_freq_hz: float = 3.0
    burst_duration_range_sec: tuple[float, float] = (2.0, 10.0)
    electrodes_per_event: tuple[int, int] = (12, 16)
    spike_amplitude_ratio: float = 3.0
    noise_spectrum_exponent: float = 1.0
    seed: int = 0
    sampling_rate_hz: int = 500
    background_rms_uv: float = 20.0
    # background components below this frequency are removed (slow drift)
    highpass_hz: float = 0.5
    alpha_freq_hz: float = 10.0
    # alpha RMS relative to the pink-noise RMS before normalisation
    alpha_amplitude_ratio: float = 1.0
    # fraction of background variance shared by all electrodes
    spatial_correlation: float = 0.3
    # log-normal spread of per-case abnormal ratios around the target
    case_ratio_spread: float = 0.5
    # cases with no events at all (taken from the end of the case list)
    n_normal_cases: int = 0
    min_event_gap_sec: float = 2.0

    def __post_init__(self):
        self.burst_duration_range_sec = tuple(float(v) for v in self.burst_duration_range_sec)
        self.electrodes_per_event = tuple(int(v) for v in self.electrodes_per_event)
        self.validate()

    def validate(self):
        if self.n_cases < 1:
            raise ConfigError(f"n_cases must be >= 1, got {self.n_cases}")
        if self.duration_sec < 1:
            raise ConfigError(f"duration_sec must be >= 1, got {self.duration_sec}")
        if not 0.0 <= self.target_abnormal_ratio < 1.0:
            raise ConfigError(f"target_abnormal_ratio must be in [0, 1), got {self.target_abnormal_ratio}")
        if not 0.0 < self.burst_freq_hz < self.sampling_rate_hz / 2:
            raise ConfigError(
                f"burst_freq_hz must be in (0, Nyquist={self.sampling_rate_hz / 2}), got {self.burst_freq_hz}")
        lo, hi = self.burst_duration_range_sec
        if not 0.0 < lo <= hi:
            raise ConfigError(f"bad burst duration range {self.burst_duration_range_sec}")
        a, b = self.electrodes_per_event
        if not 1 <= a <= b <= len(CANONICAL_ELECTRODES):
            raise ConfigError(f"bad electrodes_per_event range {self.electrodes_per_event}")
        if self.spike_amplitude_ratio < 0:
            raise ConfigError("spike_amplitude_ratio must be >= 0")
        if not 0.0 <= self.spatial_correlation <= 1.0:
            raise ConfigError("spatial_correlation must be in [0, 1]")
        if not 0 <= self.n_normal_cases <= self.n_cases:
            raise ConfigError("n_normal_cases must be between 0 and n_cases")

    def to_dict(self):
        d = asdict(self)
        d["burst_duration_range_sec"] = list(self.burst_duration_range_sec)
        d["electrodes_per_event"] = list(self.electrodes_per_event)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def colored_noise(rng, n_signals, n_samples, fs, exponent, highpass_hz=0.0):
    """Gaussian noise with power spectrum ~ 1/f^exponent, unit RMS per signal."""
    freqs = np.fft.rfftfreq(n_samples, 1.0 / fs)
    amp = np.zeros_like(freqs)
    keep = freqs > max(highpass_hz, 0.0)
    amp[keep] = freqs[keep] ** (-exponent / 2.0)
    spec = (rng.standard_normal((n_signals, len(freqs)))
            + 1j * rng.standard_normal((n_signals, len(freqs)))) * amp
    x = np.fft.irfft(spec, n=n_samples, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _alpha_rhythm(rng, n_samples, fs, freq):
    # slowly wandering frequency and amplitude envelope
    drift = colored_noise(rng, 2, n_samples, fs, 2.0, highpass_hz=0.0)
    inst_freq = freq + 0.4 * drift[0]
    phase = 2 * np.pi * np.cumsum(inst_freq) / fs + rng.uniform(0, 2 * np.pi)
    envelope = np.clip(1.0 + 0.5 * drift[1], 0.1, None)
    a = envelope * np.sin(phase)
    return a / a.std()


def _background(rng, cfg: SynthConfig, n_samples):
    c = len(CANONICAL_ELECTRODES)
    fs = cfg.sampling_rate_hz
    noise = colored_noise(rng, c + 1, n_samples, fs, cfg.noise_spectrum_exponent, cfg.highpass_hz)
    rho = cfg.spatial_correlation
    pink = np.sqrt(1.0 - rho) * noise[:c] + np.sqrt(rho) * noise[c]
    alpha = _alpha_rhythm(rng, n_samples, fs, cfg.alpha_freq_hz)
    gains = np.array([_ALPHA_GAIN.get(name, 0.5) for name in CANONICAL_ELECTRODES])
    bg = pink + cfg.alpha_amplitude_ratio * gains[:, None] * alpha[None, :]
    return bg / bg.std(axis=-1, keepdims=True) * cfg.background_rms_uv


def spike_wave_train(n_samples, fs, freq, rng):
    """Zero-mean periodic waveform: sharp spike followed by a slow wave each cycle."""
    t = np.arange(n_samples) / fs
    period = 1.0 / freq
    phase = (t + rng.uniform(0, period)) % period
    spike = -np.exp(-0.5 * ((phase - 0.15 * period) / 0.012) ** 2)
    wave = -0.8 * np.exp(-0.5 * ((phase - 0.55 * period) / 0.06) ** 2)
    x = spike + wave
    return x - x.mean()


def _event_durations(rng, budget, lo, hi):
    out = []
    remaining = budget
    while remaining >= lo:
        d = min(rng.uniform(lo, hi), remaining)
        out.append(d)
        remaining -= d
    if out and remaining > 0:
        # fold the leftover (< lo) into the last event where the range allows
        out[-1] = min(out[-1] + remaining, hi)
    return out


def _place(rng, durations, total, gap, case_id):
    """Random non-overlapping start times with at least ``gap`` seconds between events."""
    n = len(durations)
    if n == 0:
        return []
    slack = total - sum(durations) - gap * (n + 1)
    if slack < 0:
        raise ConfigError(
            f"{case_id}: {n} events totalling {sum(durations):.1f} s do not fit into "
            f"{total:.1f} s with {gap} s gaps")
    cuts = np.sort(rng.uniform(0, slack, n))
    order = rng.permutation(n)
    starts, t, prev = [], 0.0, 0.0
    for i, cut in zip(order, cuts):
        t += gap + (cut - prev)
        prev = cut
        starts.append((t, durations[i]))
        t += durations[i]
    return starts


def _case_ratios(rng, cfg: SynthConfig):
    n_abn = cfg.n_cases - cfg.n_normal_cases
    ratios = np.zeros(cfg.n_cases)
    if n_abn == 0 or cfg.target_abnormal_ratio == 0:
        return ratios
    w = np.exp(cfg.case_ratio_spread * rng.standard_normal(n_abn))
    # overall abnormal time matches the target across all cases
    ratios[:n_abn] = w / w.sum() * cfg.target_abnormal_ratio * cfg.n_cases
    return ratios


@dataclass(frozen=True)
class PlannedEvent:
    start_sample: int
    stop_sample: int
    electrodes: tuple[int, ...]
    gains: tuple[float, ...]
    freq_hz: float


def plan_events(cfg: SynthConfig, case_id: str, ratio: float, rng) -> list[PlannedEvent]:
    """Timing, electrode subset and gains of every event in one case."""
    fs = cfg.sampling_rate_hz
    n = int(round(cfg.duration_sec * fs))
    lo, hi = cfg.burst_duration_range_sec
    durations = _event_durations(rng, ratio * cfg.duration_sec, lo, hi)
    c = len(CANONICAL_ELECTRODES)
    a, b = cfg.electrodes_per_event
    out = []
    for start, dur in _place(rng, durations, cfg.duration_sec, cfg.min_event_gap_sec, case_id):
        i0 = int(round(start * fs))
        i1 = min(int(round((start + dur) * fs)), n)
        k = int(rng.integers(a, b + 1))
        electrodes = tuple(int(e) for e in np.sort(rng.choice(c, k, replace=False)))
        gains = tuple(float(g) for g in rng.uniform(0.7, 1.0, k))
        out.append(PlannedEvent(i0, i1, electrodes, gains,
                                float(cfg.burst_freq_hz * rng.uniform(0.95, 1.05))))
    return out


def _taper(length, fs):
    ramp = min(int(0.1 * fs), length // 4)
    taper = np.ones(length)
    if ramp > 0:
        edge = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        taper[:ramp] = edge
        taper[-ramp:] = edge[::-1]
    return taper


def _case_id(index):
    return f"S{index + 1:02d}"


def _case_seeds(cfg: SynthConfig):
    root = np.random.SeedSequence([int(cfg.seed), 0x5EED])
    ratio_seq, *per_case = root.spawn(cfg.n_cases + 1)
    ratios = _case_ratios(np.random.default_rng(ratio_seq), cfg)
    # per case: event plan, waveform/background, metadata
    return ratios, [seq.spawn(3) for seq in per_case]


def synth_case(cfg: SynthConfig, index: int, ratio: float, seeds):
    event_seq, signal_seq, meta_seq = seeds
    fs = cfg.sampling_rate_hz
    n = int(round(cfg.duration_sec * fs))
    case_id = _case_id(index)
    events = plan_events(cfg, case_id, ratio, np.random.default_rng(event_seq))
    rng = np.random.default_rng(signal_seq)
    x = _background(rng, cfg, n)
    amp = cfg.spike_amplitude_ratio * cfg.background_rms_uv
    c = len(CANONICAL_ELECTRODES)
    annotations = []
    for ev in events:
        length = ev.stop_sample - ev.start_sample
        train = spike_wave_train(length, fs, ev.freq_hz, rng)
        train = train / np.sqrt(np.mean(train ** 2)) * amp * _taper(length, fs)
        idx = np.asarray(ev.electrodes)
        x[idx, ev.start_sample:ev.stop_sample] += np.asarray(ev.gains)[:, None] * train[None, :]
        which = "all" if len(idx) == c else ev.electrodes
        annotations.append(Annotation(ev.start_sample / fs, ev.stop_sample / fs, which))
    meta = np.random.default_rng(meta_seq)
    rec = Recording(case_id=case_id, samples=x.astype(np.float32), sampling_rate_hz=fs,
                    sex=("M", "F")[int(meta.integers(2))],
                    age_years=float(np.round(meta.uniform(5.0, 20.0), 1)),
                    syndrome=("CAE", "JAE")[int(meta.integers(2))])
    return rec, annotations


def synth_generate(cfg: SynthConfig):
    """Deterministic list of ``(Recording, annotations)`` for ``cfg.seed``."""
    cfg.validate()
    ratios, seeds = _case_seeds(cfg)
    return [synth_case(cfg, i, ratios[i], seeds[i]) for i in range(cfg.n_cases)]


def synth_event_plan(cfg: SynthConfig) -> list[list[PlannedEvent]]:
    """The event schedule ``synth_generate`` would inject, without synthesising signals."""
    cfg.validate()
    ratios, seeds = _case_seeds(cfg)
    return [plan_events(cfg, _case_id(i), ratios[i], np.random.default_rng(seeds[i][0]))
            for i in range(cfg.n_cases)]


def planned_ratio(cfg: SynthConfig, plan=None) -> float:
    plan = synth_event_plan(cfg) if plan is None else plan
    samples = sum(ev.stop_sample - ev.start_sample for case in plan for ev in case)
    return samples / (cfg.n_cases * round(cfg.duration_sec * cfg.sampling_rate_hz))


def realized_ratio(cases) -> float:
    total = sum(rec.duration_sec for rec, _ in cases)
    abnormal = sum(a.duration for _, anns in cases for a in anns)
    return abnormal / total


def mean_power_spectra(cases, rule="majority"):
    """Average power spectra of annotated and non-annotated (window, electrode) cells.

    Returns ``(freqs, annotated, normal)``; the DC bin is removed per window.
    """
    from .data import window

    fs = cases[0][0].sampling_rate_hz
    acc = {1: 0.0, 0: 0.0}
    cnt = {1: 0, 0: 0}
    for rec, anns in cases:
        ds = window(rec, anns, rule)
        x = ds.X.astype(np.float64)
        x = x - x.mean(axis=-1, keepdims=True)
        p = np.abs(np.fft.rfft(x, axis=-1)) ** 2
        for label in (0, 1):
            mask = ds.Y == label
            acc[label] = acc[label] + p[mask].sum(axis=0)
            cnt[label] += int(mask.sum())
    freqs = np.fft.rfftfreq(fs, 1.0 / fs)
    spectra = {k: (acc[k] / cnt[k] if cnt[k] else np.zeros(len(freqs))) for k in acc}
    return freqs, spectra[1], spectra[0]
