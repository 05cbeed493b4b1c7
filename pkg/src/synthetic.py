"""
Synthetic multichannel sleep recordings.

Each channel is a band-limited oscillation with a slowly varying amplitude
envelope plus white noise. Event epochs carry one transient burst shared by
at least three channels (same frequency, phase and window), which makes the
event channels correlated by construction. In ``staging5`` mode every epoch
also belongs to one of five latent classes, each with its own per-channel
frequency and amplitude profile.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import signal

from src.data_loading import CANONICAL_CHANNELS, SLEEP_STAGES, EpochLabel, Recording
from src.errors import InvalidConfig
from src.utils.config_base import ConfigSection
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

# EEG alpha/beta-like, EOG slow, EMG fast, airflow breathing-rate.
DEFAULT_FREQUENCIES = (9.0, 11.0, 1.5, 25.0, 0.3)
DEFAULT_NOISE = (0.15, 0.15, 0.15, 0.3, 0.05)

# Per-class multipliers applied to (frequency, amplitude) of every channel.
STAGE_FREQUENCY_FACTORS = (1.0, 0.8, 0.6, 0.4, 1.25)
STAGE_AMPLITUDE_PROFILES = (
    (1.0, 1.0, 1.5, 1.6, 1.0),
    (0.8, 1.2, 0.8, 1.0, 1.2),
    (1.3, 0.7, 0.5, 0.7, 0.9),
    (1.8, 1.5, 0.3, 0.4, 0.7),
    (0.6, 0.6, 1.8, 0.2, 1.1),
)

BURST_FREQUENCY = 4.0
BURST_WIDTH_SECONDS = 3.0
LABEL_MODES = ("staging5", "osa2")


@dataclass
class SynthConfig(ConfigSection):
    """Generator settings; ``seed`` fully determines the output."""
    channel_count: int = 5
    epoch_count: int = 200
    sampling_hz: int = 100
    epoch_seconds: int = 30
    event_rate: float = 0.1
    seed: int = 0
    label_mode: str = "osa2"
    base_frequencies: Tuple[float, ...] = ()
    noise_levels: Tuple[float, ...] = ()
    burst_amplitude: float = 3.0
    envelope_cutoff_hz: float = 0.1

    def validate(self) -> None:
        if self.channel_count < 1:
            raise InvalidConfig("channel_count must be positive")
        if self.epoch_count < 1:
            raise InvalidConfig("epoch_count must be positive")
        if self.sampling_hz <= 0 or self.epoch_seconds <= 0:
            raise InvalidConfig("sampling_hz and epoch_seconds must be positive")
        if not 0.0 <= self.event_rate <= 1.0:
            raise InvalidConfig(f"event_rate must lie in [0, 1], got {self.event_rate}")
        if self.event_rate > 0 and self.channel_count < 3:
            raise InvalidConfig("events need at least 3 channels")
        if self.label_mode not in LABEL_MODES:
            raise InvalidConfig(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        for name in ("base_frequencies", "noise_levels"):
            values = getattr(self, name)
            if values and len(values) != self.channel_count:
                raise InvalidConfig(f"{name} needs {self.channel_count} entries, got {len(values)}")
        nyquist = self.sampling_hz / 2.0
        top = max(self.frequencies()) * max(STAGE_FREQUENCY_FACTORS)
        if top >= nyquist or BURST_FREQUENCY >= nyquist:
            raise InvalidConfig(f"frequencies must stay below Nyquist ({nyquist} Hz)")
        if any(level < 0 for level in self.noises()):
            raise InvalidConfig("noise levels must be non-negative")
        if not 0 < self.envelope_cutoff_hz < nyquist:
            raise InvalidConfig("envelope_cutoff_hz must lie in (0, Nyquist)")

    def frequencies(self) -> Tuple[float, ...]:
        if self.base_frequencies:
            return tuple(float(f) for f in self.base_frequencies)
        return tuple(DEFAULT_FREQUENCIES[i % 5] * (1 + 0.1 * (i // 5)) for i in range(self.channel_count))

    def noises(self) -> Tuple[float, ...]:
        if self.noise_levels:
            return tuple(float(n) for n in self.noise_levels)
        return tuple(DEFAULT_NOISE[i % 5] for i in range(self.channel_count))

    def channel_names(self) -> Tuple[str, ...]:
        if self.channel_count == len(CANONICAL_CHANNELS):
            return CANONICAL_CHANNELS
        return tuple(f"CH{i}" for i in range(self.channel_count))

    @property
    def epoch_length(self) -> int:
        return self.sampling_hz * self.epoch_seconds


def _envelopes(cfg: SynthConfig, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Slowly varying positive amplitude envelopes, one per channel."""
    sos = signal.butter(2, cfg.envelope_cutoff_hz, btype="low", fs=cfg.sampling_hz, output="sos")
    raw = signal.sosfiltfilt(sos, rng.standard_normal((cfg.channel_count, n_samples)), axis=1)
    raw = raw / np.maximum(raw.std(axis=1, keepdims=True), 1e-12)
    return 1.0 + 0.25 * np.tanh(raw)


def _burst(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One Gaussian-windowed tone burst of epoch length."""
    t = np.arange(cfg.epoch_length) / cfg.sampling_hz
    center = rng.uniform(0.2, 0.8) * cfg.epoch_seconds
    width = BURST_WIDTH_SECONDS / 2.0
    window = np.exp(-0.5 * ((t - center) / width) ** 2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return cfg.burst_amplitude * window * np.sin(2.0 * np.pi * BURST_FREQUENCY * t + phase)


def generate_synthetic(cfg: SynthConfig, subject_id: str = "S000") -> Recording:
    """
    Generate one labelled recording.

    The random stream is derived from ``(cfg.seed, subject_id)``, so the same
    configuration and subject always yield the same Recording.
    """
    rng = make_rng(cfg.seed, f"synth/{subject_id}")
    length = cfg.epoch_length
    n_samples = cfg.epoch_count * length
    t = np.arange(length) / cfg.sampling_hz
    frequencies = np.array(cfg.frequencies())
    noises = np.array(cfg.noises())

    envelopes = _envelopes(cfg, rng, n_samples)
    events = rng.random(cfg.epoch_count) < cfg.event_rate
    if cfg.label_mode == "staging5":
        stages = rng.integers(0, len(SLEEP_STAGES), size=cfg.epoch_count)
    else:
        stages = None

    samples = np.empty((cfg.channel_count, n_samples), dtype=np.float64)
    for e in range(cfg.epoch_count):
        freq = frequencies.copy()
        amp = np.ones(cfg.channel_count)
        if stages is not None:
            freq = freq * STAGE_FREQUENCY_FACTORS[stages[e]]
            profile = STAGE_AMPLITUDE_PROFILES[stages[e]]
            amp = np.array([profile[c % len(profile)] for c in range(cfg.channel_count)])
        phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.channel_count)
        tones = np.sin(2.0 * np.pi * freq[:, None] * t[None, :] + phases[:, None])
        block = amp[:, None] * tones * envelopes[:, e * length:(e + 1) * length]
        block += noises[:, None] * rng.standard_normal((cfg.channel_count, length))
        if events[e]:
            n_burst = int(rng.integers(3, cfg.channel_count + 1))
            channels = rng.choice(cfg.channel_count, size=n_burst, replace=False)
            block[channels] += _burst(cfg, rng)[None, :]
        samples[:, e * length:(e + 1) * length] = block

    labels = tuple(
        EpochLabel(
            stage=SLEEP_STAGES[stages[e]] if stages is not None else None,
            osa=int(events[e]),
        )
        for e in range(cfg.epoch_count)
    )
    logger.debug("Generated %s: %d epochs, %d events", subject_id, cfg.epoch_count, int(events.sum()))
    return Recording(
        subject_id=subject_id,
        channel_names=cfg.channel_names(),
        sampling_hz=cfg.sampling_hz,
        samples=samples.astype(np.float32),
        labels=labels,
        epoch_seconds=cfg.epoch_seconds,
        label_mode=cfg.label_mode,
    )


def subject_ids(count: int) -> List[str]:
    return [f"S{i:03d}" for i in range(count)]


def generate_cohort(cfg: SynthConfig, subjects: int, ids: Optional[List[str]] = None) -> List[Recording]:
    """Generate one recording per subject, each from its own derived stream."""
    if subjects < 1:
        raise InvalidConfig("subjects must be positive")
    ids = ids or subject_ids(subjects)
    recordings = [generate_synthetic(cfg, sid) for sid in ids]
    logger.info("Generated %d synthetic recordings (%s mode)", len(recordings), cfg.label_mode)
    return recordings
