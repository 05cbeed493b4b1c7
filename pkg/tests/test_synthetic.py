import numpy as np
import pytest

from src.data_loading import SLEEP_STAGES
from src.errors import InvalidConfig
from src.synthetic import SynthConfig, generate_cohort, generate_synthetic, subject_ids

LOW_RATE = dict(sampling_hz=20, epoch_seconds=30, base_frequencies=(2.0, 2.5, 1.0, 3.0, 0.3))


def _mean_abs_correlation(epoch):
    corr = np.corrcoef(epoch)
    upper = np.triu_indices_from(corr, k=1)
    return np.abs(corr[upper]).mean()


def test_default_recording_shape_and_labels():
    rec = generate_synthetic(SynthConfig(epoch_count=4, seed=1))
    assert rec.samples.shape == (5, 4 * 3000)
    assert rec.channel_names[:2] == ("EEG_C4", "EEG_C3")
    assert rec.label_mode == "osa2"
    assert all(label.stage is None and label.osa in (0, 1) for label in rec.labels)


def test_same_seed_gives_identical_recordings():
    cfg = SynthConfig(epoch_count=20, seed=5, **LOW_RATE)
    assert generate_synthetic(cfg, "S001") == generate_synthetic(cfg, "S001")
    assert generate_synthetic(cfg, "S001") != generate_synthetic(cfg, "S002")


def test_zero_event_rate_has_no_events():
    rec = generate_synthetic(SynthConfig(epoch_count=50, event_rate=0.0, **LOW_RATE))
    assert all(label.osa == 0 for label in rec.labels)


def test_event_fraction_follows_rate():
    rec = generate_synthetic(SynthConfig(epoch_count=1000, event_rate=0.5, seed=3, sampling_hz=10,
                                         epoch_seconds=1, base_frequencies=(1.0, 1.5, 0.5, 2.0, 0.3)))
    fraction = np.mean([label.osa for label in rec.labels])
    assert 0.45 <= fraction <= 0.55


def test_event_epochs_are_more_correlated():
    rec = generate_synthetic(SynthConfig(epoch_count=300, event_rate=0.3, seed=2, **LOW_RATE))
    epochs = rec.epochs().astype(np.float64)
    events = np.array([label.osa == 1 for label in rec.labels])
    assert events.sum() > 0 and (~events).sum() > 0
    event_corr = np.mean([_mean_abs_correlation(e) for e in epochs[events]])
    plain_corr = np.mean([_mean_abs_correlation(e) for e in epochs[~events]])
    assert event_corr - plain_corr > 0


def test_staging_mode_labels_every_epoch():
    rec = generate_synthetic(SynthConfig(epoch_count=100, label_mode="staging5", seed=4, **LOW_RATE))
    stages = {label.stage for label in rec.labels}
    assert stages <= set(SLEEP_STAGES)
    assert len(stages) == 5
    assert all(label.osa is not None for label in rec.labels)


def test_samples_are_finite_float32():
    rec = generate_synthetic(SynthConfig(epoch_count=10, **LOW_RATE))
    assert rec.samples.dtype == np.float32
    assert np.isfinite(rec.samples).all()


def test_cohort_uses_subject_ids():
    cohort = generate_cohort(SynthConfig(epoch_count=3, **LOW_RATE), subjects=3)
    assert [rec.subject_id for rec in cohort] == subject_ids(3) == ["S000", "S001", "S002"]


@pytest.mark.parametrize("changes", [
    {"event_rate": 1.5},
    {"event_rate": -0.1},
    {"label_mode": "staging4"},
    {"channel_count": 2, "event_rate": 0.1},
    {"sampling_hz": 10},
    {"base_frequencies": (1.0, 2.0)},
])
def test_invalid_configs(changes):
    with pytest.raises(InvalidConfig):
        SynthConfig(**changes)


def test_non_default_channel_count_names():
    cfg = SynthConfig(channel_count=3, epoch_count=2, **{**LOW_RATE, "base_frequencies": (2.0, 1.0, 0.5)})
    assert generate_synthetic(cfg).channel_names == ("CH0", "CH1", "CH2")
