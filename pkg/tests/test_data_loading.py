import json
import struct
import zlib

import numpy as np
import pandas as pd
import pytest

from src.data_loading import (
    EpochLabel,
    Recording,
    canonicalize_channels,
    decode_recording,
    encode_recording,
    import_text_recording,
    list_recordings,
    load_recordings,
    read_label_csv,
    read_recording,
    write_label_csv,
    write_manifest,
    write_recording,
)
from src.errors import ChecksumMismatch, DimensionMismatch, FormatViolation, InvalidConfig, IoFailure
from src.synthetic import SynthConfig, generate_synthetic


def _random_recording(rng, subject="S001"):
    c = int(rng.integers(1, 6))
    sampling_hz = int(rng.integers(1, 5))
    epoch_seconds = int(rng.integers(1, 4))
    n_epochs = int(rng.integers(1, 5))
    samples = rng.standard_normal((c, n_epochs * sampling_hz * epoch_seconds))
    kind = rng.integers(0, 4)
    labels = None
    if kind == 1:
        labels = [EpochLabel(stage=str(rng.choice(["W", "N1", "N2", "N3", "R"]))) for _ in range(n_epochs)]
    elif kind == 2:
        labels = [EpochLabel(osa=int(rng.integers(0, 2))) for _ in range(n_epochs)]
    elif kind == 3:
        labels = [EpochLabel(stage="N2", osa=int(rng.integers(0, 2))) if i % 2 else EpochLabel(osa=1)
                  for i in range(n_epochs)]
    return Recording(subject_id=subject, channel_names=tuple(f"CH{i}" for i in range(c)),
                     sampling_hz=sampling_hz, samples=samples, labels=labels,
                     epoch_seconds=epoch_seconds, label_mode="osa2" if kind == 2 else None)


def _small_synthetic(**changes):
    cfg = SynthConfig(epoch_count=3, sampling_hz=20, base_frequencies=(2.0, 2.5, 1.0, 3.0, 0.3), **changes)
    return generate_synthetic(cfg, "S007")


def test_recording_round_trip_is_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(500):
        rec = _random_recording(rng)
        data = encode_recording(rec)
        decoded = decode_recording(data)
        assert decoded == rec
        assert encode_recording(decoded) == data


def test_zero_epoch_recording_keeps_empty_labels_distinct_from_none():
    for labels in ((), None):
        rec = Recording(subject_id="S", channel_names=("A", "B"), sampling_hz=2, samples=np.zeros((2, 0)),
                        labels=labels, epoch_seconds=1)
        decoded = decode_recording(encode_recording(rec))
        assert decoded == rec
        assert decoded.labels == labels
        assert decoded.n_epochs == 0


def test_write_and_read_recording(tmp_path):
    rec = _small_synthetic()
    path = write_recording(rec, tmp_path / "S007.psgr")
    assert read_recording(path) == rec


def test_read_missing_recording(tmp_path):
    with pytest.raises(IoFailure):
        read_recording(tmp_path / "missing.psgr")


def test_truncated_payload_reports_offset():
    data = encode_recording(_small_synthetic())
    with pytest.raises(FormatViolation) as excinfo:
        decode_recording(data[:-9])
    assert excinfo.value.offset is not None


def test_header_with_inconsistent_channel_count():
    data = encode_recording(_small_synthetic())
    (header_length,) = struct.unpack_from("<I", data, 6)
    header = json.loads(data[10:10 + header_length])
    header["channel_names"] = header["channel_names"] + ["EXTRA"]
    new_header = json.dumps(header).encode("utf-8")
    body = data[:6] + struct.pack("<I", len(new_header)) + new_header + data[10 + header_length:-4]
    forged = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(FormatViolation):
        decode_recording(forged)


def test_bad_magic_and_checksum():
    data = bytearray(encode_recording(_small_synthetic()))
    with pytest.raises(FormatViolation):
        decode_recording(b"XXXX" + bytes(data[4:]))
    data[-10] ^= 0xFF
    with pytest.raises((ChecksumMismatch, FormatViolation)):
        decode_recording(bytes(data))


def test_corrupted_bytes_never_decode_silently():
    rng = np.random.default_rng(1)
    original = encode_recording(_random_recording(rng))
    for _ in range(1000):
        data = bytearray(original)
        position = int(rng.integers(0, len(data)))
        data[position] ^= int(rng.integers(1, 256))
        with pytest.raises((FormatViolation, ChecksumMismatch)):
            decode_recording(bytes(data))


def test_recording_validation():
    with pytest.raises(DimensionMismatch):
        Recording(subject_id="S", channel_names=("A",), sampling_hz=2, samples=np.zeros((1, 3)))
    with pytest.raises(DimensionMismatch):
        Recording(subject_id="S", channel_names=("A", "B"), sampling_hz=2, samples=np.zeros((1, 2)),
                  epoch_seconds=1)
    with pytest.raises(InvalidConfig):
        Recording(subject_id="", channel_names=("A",), sampling_hz=2, samples=np.zeros((1, 2)), epoch_seconds=1)
    with pytest.raises(DimensionMismatch):
        Recording(subject_id="S", channel_names=("A",), sampling_hz=2, samples=np.zeros((1, 2)),
                  labels=[EpochLabel(osa=1), EpochLabel(osa=0)], epoch_seconds=1)


def test_recording_epochs_view():
    samples = np.arange(12, dtype=np.float32).reshape(2, 6)
    rec = Recording(subject_id="S", channel_names=("A", "B"), sampling_hz=3, samples=samples, epoch_seconds=1)
    assert rec.n_epochs == 2
    np.testing.assert_array_equal(rec.epochs()[1], [[3, 4, 5], [9, 10, 11]])


def test_label_csv_round_trip(tmp_path):
    labels = [EpochLabel(stage="W", osa=0), EpochLabel(stage=None, osa=1), EpochLabel(stage="R")]
    path = write_label_csv(labels, tmp_path / "labels.csv")
    assert read_label_csv(path) == labels


def test_label_csv_rejects_bad_values(tmp_path):
    path = tmp_path / "labels.csv"
    pd.DataFrame({"epoch_index": [0, 1], "stage": ["W", "N4"], "osa": ["0", "1"]}).to_csv(path, index=False)
    with pytest.raises(FormatViolation):
        read_label_csv(path)
    pd.DataFrame({"epoch_index": [0, 2], "stage": ["W", "N1"], "osa": ["0", "1"]}).to_csv(path, index=False)
    with pytest.raises(FormatViolation):
        read_label_csv(path)


def test_manifest_orders_recordings(tmp_path):
    recs = [_small_synthetic(seed=s) for s in (1, 2)]
    files = [write_recording(rec, tmp_path / name) for rec, name in zip(recs, ["b.psgr", "a.psgr"])]
    write_manifest(tmp_path, recs, files)
    assert [p.name for p in list_recordings(tmp_path)] == ["b.psgr", "a.psgr"]
    assert load_recordings(tmp_path) == recs


def test_list_recordings_without_manifest_is_sorted(tmp_path):
    for name in ("c.psgr", "a.psgr"):
        write_recording(_small_synthetic(), tmp_path / name)
    assert [p.name for p in list_recordings(tmp_path)] == ["a.psgr", "c.psgr"]


def test_missing_data_directory(tmp_path):
    with pytest.raises(IoFailure):
        load_recordings(tmp_path / "nowhere")


def test_canonicalize_channels():
    names, order = canonicalize_channels(["Airflow", "EMG", "EOG (L)", "EEG2 (C3-A2)", "EEG (C4-A1)"])
    assert names == ["EEG_C4", "EEG_C3", "EOG_L", "EMG_CHIN", "AIRFLOW"]
    assert order == [4, 3, 2, 1, 0]
    with pytest.raises(InvalidConfig):
        canonicalize_channels(["EEG (C4-A1)", "ECG"])


def test_import_text_recording(tmp_path):
    names = ["Airflow", "EMG", "EOG (L)", "EEG2 (C3-A2)", "EEG (C4-A1)"]
    rng = np.random.default_rng(2)
    streams = rng.standard_normal((5, 2 * 4 + 3))
    for index, name in enumerate(names):
        pd.Series(streams[index]).to_csv(tmp_path / f"ch{index}.csv", index=False, header=False)
    write_label_csv([EpochLabel(osa=0), EpochLabel(osa=1)], tmp_path / "labels.csv")
    sidecar = tmp_path / "night.json"
    sidecar.write_text(json.dumps({
        "subject_id": "P01", "channel_names": names, "sampling_hz": 2, "epoch_seconds": 2,
        "channel_files": [f"ch{i}.csv" for i in range(5)], "labels": "labels.csv", "label_mode": "osa2",
    }))

    rec = import_text_recording(sidecar, canonical=True)
    assert rec.subject_id == "P01"
    assert rec.channel_names[0] == "EEG_C4"
    assert rec.n_epochs == 2
    np.testing.assert_allclose(rec.samples[0], streams[4, :8].astype(np.float32))
    assert [label.osa for label in rec.labels] == [0, 1]


def test_import_text_recording_missing_channel(tmp_path):
    sidecar = tmp_path / "night.json"
    sidecar.write_text(json.dumps({"channel_names": ["A"], "sampling_hz": 2}))
    with pytest.raises(IoFailure):
        import_text_recording(sidecar)
