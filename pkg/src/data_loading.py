"""
Recording containers and their on-disk formats.

This module provides functions to load, validate and save multichannel
recordings:

- the ".psgr" binary recording format,
- per-epoch label CSV files,
- a text import (one CSV per channel plus a JSON sidecar) that converts
  exports of real PSG systems into recordings.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatViolation,
    InvalidConfig,
    IoFailure,
)

logger = logging.getLogger(__name__)

MAGIC = b"PSGR"
FORMAT_VERSION = 1
RECORDING_SUFFIX = ".psgr"
LABEL_ABSENT = 255

SLEEP_STAGES = ("W", "N1", "N2", "N3", "R")
LABEL_MODES = ("staging5", "osa2")
LABEL_COLUMNS = ["epoch_index", "stage", "osa"]

# Canonical channel roles and the names used for them by common PSG exports.
CANONICAL_CHANNELS = ("EEG_C4", "EEG_C3", "EOG_L", "EMG_CHIN", "AIRFLOW")
CHANNEL_ALIASES: Dict[str, str] = {
    "EEG (C4-A1)": "EEG_C4",
    "EEG C4-A1": "EEG_C4",
    "EEG C4-REF": "EEG_C4",
    "EEG2 (C3-A2)": "EEG_C3",
    "EEG C3-A2": "EEG_C3",
    "EEG C3-REF": "EEG_C3",
    "EOG (L)": "EOG_L",
    "EOG LOC-A2": "EOG_L",
    "EOG LOC": "EOG_L",
    "EMG": "EMG_CHIN",
    "EMG Chin": "EMG_CHIN",
    "AIRFLOW": "AIRFLOW",
    "Airflow": "AIRFLOW",
    "Flow Patient (Pressure cannula)": "AIRFLOW",
}
CHANNEL_ALIASES.update({name: name for name in CANONICAL_CHANNELS})


@dataclass(frozen=True)
class EpochLabel:
    """Labels of one epoch; either field may be absent (None)."""
    stage: Optional[str] = None
    osa: Optional[int] = None

    def __post_init__(self) -> None:
        if self.stage is not None and self.stage not in SLEEP_STAGES:
            raise ValueError(f"Unknown sleep stage {self.stage!r}")
        if self.osa is not None and self.osa not in (0, 1):
            raise ValueError(f"osa label must be 0 or 1, got {self.osa!r}")

    @property
    def stage_index(self) -> int:
        return -1 if self.stage is None else SLEEP_STAGES.index(self.stage)


@dataclass(frozen=True, eq=False)
class Recording:
    """One subject-night of C-channel signal with optional per-epoch labels."""
    subject_id: str
    channel_names: Tuple[str, ...]
    sampling_hz: int
    samples: np.ndarray
    labels: Optional[Tuple[EpochLabel, ...]] = None
    epoch_seconds: int = 30
    label_mode: Optional[str] = None

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=np.float32, copy=True)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        validate_recording(self)

    @property
    def C(self) -> int:
        return int(self.samples.shape[0])

    @property
    def total_length(self) -> int:
        return int(self.samples.shape[1])

    @property
    def epoch_length(self) -> int:
        return self.epoch_seconds * self.sampling_hz

    @property
    def n_epochs(self) -> int:
        return self.total_length // self.epoch_length

    def epochs(self) -> np.ndarray:
        """Samples cut into epochs, shape (n_epochs, C, epoch_length)."""
        return self.samples.reshape(self.C, self.n_epochs, self.epoch_length).transpose(1, 0, 2)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.channel_names == other.channel_names
            and self.sampling_hz == other.sampling_hz
            and self.epoch_seconds == other.epoch_seconds
            and self.label_mode == other.label_mode
            and self.labels == other.labels
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


def validate_recording(rec: Recording) -> None:
    """
    Validate the structure and content of a recording.

    Raises:
        InvalidConfig: A field is out of range.
        DimensionMismatch: Shapes disagree or samples are not finite.
    """
    if not rec.subject_id:
        raise InvalidConfig("subject_id must be non-empty")
    if rec.sampling_hz <= 0 or rec.epoch_seconds <= 0:
        raise InvalidConfig("sampling_hz and epoch_seconds must be positive")
    if rec.samples.ndim != 2:
        raise DimensionMismatch(f"samples must be (C, total_length), got shape {rec.samples.shape}")
    if len(rec.channel_names) != rec.samples.shape[0]:
        raise DimensionMismatch(
            f"{len(rec.channel_names)} channel names for {rec.samples.shape[0]} channels"
        )
    if rec.samples.shape[1] % (rec.epoch_seconds * rec.sampling_hz) != 0:
        raise DimensionMismatch("total_length must be a whole number of epochs")
    if not np.isfinite(rec.samples).all():
        raise DimensionMismatch("samples contain non-finite values")
    if rec.label_mode is not None and rec.label_mode not in LABEL_MODES:
        raise InvalidConfig(f"label_mode must be one of {LABEL_MODES}, got {rec.label_mode!r}")
    if rec.labels is not None:
        if len(rec.labels) != rec.samples.shape[1] // (rec.epoch_seconds * rec.sampling_hz):
            raise DimensionMismatch("one label per epoch required")
        if any(label.stage is None and label.osa is None for label in rec.labels):
            raise InvalidConfig("every supplied label needs a stage or an osa value")


def trim_to_epochs(samples: np.ndarray, epoch_length: int) -> np.ndarray:
    """Drop the trailing partial epoch of a (C, n) sample matrix."""
    usable = (samples.shape[1] // epoch_length) * epoch_length
    if usable != samples.shape[1]:
        logger.info("Trimming %d trailing samples", samples.shape[1] - usable)
    return samples[:, :usable]


# Binary recording format

def _label_kinds(labels: Optional[Sequence[EpochLabel]]) -> List[str]:
    if not labels:
        return []
    kinds = []
    if any(label.stage is not None for label in labels):
        kinds.append("stage")
    if any(label.osa is not None for label in labels):
        kinds.append("osa")
    return kinds


def encode_recording(rec: Recording) -> bytes:
    """Serialize a recording to the ".psgr" byte layout."""
    kinds = _label_kinds(rec.labels)
    header = {
        "subject_id": rec.subject_id,
        "channel_names": list(rec.channel_names),
        "sampling_hz": rec.sampling_hz,
        "epoch_seconds": rec.epoch_seconds,
        "total_length": rec.total_length,
        "label_mode": rec.label_mode,
        "label_kinds": kinds,
        "has_labels": rec.labels is not None,
        "n_label_epochs": len(rec.labels) if rec.labels is not None else 0,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes]
    parts.append(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    if kinds:
        codes = np.full((len(rec.labels), len(kinds)), LABEL_ABSENT, dtype=np.uint8)
        for row, label in enumerate(rec.labels):
            for col, kind in enumerate(kinds):
                if kind == "stage" and label.stage is not None:
                    codes[row, col] = label.stage_index
                elif kind == "osa" and label.osa is not None:
                    codes[row, col] = label.osa
        parts.append(codes.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _decode_labels(payload: bytes, kinds: List[str], n_epochs: int, offset: int) -> Tuple[EpochLabel, ...]:
    codes = np.frombuffer(payload, dtype=np.uint8).reshape(n_epochs, len(kinds))
    labels = []
    for row in range(n_epochs):
        values = {"stage": None, "osa": None}
        for col, kind in enumerate(kinds):
            code = int(codes[row, col])
            if code == LABEL_ABSENT:
                continue
            if kind == "stage" and code < len(SLEEP_STAGES):
                values["stage"] = SLEEP_STAGES[code]
            elif kind == "osa" and code in (0, 1):
                values["osa"] = code
            else:
                raise FormatViolation(f"Invalid {kind} label code {code}", offset + row * len(kinds) + col)
        if values["stage"] is None and values["osa"] is None:
            raise FormatViolation(f"Epoch {row} has no label values", offset + row * len(kinds))
        labels.append(EpochLabel(**values))
    return tuple(labels)


def decode_recording(data: bytes) -> Recording:
    """
    Parse ".psgr" bytes.

    Raises:
        FormatViolation: Bad magic, unsupported version, malformed header,
            payload length mismatch or non-finite samples.
        ChecksumMismatch: The trailing CRC32 does not match.
    """
    if len(data) < 10:
        raise FormatViolation("File too short for a recording header", len(data))
    if data[:4] != MAGIC:
        raise FormatViolation("Bad magic bytes", 0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise FormatViolation(f"Unsupported format version {version}", 4)
    (header_length,) = struct.unpack_from("<I", data, 6)
    header_end = 10 + header_length
    if header_end > len(data):
        raise FormatViolation("Truncated header", len(data))

    try:
        header = json.loads(data[10:header_end].decode("utf-8"))
        subject_id = str(header["subject_id"])
        channel_names = [str(name) for name in header["channel_names"]]
        sampling_hz = header["sampling_hz"]
        epoch_seconds = header["epoch_seconds"]
        total_length = header["total_length"]
        label_mode = header["label_mode"]
        kinds = list(header["label_kinds"])
        n_label_epochs = header["n_label_epochs"]
        has_labels = header.get("has_labels", bool(kinds))
        if not isinstance(has_labels, bool):
            raise ValueError("has_labels must be a boolean")
        for value in (sampling_hz, epoch_seconds, total_length, n_label_epochs):
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError("header integers must be non-negative")
        if sampling_hz == 0 or epoch_seconds == 0:
            raise ValueError("sampling_hz and epoch_seconds must be positive")
        if not set(kinds) <= {"stage", "osa"} or len(set(kinds)) != len(kinds):
            raise ValueError(f"unknown label kinds {kinds}")
    except FormatViolation:
        raise
    except (UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatViolation(f"Malformed header: {exc}", 10) from exc

    n_channels = len(channel_names)
    epoch_length = sampling_hz * epoch_seconds
    if n_channels == 0 or total_length % epoch_length != 0:
        raise FormatViolation("Header declares an invalid signal shape", 10)
    n_epochs = total_length // epoch_length
    if (kinds or has_labels) and n_label_epochs != n_epochs:
        raise FormatViolation("Label count does not match epoch count", 10)
    if has_labels and n_epochs and not kinds:
        raise FormatViolation("Labelled recording declares no label kinds", 10)

    sample_bytes = n_channels * total_length * 4
    label_bytes = n_epochs * len(kinds)
    expected = header_end + sample_bytes + label_bytes + 4
    if len(data) < expected:
        raise FormatViolation(
            f"Truncated payload: expected {expected} bytes, found {len(data)}", len(data)
        )
    if len(data) > expected:
        raise FormatViolation(
            f"Payload length mismatch: expected {expected} bytes, found {len(data)}", expected
        )

    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch("CRC32 of recording does not match")

    samples = np.frombuffer(data, dtype="<f4", count=n_channels * total_length, offset=header_end)
    samples = samples.reshape(n_channels, total_length).astype(np.float32)
    if not np.isfinite(samples).all():
        bad = int(np.argmax(~np.isfinite(samples).ravel()))
        raise FormatViolation("Non-finite sample", header_end + 4 * bad)

    labels: Optional[Tuple[EpochLabel, ...]] = () if has_labels else None
    if kinds:
        label_offset = header_end + sample_bytes
        labels = _decode_labels(data[label_offset:label_offset + label_bytes], kinds, n_epochs, label_offset)

    try:
        return Recording(
            subject_id=subject_id,
            channel_names=tuple(channel_names),
            sampling_hz=sampling_hz,
            samples=samples,
            labels=labels,
            epoch_seconds=epoch_seconds,
            label_mode=label_mode,
        )
    except (InvalidConfig, DimensionMismatch, ValueError) as exc:
        raise FormatViolation(f"Invalid recording contents: {exc}", 10) from exc


def write_recording(rec: Recording, path: Union[str, Path]) -> Path:
    """
    Write a recording to disk in the ".psgr" format.

    Raises:
        IoFailure: The file cannot be written.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_recording(rec))
    except OSError as exc:
        raise IoFailure(f"Cannot write recording {path}: {exc}") from exc
    return path


def read_recording(path: Union[str, Path]) -> Recording:
    """
    Load a ".psgr" recording.

    Raises:
        IoFailure: The file does not exist or cannot be read.
        FormatViolation / ChecksumMismatch: The file is corrupt.
    """
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"File not found: {path}")
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"Cannot read recording {path}: {exc}") from exc
    return decode_recording(data)


def list_recordings(directory: Union[str, Path]) -> List[Path]:
    """Recording files of a data directory, ordered by the manifest when present."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"Data directory not found: {directory}")
    manifest = directory / "manifest.json"
    if manifest.exists():
        try:
            entries = json.loads(manifest.read_text(encoding="utf-8"))["recordings"]
            return [directory / entry["file"] for entry in entries]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatViolation(f"Malformed manifest {manifest}: {exc}") from exc
    files = sorted(directory.glob(f"*{RECORDING_SUFFIX}"))
    if not files:
        raise IoFailure(f"No {RECORDING_SUFFIX} files in {directory}")
    return files


def load_recordings(directories: Union[str, Path, Sequence[Union[str, Path]]]) -> List[Recording]:
    """Read every recording of one or more data directories, pooled in order."""
    if isinstance(directories, (str, Path)):
        directories = [directories]
    recordings = []
    for directory in directories:
        for path in list_recordings(directory):
            recordings.append(read_recording(path))
    logger.info("Loaded %d recordings", len(recordings))
    return recordings


def write_manifest(directory: Union[str, Path], recordings: Sequence[Recording],
                   files: Sequence[Path], extra: Optional[dict] = None) -> Path:
    """Write manifest.json listing the recordings of a data directory."""
    directory = Path(directory)
    entries = [
        {
            "file": Path(f).name,
            "subject_id": rec.subject_id,
            "n_epochs": rec.n_epochs,
            "label_mode": rec.label_mode,
        }
        for rec, f in zip(recordings, files)
    ]
    payload = {"recordings": entries}
    if extra:
        payload.update(extra)
    path = directory / "manifest.json"
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write manifest {path}: {exc}") from exc
    return path


# Label CSV files

def read_label_csv(filepath: Union[str, Path]) -> List[EpochLabel]:
    """
    Load per-epoch labels from a CSV file.

    Args:
        filepath: CSV with header ``epoch_index,stage,osa``; stage is one of
            W/N1/N2/N3/R or "-", osa is 0/1 or "-".

    Returns:
        Labels ordered by epoch index.

    Raises:
        IoFailure: The file does not exist.
        FormatViolation: Columns, indices or values are invalid.
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise IoFailure(f"File not found: {filepath}")
    try:
        df = pd.read_csv(filepath, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise FormatViolation(f"Cannot parse label file {filepath}: {exc}") from exc

    if list(df.columns) != LABEL_COLUMNS:
        raise FormatViolation(f"Label file columns must be {LABEL_COLUMNS}, got {list(df.columns)}")
    try:
        indices = df["epoch_index"].astype(int).to_numpy()
    except ValueError as exc:
        raise FormatViolation(f"Non-integer epoch_index in {filepath}") from exc
    if not np.array_equal(np.sort(indices), np.arange(len(df))):
        raise FormatViolation("epoch_index must enumerate 0..n-1 exactly once")

    df = df.assign(epoch_index=indices).sort_values("epoch_index")
    labels = []
    for stage, osa in zip(df["stage"].str.strip(), df["osa"].str.strip()):
        if stage != "-" and stage not in SLEEP_STAGES:
            raise FormatViolation(f"Unknown stage {stage!r} in {filepath}")
        if osa not in ("0", "1", "-"):
            raise FormatViolation(f"Unknown osa value {osa!r} in {filepath}")
        if stage == "-" and osa == "-":
            raise FormatViolation("Each labelled epoch needs a stage or an osa value")
        labels.append(EpochLabel(stage=None if stage == "-" else stage,
                                 osa=None if osa == "-" else int(osa)))
    return labels


def write_label_csv(labels: Sequence[EpochLabel], filepath: Union[str, Path]) -> Path:
    """Write labels in the CSV layout read by ``read_label_csv``."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({
        "epoch_index": range(len(labels)),
        "stage": [label.stage or "-" for label in labels],
        "osa": ["-" if label.osa is None else str(label.osa) for label in labels],
    })
    df.to_csv(filepath, index=False, columns=LABEL_COLUMNS)
    return filepath


# Text import

def canonicalize_channels(names: Sequence[str]) -> Tuple[List[str], List[int]]:
    """
    Map exported channel names onto the canonical channel roles.

    Returns:
        (canonical names in canonical order, source index of each)

    Raises:
        InvalidConfig: A name is unknown or a role is missing or duplicated.
    """
    mapped = {}
    for index, name in enumerate(names):
        role = CHANNEL_ALIASES.get(name.strip())
        if role is None:
            raise InvalidConfig(f"Unknown channel name {name!r}")
        if role in mapped:
            raise InvalidConfig(f"Channel role {role} appears twice")
        mapped[role] = index
    missing = [role for role in CANONICAL_CHANNELS if role not in mapped]
    if missing:
        raise InvalidConfig(f"Missing channel roles: {missing}")
    return list(CANONICAL_CHANNELS), [mapped[role] for role in CANONICAL_CHANNELS]


def import_text_recording(sidecar_path: Union[str, Path], canonical: bool = False) -> Recording:
    """
    Build a recording from a text export.

    The JSON sidecar holds ``channel_names`` and ``sampling_hz`` and may hold
    ``subject_id``, ``epoch_seconds``, ``channel_files`` (default
    ``<channel name>.csv`` beside the sidecar), ``labels`` (a label CSV) and
    ``label_mode``. Each channel CSV is a single column of samples without a
    header. The trailing partial epoch is trimmed.

    Raises:
        IoFailure: A referenced file is missing.
        FormatViolation: Sidecar or channel files are malformed.
    """
    sidecar_path = Path(sidecar_path)
    if not sidecar_path.exists():
        raise IoFailure(f"File not found: {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        channel_names = [str(name) for name in meta["channel_names"]]
        sampling_hz = int(meta["sampling_hz"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatViolation(f"Malformed sidecar {sidecar_path}: {exc}") from exc

    base = sidecar_path.parent
    channel_files = meta.get("channel_files") or [f"{name}.csv" for name in channel_names]
    if len(channel_files) != len(channel_names):
        raise FormatViolation("channel_files and channel_names differ in length")

    streams = []
    for name, filename in zip(channel_names, channel_files):
        path = base / filename
        if not path.exists():
            raise IoFailure(f"Channel file not found: {path}")
        try:
            column = pd.read_csv(path, header=None, dtype=np.float64)
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise FormatViolation(f"Cannot parse channel file {path}: {exc}") from exc
        if column.shape[1] != 1:
            raise FormatViolation(f"Channel file {path} must hold a single column")
        streams.append(column.iloc[:, 0].to_numpy())

    lengths = {len(s) for s in streams}
    if len(lengths) != 1:
        raise FormatViolation(f"Channel files differ in length: {sorted(lengths)}")
    samples = np.stack(streams, axis=0)
    if canonical:
        channel_names, order = canonicalize_channels(channel_names)
        samples = samples[order]

    epoch_seconds = int(meta.get("epoch_seconds", 30))
    samples = trim_to_epochs(samples, epoch_seconds * sampling_hz)

    labels = None
    if meta.get("labels"):
        labels = read_label_csv(base / meta["labels"])
        n_epochs = samples.shape[1] // (epoch_seconds * sampling_hz)
        if len(labels) < n_epochs:
            raise FormatViolation(f"{len(labels)} labels for {n_epochs} epochs")
        labels = labels[:n_epochs]

    return Recording(
        subject_id=str(meta.get("subject_id") or sidecar_path.stem),
        channel_names=tuple(channel_names),
        sampling_hz=sampling_hz,
        samples=samples,
        labels=tuple(labels) if labels is not None else None,
        epoch_seconds=epoch_seconds,
        label_mode=meta.get("label_mode"),
    )
