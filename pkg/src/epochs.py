"""
Epoch domain types, segmentation and per-channel robust Z-score normalization.

An epoch is a (C, L) matrix holding ``epoch_seconds`` of a C-channel
recording sampled at ``sampling_hz``. For training it is cut along time into
``n_patch`` equal subsegments of shape (C, L').
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from src.errors import (
    DimensionMismatch,
    EmptyChannel,
    InvalidConfig,
    NonDivisibleLength,
    TooFewPatches,
)
from src.utils.config_base import ConfigSection

CENTER_MODES = ("median", "mean")
DEFAULT_EPSILON = 1e-8
DEFAULT_N_PATCH = 10


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass
class NormConfig(ConfigSection):
    """How recordings are normalized before epochs are cut."""
    center_mode: str = "median"
    epsilon: float = DEFAULT_EPSILON

    def validate(self) -> None:
        if self.center_mode not in CENTER_MODES:
            raise InvalidConfig(f"center_mode must be one of {CENTER_MODES}, got {self.center_mode!r}")
        if not self.epsilon > 0:
            raise InvalidConfig("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class EpochMatrix:
    """One epoch of multichannel signal, shape (C, L)."""
    data: np.ndarray
    sampling_hz: int
    epoch_seconds: int = 30

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionMismatch(f"Epoch data must be 2-D (C, L), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionMismatch(f"Epoch data must be non-empty, got shape {data.shape}")
        if self.sampling_hz <= 0 or self.epoch_seconds <= 0:
            raise InvalidConfig("sampling_hz and epoch_seconds must be positive")
        if data.shape[1] != self.epoch_seconds * self.sampling_hz:
            raise DimensionMismatch(
                f"L={data.shape[1]} does not equal epoch_seconds x sampling_hz "
                f"= {self.epoch_seconds * self.sampling_hz}"
            )
        if not np.isfinite(data).all():
            raise DimensionMismatch("Epoch data contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def C(self) -> int:
        return int(self.data.shape[0])

    @property
    def L(self) -> int:
        return int(self.data.shape[1])

    def with_data(self, data: np.ndarray) -> "EpochMatrix":
        return EpochMatrix(data=data, sampling_hz=self.sampling_hz, epoch_seconds=self.epoch_seconds)


@dataclass(frozen=True, eq=False)
class SegmentedEpoch:
    """An epoch cut into ``n_patch`` contiguous subsegments of shape (C, L')."""
    segments: Tuple[np.ndarray, ...]
    n_patch: int
    l_prime: int

    def __post_init__(self) -> None:
        if len(self.segments) != self.n_patch:
            raise DimensionMismatch(f"Expected {self.n_patch} segments, got {len(self.segments)}")
        shapes = {np.shape(s) for s in self.segments}
        if len(shapes) != 1 or next(iter(shapes))[1] != self.l_prime:
            raise DimensionMismatch(f"Segments must share shape (C, {self.l_prime}), got {shapes}")
        object.__setattr__(self, "segments", tuple(_readonly(s) for s in self.segments))

    @property
    def C(self) -> int:
        return int(self.segments[0].shape[0])

    def as_array(self) -> np.ndarray:
        """Stack segments into an (n_patch, C, L') array."""
        return np.stack(self.segments, axis=0)

    def concatenate(self) -> np.ndarray:
        """Reassemble the (C, L) source matrix."""
        return np.concatenate(self.segments, axis=1)


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-channel center (median or mean) and population standard deviation."""
    center: np.ndarray
    scale: np.ndarray
    center_mode: str = "median"

    def __post_init__(self) -> None:
        center = np.asarray(self.center, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        if center.ndim != 1 or center.shape != scale.shape:
            raise DimensionMismatch(
                f"center and scale must be vectors of equal length, got {center.shape} and {scale.shape}"
            )
        if (scale < 0).any():
            raise DimensionMismatch("scale entries must be non-negative")
        object.__setattr__(self, "center", _readonly(center))
        object.__setattr__(self, "scale", _readonly(scale))

    @property
    def C(self) -> int:
        return int(self.center.shape[0])


def segment_epoch(epoch: EpochMatrix, n_patch: int) -> SegmentedEpoch:
    """
    Split an epoch along time into ``n_patch`` equal subsegments.

    Raises:
        TooFewPatches: n_patch < 2.
        NonDivisibleLength: L is not a multiple of n_patch.
    """
    if n_patch < 2:
        raise TooFewPatches(f"n_patch must be at least 2, got {n_patch}")
    if epoch.L % n_patch != 0:
        raise NonDivisibleLength(f"L={epoch.L} is not divisible by n_patch={n_patch}")
    l_prime = epoch.L // n_patch
    segments = tuple(np.split(epoch.data, n_patch, axis=1))
    return SegmentedEpoch(segments=segments, n_patch=n_patch, l_prime=l_prime)


def compute_norm_stats(
    recording_channel_data: Union[np.ndarray, Sequence[Sequence[float]]],
    center_mode: str = "median",
) -> NormStats:
    """
    Per-channel normalization statistics over a whole recording.

    Args:
        recording_channel_data: One sample stream per channel, either a (C, n)
            array or a sequence of 1-D streams (lengths may differ).
        center_mode: "median" (default) or "mean".

    Returns:
        NormStats with the per-channel center and population (divisor n)
        standard deviation.

    Raises:
        EmptyChannel: A channel holds fewer than 2 samples.
    """
    if center_mode not in CENTER_MODES:
        raise InvalidConfig(f"center_mode must be one of {CENTER_MODES}, got {center_mode!r}")

    centers = []
    scales = []
    for index, stream in enumerate(recording_channel_data):
        values = np.asarray(stream, dtype=np.float64).ravel()
        if values.size < 2:
            raise EmptyChannel(f"Channel {index} has {values.size} samples; at least 2 required")
        centers.append(np.median(values) if center_mode == "median" else values.mean())
        scales.append(values.std())

    if not centers:
        raise EmptyChannel("No channels supplied")
    return NormStats(center=np.array(centers), scale=np.array(scales), center_mode=center_mode)


def normalize_array(data: np.ndarray, stats: NormStats, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """
    Apply ``(x - center) / max(scale, epsilon)`` along the channel axis.

    ``data`` has shape (C, ...) with the channel axis first.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] != stats.C:
        raise DimensionMismatch(f"Data has {data.shape[0]} channels, stats have {stats.C}")
    shape = (stats.C,) + (1,) * (data.ndim - 1)
    center = stats.center.reshape(shape)
    scale = np.maximum(stats.scale, epsilon).reshape(shape)
    return (data - center) / scale


def normalize(epoch: EpochMatrix, stats: NormStats, epsilon: float = DEFAULT_EPSILON) -> EpochMatrix:
    """
    Normalize one epoch with recording-level statistics.

    Raises:
        DimensionMismatch: stats were computed for a different channel count.
    """
    if not epsilon > 0:
        raise InvalidConfig("epsilon must be positive")
    return epoch.with_data(normalize_array(epoch.data, stats, epsilon))
