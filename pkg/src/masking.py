"""
Complementary channel masks.

For every subsegment a uniformly random subset of floor(C/2) channels goes
into mask M; the remaining channels form the complement 1 - M. A mask value
is constant over the L' samples of its (subsegment, channel) cell, so masks
are stored compactly as an (n_patch, C) boolean selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.epochs import EpochMatrix
from src.errors import DimensionMismatch, TooFewChannels, TooFewPatches


@dataclass(frozen=True, eq=False)
class MaskPair:
    """A complementary pair of channel masks over one segmented epoch."""
    selection: np.ndarray
    l_prime: int = 1

    def __post_init__(self) -> None:
        selection = np.array(self.selection, dtype=bool, copy=True)
        if selection.ndim != 2:
            raise DimensionMismatch(f"selection must be (n_patch, C), got shape {selection.shape}")
        selection.setflags(write=False)
        object.__setattr__(self, "selection", selection)

    @property
    def n_patch(self) -> int:
        return int(self.selection.shape[0])

    @property
    def c(self) -> int:
        return int(self.selection.shape[1])

    @property
    def complement_selection(self) -> np.ndarray:
        return ~self.selection

    def m(self) -> np.ndarray:
        """Expanded mask M of shape (C, n_patch * l_prime)."""
        return selection_to_mask(self.selection, self.l_prime)

    def complement(self) -> np.ndarray:
        """Expanded complement 1 - M of shape (C, n_patch * l_prime)."""
        return selection_to_mask(~self.selection, self.l_prime)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskPair):
            return NotImplemented
        return self.l_prime == other.l_prime and np.array_equal(self.selection, other.selection)


def selection_to_mask(selection: np.ndarray, l_prime: int) -> np.ndarray:
    """Expand an (n_patch, C) selection into a (C, n_patch * l_prime) 0/1 mask."""
    return np.repeat(np.asarray(selection, dtype=np.float64).T, l_prime, axis=1)


def draw_selection(c: int, n_patch: int, rng: np.random.Generator,
                   batch: Optional[int] = None) -> np.ndarray:
    """
    Draw per-subsegment floor(C/2)-subsets of channels.

    Ranking i.i.d. uniforms and keeping the lowest floor(C/2) ranks picks each
    subset with equal probability, independently per subsegment.

    Returns:
        Boolean array (n_patch, C), or (batch, n_patch, C) when ``batch`` is set.
    """
    if c < 2:
        raise TooFewChannels(f"Complementary masking needs at least 2 channels, got {c}")
    if n_patch < 2:
        raise TooFewPatches(f"n_patch must be at least 2, got {n_patch}")
    shape = (n_patch, c) if batch is None else (batch, n_patch, c)
    ranks = np.argsort(rng.random(shape), axis=-1)
    selection = np.zeros(shape, dtype=bool)
    np.put_along_axis(selection, ranks[..., : c // 2], True, axis=-1)
    return selection


def generate_mask_pair(c: int, n_patch: int, rng_seed: int, l_prime: int = 1) -> MaskPair:
    """
    Generate a complementary mask pair.

    Args:
        c: Channel count.
        n_patch: Number of subsegments.
        rng_seed: Seed; the pair is a pure function of (c, n_patch, rng_seed).
        l_prime: Samples per subsegment, used when the masks are expanded.

    Raises:
        TooFewChannels: c < 2.
        TooFewPatches: n_patch < 2.
    """
    rng = np.random.default_rng(rng_seed)
    return MaskPair(selection=draw_selection(c, n_patch, rng), l_prime=l_prime)


def apply_mask(epoch: EpochMatrix, mask_side: np.ndarray) -> EpochMatrix:
    """
    Elementwise product of an epoch with one mask side.

    Raises:
        DimensionMismatch: mask and epoch shapes differ.
    """
    mask_side = np.asarray(mask_side)
    if mask_side.shape != epoch.data.shape:
        raise DimensionMismatch(f"Mask shape {mask_side.shape} does not match epoch shape {epoch.data.shape}")
    return epoch.with_data(np.where(mask_side != 0, epoch.data, 0.0))
