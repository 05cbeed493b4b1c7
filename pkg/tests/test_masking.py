import numpy as np
import pytest

from src.epochs import EpochMatrix
from src.errors import DimensionMismatch, TooFewChannels, TooFewPatches
from src.masking import MaskPair, apply_mask, draw_selection, generate_mask_pair, selection_to_mask


@pytest.mark.parametrize("c,n_patch,expected", [(5, 10, 2), (2, 3, 1), (4, 6, 2), (7, 2, 3)])
def test_selection_counts(c, n_patch, expected):
    pair = generate_mask_pair(c, n_patch, rng_seed=11)
    assert (pair.selection.sum(axis=1) == expected).all()
    assert (pair.complement_selection.sum(axis=1) == c - expected).all()


def test_many_pairs_are_complementary_partitions():
    rng = np.random.default_rng(0)
    selections = draw_selection(5, 10, rng, batch=10_000)
    assert (selections.sum(axis=-1) == 2).all()
    m = selections.astype(int)
    complement = (~selections).astype(int)
    assert (m * complement == 0).all()
    assert (m + complement == 1).all()


def test_expanded_masks_are_constant_within_cells():
    pair = generate_mask_pair(5, 4, rng_seed=2, l_prime=3)
    m = pair.m()
    assert m.shape == (5, 12)
    for n in range(4):
        block = m[:, n * 3:(n + 1) * 3]
        assert (block == block[:, :1]).all()
    np.testing.assert_array_equal(m + pair.complement(), np.ones((5, 12)))


def test_channel_can_be_absent_from_every_subsegment_of_a_view():
    selections = draw_selection(5, 2, np.random.default_rng(3), batch=200)
    hidden_from_m = ~selections.any(axis=1)
    hidden_from_complement = selections.all(axis=1)
    assert hidden_from_m.any()
    assert hidden_from_complement.any()
    assert not (hidden_from_m & hidden_from_complement).any()


def test_selection_is_uniform():
    rng = np.random.default_rng(42)
    frequencies = draw_selection(4, 3, rng, batch=10_000).mean(axis=0)
    assert ((frequencies >= 0.47) & (frequencies <= 0.53)).all()


def test_generation_is_deterministic():
    assert generate_mask_pair(5, 10, rng_seed=9) == generate_mask_pair(5, 10, rng_seed=9)
    differing = sum(
        generate_mask_pair(4, 4, rng_seed=seed) != generate_mask_pair(4, 4, rng_seed=seed + 1000)
        for seed in range(100)
    )
    assert differing >= 95


def test_generation_rejects_degenerate_sizes():
    with pytest.raises(TooFewChannels):
        generate_mask_pair(1, 10, rng_seed=0)
    with pytest.raises(TooFewPatches):
        generate_mask_pair(5, 1, rng_seed=0)


def test_apply_mask_single_cell():
    epoch = EpochMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]), sampling_hz=2, epoch_seconds=1)
    mask = selection_to_mask(np.array([[True, False]]), l_prime=2)
    assert apply_mask(epoch, mask).data.tolist() == [[1.0, 2.0], [0.0, 0.0]]


def test_apply_mask_partition_and_identity():
    rng = np.random.default_rng(5)
    epoch = EpochMatrix(rng.standard_normal((5, 40)), sampling_hz=4, epoch_seconds=10)
    pair = generate_mask_pair(5, 10, rng_seed=3, l_prime=4)
    total = apply_mask(epoch, pair.m()).data + apply_mask(epoch, pair.complement()).data
    np.testing.assert_array_equal(total, epoch.data)
    np.testing.assert_array_equal(apply_mask(epoch, np.ones((5, 40))).data, epoch.data)


def test_apply_mask_shape_mismatch():
    epoch = EpochMatrix(np.zeros((2, 4)), sampling_hz=4, epoch_seconds=1)
    with pytest.raises(DimensionMismatch):
        apply_mask(epoch, np.ones((2, 3)))


def test_mask_pair_requires_matrix():
    with pytest.raises(DimensionMismatch):
        MaskPair(selection=np.ones(3, dtype=bool))
