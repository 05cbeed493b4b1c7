import numpy as np
import pytest

from src.data_loading import EpochLabel, Recording
from src.epochs import NormConfig
from src.errors import (
    DimensionMismatch,
    LabelModeMismatch,
    LabelOutOfRange,
    MissingCategory,
    TooFewEpochs,
    TooFewSubjects,
)
from src.splits import (
    EpochDataset,
    build_epoch_dataset,
    class_weights,
    make_split,
    make_subject_folds,
)


def _recording(subject, n_epochs, c=2, seed=0, labels=True, label_mode="osa2"):
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((c, n_epochs * 4)) * 3.0 + 7.0
    rec_labels = [EpochLabel(osa=int(i % 2)) for i in range(n_epochs)] if labels else None
    return Recording(subject_id=subject, channel_names=tuple(f"CH{i}" for i in range(c)), sampling_hz=2,
                     samples=samples, labels=rec_labels, epoch_seconds=2, label_mode=label_mode)


def _dataset(n_subjects, epochs_per_subject=5):
    return build_epoch_dataset([_recording(f"S{i:03d}", epochs_per_subject, seed=i) for i in range(n_subjects)])


def test_build_dataset_normalizes_per_recording():
    recs = [_recording("S000", 10, seed=1), _recording("S001", 6, seed=2)]
    dataset = build_epoch_dataset(recs, NormConfig(center_mode="mean"))
    assert dataset.data.shape == (16, 2, 4)
    assert dataset.data.dtype == np.float32
    first = dataset.data[:10].transpose(1, 0, 2).reshape(2, -1)
    np.testing.assert_allclose(first.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(first.std(axis=1), 1.0, atol=1e-5)
    assert dataset.subjects() == ["S000", "S001"]
    assert dataset.center_mode == "mean"


def test_build_dataset_rejects_mixed_shapes():
    with pytest.raises(DimensionMismatch):
        build_epoch_dataset([_recording("A", 3, c=2), _recording("B", 3, c=3)])


def test_labels_for_task():
    dataset = _dataset(2)
    assert dataset.labels_for("osa").tolist()[:4] == [0, 1, 0, 1]
    with pytest.raises(LabelModeMismatch):
        dataset.labels_for("staging")
    unlabeled = build_epoch_dataset([_recording("A", 3, labels=False, label_mode=None)])
    with pytest.raises(LabelModeMismatch):
        unlabeled.labels_for("osa")


def test_subset_keeps_metadata():
    dataset = _dataset(3)
    part = dataset.subset([0, 7, 14])
    assert isinstance(part, EpochDataset)
    assert len(part) == 3
    assert part.subject_ids.tolist() == ["S000", "S001", "S002"]
    assert part.channel_names == dataset.channel_names


@pytest.mark.parametrize("n,expected", [(100, (80, 10, 10)), (10, (8, 1, 1))])
def test_split_sizes(n, expected):
    train, val, test = make_split(_dataset(1, n), seed=3)
    assert (len(train), len(val), len(test)) == expected
    assert len(set(train) | set(val) | set(test)) == n


def test_split_is_deterministic():
    dataset = _dataset(4, 10)
    first, second = make_split(dataset, seed=9), make_split(dataset, seed=9)
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_split_needs_ten_epochs():
    with pytest.raises(TooFewEpochs):
        make_split(_dataset(1, 9))


def test_subject_split_is_disjoint():
    dataset = _dataset(10, 10)
    train, val, test = make_split(dataset, seed=1, by_subject=True)
    groups = [set(dataset.subject_ids[idx].tolist()) for idx in (train, val, test)]
    assert not groups[0] & groups[1] and not groups[0] & groups[2] and not groups[1] & groups[2]
    assert len(train) + len(val) + len(test) == 100


@pytest.mark.parametrize("n_subjects,sizes", [(10, [2, 2, 2, 2, 2]), (11, [3, 2, 2, 2, 2])])
def test_fold_sizes(n_subjects, sizes):
    plan = make_subject_folds([f"S{i:03d}" for i in range(n_subjects)], k=5, seed=4)
    assert plan.fold_sizes() == sizes
    assert sorted(plan.assignments) == [f"S{i:03d}" for i in range(n_subjects)]


@pytest.mark.parametrize("seed", range(5))
def test_fold_test_subjects_never_leak(seed):
    dataset = _dataset(7, 6)
    plan = make_subject_folds(dataset, k=5, seed=seed)
    for fold in range(plan.fold_count):
        train, val, test = plan.fold_indices(dataset, fold)
        test_subjects = set(dataset.subject_ids[test].tolist())
        assert test_subjects == set(plan.fold_subjects(fold))
        assert not test_subjects & set(dataset.subject_ids[np.concatenate([train, val])].tolist())
        assert len(train) + len(val) + len(test) == len(dataset)


def test_folds_need_enough_subjects():
    with pytest.raises(TooFewSubjects):
        make_subject_folds(["A", "B", "C"], k=5)


def test_class_weight_examples():
    np.testing.assert_allclose(class_weights([0] * 50 + [1] * 50, num_classes=2), [1.0, 1.0])
    np.testing.assert_allclose(class_weights([0] * 90 + [1] * 10, num_classes=2), [100 / 180, 5.0])
    # proportional to 2 : 2 : 1
    np.testing.assert_allclose(class_weights(["a", "b", "c", "c"]), [4 / 3, 4 / 3, 2 / 3])


def test_class_weights_follow_label_permutation():
    labels = np.array([0] * 30 + [1] * 60 + [2] * 10)
    relabeled = np.array([2, 0, 1])[labels]
    weights = class_weights(labels, num_classes=3)
    np.testing.assert_allclose(class_weights(relabeled, num_classes=3)[[2, 0, 1]], weights)
    assert weights[2] > weights[0] > weights[1]


def test_class_weight_errors():
    with pytest.raises(MissingCategory):
        class_weights([0, 0, 2], num_classes=3)
    with pytest.raises(LabelOutOfRange):
        class_weights([0, 1, 3], num_classes=3)
