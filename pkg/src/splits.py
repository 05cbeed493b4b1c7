"""
In-memory epoch datasets, train/val/test splits, subject-wise folds and
class weights.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.utils.class_weight import compute_class_weight

from src.data_loading import SLEEP_STAGES, Recording
from src.epochs import NormConfig, compute_norm_stats, normalize_array
from src.errors import (
    DimensionMismatch,
    InvalidConfig,
    LabelModeMismatch,
    LabelOutOfRange,
    MissingCategory,
    TooFewEpochs,
    TooFewSubjects,
)
from src.utils.seeding import make_rng

logger = logging.getLogger(__name__)

TASKS = {"staging": len(SLEEP_STAGES), "osa": 2}


@dataclass(eq=False)
class EpochDataset:
    """
    Normalized epochs of one or more recordings.

    ``stage`` and ``osa`` hold integer labels per epoch, -1 where absent.
    """
    data: np.ndarray
    stage: np.ndarray
    osa: np.ndarray
    subject_ids: np.ndarray
    channel_names: Tuple[str, ...]
    sampling_hz: int
    epoch_seconds: int = 30
    label_mode: Optional[str] = None
    center_mode: str = "median"

    def __len__(self) -> int:
        return int(self.data.shape[0])

    @property
    def C(self) -> int:
        return int(self.data.shape[1])

    @property
    def L(self) -> int:
        return int(self.data.shape[2])

    def subjects(self) -> List[str]:
        return sorted(set(self.subject_ids.tolist()))

    def subset(self, indices: Sequence[int]) -> "EpochDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return EpochDataset(
            data=self.data[indices],
            stage=self.stage[indices],
            osa=self.osa[indices],
            subject_ids=self.subject_ids[indices],
            channel_names=self.channel_names,
            sampling_hz=self.sampling_hz,
            epoch_seconds=self.epoch_seconds,
            label_mode=self.label_mode,
            center_mode=self.center_mode,
        )

    def labels_for(self, task: str) -> np.ndarray:
        """
        Integer labels for a downstream task.

        Raises:
            LabelModeMismatch: the dataset lacks labels for the task.
        """
        if task not in TASKS:
            raise InvalidConfig(f"task must be one of {sorted(TASKS)}, got {task!r}")
        labels = self.stage if task == "staging" else self.osa
        if len(labels) == 0 or (labels < 0).any():
            raise LabelModeMismatch(
                f"Task {task!r} needs {task} labels on every epoch (label mode {self.label_mode!r})"
            )
        return labels


def build_epoch_dataset(recordings: Sequence[Recording],
                        norm_cfg: Optional[NormConfig] = None) -> EpochDataset:
    """
    Normalize each recording with its own statistics and cut it into epochs.

    Raises:
        DimensionMismatch: recordings differ in channel count or epoch length.
    """
    norm_cfg = norm_cfg or NormConfig()
    if not recordings:
        raise TooFewEpochs("No recordings supplied")
    first = recordings[0]
    chunks, stages, osas, subjects = [], [], [], []
    for rec in recordings:
        if rec.C != first.C or rec.epoch_length != first.epoch_length:
            raise DimensionMismatch(
                f"Recording {rec.subject_id} has shape ({rec.C}, {rec.epoch_length}) per epoch, "
                f"expected ({first.C}, {first.epoch_length})"
            )
        stats = compute_norm_stats(rec.samples, center_mode=norm_cfg.center_mode)
        normalized = normalize_array(rec.samples, stats, norm_cfg.epsilon)
        epochs = normalized.reshape(rec.C, rec.n_epochs, rec.epoch_length).transpose(1, 0, 2)
        chunks.append(epochs.astype(np.float32))
        if rec.labels is None:
            stages.append(np.full(rec.n_epochs, -1))
            osas.append(np.full(rec.n_epochs, -1))
        else:
            stages.append(np.array([label.stage_index for label in rec.labels]))
            osas.append(np.array([-1 if label.osa is None else label.osa for label in rec.labels]))
        subjects.append(np.full(rec.n_epochs, rec.subject_id, dtype=object))

    modes = {rec.label_mode for rec in recordings}
    dataset = EpochDataset(
        data=np.concatenate(chunks, axis=0),
        stage=np.concatenate(stages).astype(np.int64),
        osa=np.concatenate(osas).astype(np.int64),
        subject_ids=np.concatenate(subjects),
        channel_names=first.channel_names,
        sampling_hz=first.sampling_hz,
        epoch_seconds=first.epoch_seconds,
        label_mode=modes.pop() if len(modes) == 1 else None,
        center_mode=norm_cfg.center_mode,
    )
    logger.info("Built dataset: %d epochs from %d recordings", len(dataset), len(recordings))
    return dataset


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _subject_array(source: Union[EpochDataset, Sequence[Recording]]) -> np.ndarray:
    if isinstance(source, EpochDataset):
        return source.subject_ids
    return np.concatenate([np.full(rec.n_epochs, rec.subject_id, dtype=object) for rec in source])


def make_split(source: Union[EpochDataset, Sequence[Recording]],
               fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
               seed: int = 0,
               by_subject: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Partition epochs into train/validation/test index sets.

    Epoch-wise by default: all epochs are shuffled and the validation and test
    sizes are round(n * fraction); training gets the rest. With
    ``by_subject`` whole subjects are assigned, filling test then validation
    until their epoch targets are reached.

    Returns:
        (train, val, test) sorted index arrays into the pooled epoch order.

    Raises:
        TooFewEpochs: fewer than 10 epochs.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise InvalidConfig(f"fractions must be three non-negative values summing to 1, got {fractions}")
    subject_ids = _subject_array(source)
    n = len(subject_ids)
    if n < 10:
        raise TooFewEpochs(f"At least 10 epochs required, got {n}")
    rng = make_rng(seed, "split")
    n_val = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])

    if not by_subject:
        order = rng.permutation(n)
        test = order[:n_test]
        val = order[n_test:n_test + n_val]
        train = order[n_test + n_val:]
        return np.sort(train), np.sort(val), np.sort(test)

    subjects = np.array(sorted(set(subject_ids.tolist())), dtype=object)
    if len(subjects) < 3:
        raise TooFewSubjects(f"Subject-wise split needs at least 3 subjects, got {len(subjects)}")
    order = subjects[rng.permutation(len(subjects))]
    counts = {sid: int((subject_ids == sid).sum()) for sid in subjects}
    test_subjects, val_subjects = [], []
    taken = 0
    for sid in order:
        if taken < n_test:
            test_subjects.append(sid)
        elif taken < n_test + n_val:
            val_subjects.append(sid)
        else:
            break
        taken += counts[sid]
    test = np.flatnonzero(np.isin(subject_ids, test_subjects))
    val = np.flatnonzero(np.isin(subject_ids, val_subjects))
    train = np.flatnonzero(~np.isin(subject_ids, test_subjects + val_subjects))
    return train, val, test


@dataclass
class SplitPlan:
    """Subject-to-fold assignment for subject-wise cross-validation."""
    fold_count: int
    assignments: Dict[str, int]
    val_fraction: float = 0.2
    seed: int = 0
    train_fraction: float = field(init=False)

    def __post_init__(self) -> None:
        self.train_fraction = 1.0 - self.val_fraction

    def fold_subjects(self, fold: int) -> List[str]:
        return sorted(sid for sid, k in self.assignments.items() if k == fold)

    def fold_sizes(self) -> List[int]:
        return [len(self.fold_subjects(k)) for k in range(self.fold_count)]

    def fold_indices(self, source: Union[EpochDataset, Sequence[Recording]],
                     fold: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        (train, val, test) epoch indices for one fold.

        Test holds every epoch of the fold's subjects. The remaining epochs are
        shuffled and ``val_fraction`` of them go to validation.
        """
        if not 0 <= fold < self.fold_count:
            raise InvalidConfig(f"fold must lie in [0, {self.fold_count}), got {fold}")
        subject_ids = _subject_array(source)
        test_mask = np.isin(subject_ids, self.fold_subjects(fold))
        rest = np.flatnonzero(~test_mask)
        rng = make_rng(self.seed, f"folds/{fold}")
        rest = rest[rng.permutation(len(rest))]
        n_val = _round_half_up(len(rest) * self.val_fraction)
        return np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.flatnonzero(test_mask)

    def to_dict(self) -> Dict[str, object]:
        return {
            "fold_count": self.fold_count,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
            "assignments": dict(sorted(self.assignments.items())),
        }


def make_subject_folds(source: Union[EpochDataset, Sequence[Recording], Sequence[str]],
                       k: int = 5, seed: int = 0, val_fraction: float = 0.2) -> SplitPlan:
    """
    Randomly partition subjects into k folds whose sizes differ by at most one.

    Raises:
        TooFewSubjects: fewer than k distinct subjects.
    """
    if k < 2:
        raise InvalidConfig(f"k must be at least 2, got {k}")
    if isinstance(source, EpochDataset):
        subjects = source.subjects()
    else:
        subjects = sorted({item.subject_id if isinstance(item, Recording) else str(item) for item in source})
    if len(subjects) < k:
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {k} folds")
    order = make_rng(seed, "folds").permutation(len(subjects))
    assignments = {}
    for fold, members in enumerate(np.array_split(order, k)):
        for index in members:
            assignments[subjects[int(index)]] = fold
    return SplitPlan(fold_count=k, assignments=assignments, val_fraction=val_fraction, seed=seed)


def class_weights(labels: Sequence, num_classes: Optional[int] = None) -> np.ndarray:
    """
    Inverse-frequency weights w_j = N / (K * n_j).

    Args:
        labels: One category per sample. Integer indices when ``num_classes``
            is given; any sortable categories otherwise.
        num_classes: Number of categories K; every index in [0, K) must occur.

    Returns:
        Weights ordered by category index (or sorted category value).

    Raises:
        MissingCategory: a category in [0, K) has no samples.
        LabelOutOfRange: an index lies outside [0, K).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MissingCategory("No labels supplied")
    if num_classes is None:
        classes = np.unique(labels)
    else:
        if labels.min() < 0 or labels.max() >= num_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
        classes = np.arange(num_classes)
        counts = np.bincount(labels.astype(np.int64), minlength=num_classes)
        missing = np.flatnonzero(counts == 0)
        if missing.size:
            raise MissingCategory(f"Categories without samples: {missing.tolist()}")
    return compute_class_weight("balanced", classes=classes, y=labels)
