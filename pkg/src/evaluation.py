"""
Model evaluation and plot-data export.

- per-channel reconstruction MSE with the predict-zero baseline,
- classification predictions and metric reports,
- CSV exports: loss curves, original-vs-reconstructed traces, encoder
  feature vectors and fold reports,
- raw-signal baselines: scikit-learn classifiers on summary features and a
  plain 1-D CNN on the epochs themselves.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy import signal
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC
from torch import nn

from src.checkpoint import Checkpoint
from src.errors import ConfigMismatch, DimensionMismatch, DivergenceDetected, InvalidConfig, IoFailure, LengthMismatch
from src.losses import weighted_ce_loss
from src.masking import draw_selection
from src.metrics import MetricReport, confusion, metrics
from src.model import PsgMae, from_segments, to_segments
from src.splits import TASKS, EpochDataset, class_weights
from src.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

FEATURE_BASELINES = ("random_forest", "svm", "logistic")
BASELINE_KINDS = FEATURE_BASELINES + ("cnn",)
# (low, high) Hz bands for raw-signal summary features.
POWER_BANDS = ((0.1, 1.0), (1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0))


@dataclass
class ReconstructionReport:
    """Per-channel reconstruction MSE next to the predict-zero baseline."""
    channel_names: Tuple[str, ...]
    per_channel_mse: List[float]
    baseline_mse: List[float]
    epochs: int
    recon_target: str

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_channel_mse))

    @property
    def mean_baseline(self) -> float:
        return float(np.mean(self.baseline_mse))

    def to_dict(self) -> Dict[str, object]:
        return {
            "channels": list(self.channel_names),
            "per_channel_mse": list(self.per_channel_mse),
            "baseline_mse": list(self.baseline_mse),
            "mean_mse": self.mean_mse,
            "mean_baseline": self.mean_baseline,
            "epochs": self.epochs,
            "recon_target": self.recon_target,
        }


def evaluation_selection(n_epochs: int, c: int, n_patch: int, seed: int) -> np.ndarray:
    """Fixed (n_epochs, n_patch, C) mask selections for held-out evaluation."""
    return draw_selection(c, n_patch, make_rng(seed, "val-masks"), batch=n_epochs)


def reconstruction_mse_from_arrays(recon: np.ndarray, target: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """
    Per-channel mean squared error over the selected cells.

    Args:
        recon, target: (E, N, C, L') arrays.
        cells: (E, N, C) boolean selection of scored cells.

    Returns:
        Length-C vector; channels with no selected cell report 0.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    cells = np.asarray(cells, dtype=bool)
    if recon.shape != target.shape or cells.shape != recon.shape[:3]:
        raise DimensionMismatch(f"Shapes disagree: {recon.shape}, {target.shape}, {cells.shape}")
    squared = ((recon - target) ** 2).sum(axis=-1)
    weight = cells.astype(np.float64)
    counts = weight.sum(axis=(0, 1)) * recon.shape[-1]
    return np.divide((squared * weight).sum(axis=(0, 1)), counts,
                     out=np.zeros(recon.shape[2]), where=counts > 0)


def _reconstruct_sides(model: PsgMae, segments: torch.Tensor,
                       selection: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
    keep = selection.unsqueeze(-1).to(segments.dtype)
    with torch.no_grad():
        recon_hat = model.reconstruct(segments * keep)
        recon_bar = model.reconstruct(segments * (1.0 - keep))
    return recon_hat.double().numpy(), recon_bar.double().numpy()


def reconstruct_scored(model: PsgMae, data: np.ndarray, selection: np.ndarray,
                       recon_target: str = "visible", batch_size: int = 64) -> np.ndarray:
    """
    Reconstruction of (E, C, L) epochs in segmented layout (E, N, C, L').

    Every cell takes the reconstruction of the side that scores it: the side
    where it was visible for ``visible``, hidden for ``hidden``, and the mean
    of both sides for ``all``.
    """
    model.eval()
    n_patch = model.cfg.n_patch
    dtype = next(model.parameters()).dtype
    chunks = []
    for start in range(0, len(data), batch_size):
        batch = torch.as_tensor(np.asarray(data[start:start + batch_size]), dtype=dtype)
        segments = to_segments(batch, n_patch)
        sel = torch.from_numpy(selection[start:start + batch_size])
        hat, bar = _reconstruct_sides(model, segments, sel)
        cells = sel.numpy()[..., None]
        if recon_target == "visible":
            chunks.append(np.where(cells, hat, bar))
        elif recon_target == "hidden":
            chunks.append(np.where(cells, bar, hat))
        elif recon_target == "all":
            chunks.append(0.5 * (hat + bar))
        else:
            raise InvalidConfig(f"Unknown recon_target {recon_target!r}")
    return np.concatenate(chunks, axis=0)


def _check_compatible(checkpoint: Checkpoint, dataset: EpochDataset, recon_target: Optional[str]) -> None:
    if dataset.center_mode != checkpoint.center_mode:
        raise ConfigMismatch(
            f"Dataset normalized with center_mode={dataset.center_mode!r}, "
            f"checkpoint trained with {checkpoint.center_mode!r}"
        )
    if recon_target is not None and recon_target != checkpoint.recon_target:
        raise ConfigMismatch(
            f"recon_target={recon_target!r} differs from checkpoint's {checkpoint.recon_target!r}"
        )
    cfg = checkpoint.model_config
    if dataset.C != cfg.c or dataset.L != cfg.epoch_length:
        raise ConfigMismatch(
            f"Dataset epochs are ({dataset.C}, {dataset.L}), checkpoint expects ({cfg.c}, {cfg.epoch_length})"
        )


def reconstruction_mse_report(checkpoint: Union[Checkpoint, PsgMae], dataset: EpochDataset,
                              recon_target: Optional[str] = None, seed: int = 0,
                              batch_size: int = 64) -> ReconstructionReport:
    """
    Held-out reconstruction MSE per channel.

    Masks are drawn once from the ``val-masks`` stream of ``seed``; each cell
    is scored on the side given by the reconstruction target. Also reports the
    predict-zero baseline (mean squared signal) per channel.

    Raises:
        ConfigMismatch: the dataset normalization or ``recon_target`` differ
            from the checkpoint.
    """
    if isinstance(checkpoint, Checkpoint):
        _check_compatible(checkpoint, dataset, recon_target)
        target_mode = checkpoint.recon_target
        model = checkpoint.build_model()
    else:
        target_mode = recon_target or "visible"
        model = checkpoint
    cfg = model.cfg
    selection = evaluation_selection(len(dataset), cfg.c, cfg.n_patch, seed)
    recon = reconstruct_scored(model, dataset.data, selection, target_mode, batch_size)
    target = to_segments(torch.from_numpy(dataset.data), cfg.n_patch).double().numpy()
    all_cells = np.ones(selection.shape, dtype=bool)
    per_channel = reconstruction_mse_from_arrays(recon, target, all_cells)
    baseline = reconstruction_mse_from_arrays(np.zeros_like(target), target, all_cells)
    report = ReconstructionReport(
        channel_names=tuple(dataset.channel_names),
        per_channel_mse=[float(v) for v in per_channel],
        baseline_mse=[float(v) for v in baseline],
        epochs=len(dataset),
        recon_target=target_mode,
    )
    logger.info("Reconstruction MSE %.4f (predict-zero baseline %.4f) over %d epochs",
                report.mean_mse, report.mean_baseline, report.epochs)
    return report


# Classification

Classifier = Union[PsgMae, "RawCnnBaseline"]


def _num_classes(model: Classifier) -> int:
    return model.cfg.num_classes if isinstance(model, PsgMae) else model.num_classes


def predict_probabilities(model: Classifier, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """(E, C, L) epochs -> (E, num_classes) probabilities."""
    model.eval()
    out = []
    param = next(model.parameters())
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            batch = torch.as_tensor(np.asarray(data[start:start + batch_size]), dtype=param.dtype)
            if isinstance(model, PsgMae):
                probabilities = model.classify(to_segments(batch, model.cfg.n_patch))
            else:
                probabilities = model(batch)
            out.append(probabilities.double().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, _num_classes(model)))


def classification_report(model: Classifier, data: np.ndarray, labels: np.ndarray,
                          categories: Optional[Sequence[str]] = None, batch_size: int = 64) -> MetricReport:
    predictions = predict_probabilities(model, data, batch_size).argmax(axis=1)
    cm = confusion(labels, predictions, _num_classes(model))
    return metrics(cm, categories)


def encode_features(model: PsgMae, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Encoder feature vector per epoch: unmasked tokens averaged over positions."""
    model.eval()
    out = []
    param = next(model.parameters())
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            batch = torch.as_tensor(np.asarray(data[start:start + batch_size]), dtype=param.dtype)
            out.append(model.features(to_segments(batch, model.cfg.n_patch)).mean(dim=1).double().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.d_model))


# CSV exports

def _write_csv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    return path


def export_loss_curve(steps: Sequence[Dict[str, object]], path: Union[str, Path]) -> Path:
    """One row per logged step."""
    return _write_csv(pd.DataFrame(list(steps)), path)


def export_trace(model: PsgMae, dataset: EpochDataset, epoch_index: int, path: Union[str, Path],
                 seed: int = 0, recon_target: str = "visible") -> Path:
    """
    Original-vs-reconstructed trace of one epoch.

    One row per time step; columns ``sample`` then ``<channel>_orig`` and
    ``<channel>_recon`` for each channel.
    """
    if not 0 <= epoch_index < len(dataset):
        raise InvalidConfig(f"epoch_index must lie in [0, {len(dataset)}), got {epoch_index}")
    cfg = model.cfg
    selection = evaluation_selection(len(dataset), cfg.c, cfg.n_patch, seed)[epoch_index:epoch_index + 1]
    data = dataset.data[epoch_index:epoch_index + 1]
    recon = reconstruct_scored(model, data, selection, recon_target)
    recon_flat = from_segments(torch.from_numpy(recon)).numpy()[0]
    columns: Dict[str, np.ndarray] = {"sample": np.arange(dataset.L)}
    for c, name in enumerate(dataset.channel_names):
        columns[f"{name}_orig"] = data[0, c].astype(np.float64)
        columns[f"{name}_recon"] = recon_flat[c]
    return _write_csv(pd.DataFrame(columns), path)


def export_features(features: np.ndarray, labels: Optional[np.ndarray], path: Union[str, Path]) -> Path:
    """One row per epoch: ``label`` then ``f0`` .. ``f{d-1}``."""
    features = np.asarray(features, dtype=np.float64)
    if labels is None:
        labels = np.full(len(features), -1)
    if len(labels) != len(features):
        raise DimensionMismatch(f"{len(labels)} labels for {len(features)} feature rows")
    df = pd.DataFrame(features, columns=[f"f{i}" for i in range(features.shape[1])])
    df.insert(0, "label", np.asarray(labels, dtype=np.int64))
    return _write_csv(df, path)


def export_reports(reports: Sequence[MetricReport], path: Union[str, Path]) -> Path:
    """One row per fold of scalar metrics."""
    df = pd.DataFrame([r.scalar_metrics() for r in reports])
    df.insert(0, "fold", range(len(reports)))
    return _write_csv(df, path)


def export_plot_data(out_dir: Union[str, Path], steps: Optional[Sequence[Dict[str, object]]] = None,
                     reports: Optional[Sequence[MetricReport]] = None,
                     model: Optional[PsgMae] = None, dataset: Optional[EpochDataset] = None,
                     epoch_index: int = 0, seed: int = 0) -> List[Path]:
    """
    Write every plot-ready CSV the inputs allow into ``out_dir``.

    ``loss_curve.csv`` from step records, ``fold_reports.csv`` from metric
    reports, and ``trace.csv`` plus ``features.csv`` from a model and dataset.
    """
    out_dir = Path(out_dir)
    written = []
    if steps is not None:
        written.append(export_loss_curve(steps, out_dir / "loss_curve.csv"))
    if reports is not None:
        written.append(export_reports(reports, out_dir / "fold_reports.csv"))
    if model is not None and dataset is not None:
        written.append(export_trace(model, dataset, epoch_index, out_dir / "trace.csv", seed))
        labels = dataset.stage if dataset.label_mode == "staging5" else dataset.osa
        written.append(export_features(encode_features(model, dataset.data), labels, out_dir / "features.csv"))
    logger.info("Exported %d plot-data files to %s", len(written), out_dir)
    return written


def write_json(payload: Dict[str, object], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    return path


# Raw-signal baselines

def raw_signal_features(data: np.ndarray, sampling_hz: int) -> np.ndarray:
    """
    Per-epoch summary features: per channel mean, std and log band power in
    each of the ``POWER_BANDS``.
    """
    data = np.asarray(data, dtype=np.float64)
    nperseg = min(data.shape[-1], 4 * sampling_hz)
    freqs, psd = signal.welch(data, fs=sampling_hz, nperseg=nperseg, axis=-1)
    powers = []
    for low, high in POWER_BANDS:
        band = (freqs >= low) & (freqs < high)
        powers.append(np.log(psd[..., band].sum(axis=-1) + 1e-12) if band.any() else np.zeros(data.shape[:2]))
    parts = [data.mean(axis=-1), data.std(axis=-1)] + powers
    return np.concatenate(parts, axis=1)


def fit_raw_baseline(kind: str, X: np.ndarray, y: np.ndarray, seed: int = 0) -> Pipeline:
    """Fit a standardized scikit-learn classifier on raw-signal features."""
    if kind == "random_forest":
        clf = RandomForestClassifier(n_estimators=100, random_state=seed % (1 << 32),
                                     class_weight="balanced")
    elif kind == "svm":
        clf = SVC(kernel="rbf", class_weight="balanced", random_state=seed % (1 << 32))
    elif kind == "logistic":
        clf = LogisticRegression(max_iter=2000, class_weight="balanced")
    else:
        raise InvalidConfig(f"kind must be one of {FEATURE_BASELINES}, got {kind!r}")
    model = make_pipeline(StandardScaler(), clf)
    model.fit(X, y)
    return model


def evaluate_raw_baseline(model: Pipeline, X: np.ndarray, y: np.ndarray, k: int,
                          categories: Optional[Sequence[str]] = None) -> MetricReport:
    return metrics(confusion(y, model.predict(X), k), categories)


class RawCnnBaseline(nn.Module):
    """Plain two-layer 1-D CNN over raw (C, L) epochs, softmax output."""

    def __init__(self, c: int, num_classes: int, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv1d(c, width, kernel_size=7, padding=3),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(width, 2 * width, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.AdaptiveAvgPool1d(1),
            nn.Flatten(),
        )
        self.classifier = nn.Linear(2 * width, num_classes)

    def forward(self, epochs: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.classifier(self.features(epochs)), dim=1)


def fit_cnn_baseline(data: np.ndarray, labels: np.ndarray, num_classes: int, seed: int = 0,
                     steps: int = 200, batch_size: int = 32, learning_rate: float = 1e-3) -> RawCnnBaseline:
    """
    Train a ``RawCnnBaseline`` with Adam on class-weighted cross-entropy.

    Raises:
        LengthMismatch: ``data`` and ``labels`` differ in length.
        MissingCategory: a class has no training epochs.
        DivergenceDetected: the loss stops being finite.
    """
    data = np.asarray(data, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(data) != len(labels):
        raise LengthMismatch(f"{len(data)} epochs for {len(labels)} labels")
    if steps < 1 or batch_size < 1:
        raise InvalidConfig(f"steps and batch_size must be positive, got {steps} and {batch_size}")
    weights = torch.as_tensor(class_weights(labels, num_classes), dtype=torch.float32)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "cnn-init"))
        model = RawCnnBaseline(data.shape[1], num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    rng = make_rng(seed, "cnn-batches")

    model.train()
    for step in range(1, steps + 1):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        loss = weighted_ce_loss(model(torch.from_numpy(data[idx])), torch.from_numpy(labels[idx]), weights)
        if not torch.isfinite(loss):
            raise DivergenceDetected("CNN baseline loss is not finite", step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.eval()
    logger.info("CNN baseline trained for %d steps, final loss %.4f", steps, float(loss.detach()))
    return model


def run_raw_baselines(train: EpochDataset, test: EpochDataset, task: str,
                      kinds: Sequence[str] = BASELINE_KINDS, categories: Optional[Sequence[str]] = None,
                      seed: int = 0, cnn_steps: int = 200) -> Dict[str, MetricReport]:
    """Fit each baseline kind on ``train`` and score it on ``test``."""
    unknown = [kind for kind in kinds if kind not in BASELINE_KINDS]
    if unknown:
        raise InvalidConfig(f"baseline kinds must be among {BASELINE_KINDS}, got {unknown}")
    y_train, y_test = train.labels_for(task), test.labels_for(task)
    k = TASKS[task]
    reports: Dict[str, MetricReport] = {}
    if any(kind in FEATURE_BASELINES for kind in kinds):
        X_train = raw_signal_features(train.data, train.sampling_hz)
        X_test = raw_signal_features(test.data, test.sampling_hz)
    for kind in kinds:
        if kind == "cnn":
            model = fit_cnn_baseline(train.data, y_train, k, seed=derive_seed(seed, "cnn"), steps=cnn_steps)
            reports[kind] = classification_report(model, test.data, y_test, categories)
        else:
            reports[kind] = evaluate_raw_baseline(fit_raw_baseline(kind, X_train, y_train, seed),
                                                  X_test, y_test, k, categories)
        logger.info("baseline=%s accuracy=%.4f macro_f1=%.4f", kind, reports[kind].accuracy,
                    reports[kind].macro_f1)
    return reports
