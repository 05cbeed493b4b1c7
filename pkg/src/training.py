"""
Pre-training, fine-tuning and the ICCL ablation runner.

Every random stream of a run is derived from ``TrainConfig.seed``: batch
sampling ("batches"), mask draws ("masks"), dropout ("dropout"), parameter
initialization ("init"), head initialization ("head-init") and the fixed
validation masks ("val-masks").
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src.checkpoint import Checkpoint
from src.errors import (
    ConfigMismatch,
    DivergenceDetected,
    InvalidConfig,
    IoFailure,
    LabelModeMismatch,
    NonFiniteActivation,
)
from src.evaluation import evaluation_selection, export_trace, predict_probabilities, reconstruction_mse_report
from src.losses import RECON_TARGETS, IcclConfig, weighted_bce_loss, weighted_ce_loss
from src.masking import draw_selection
from src.metrics import confusion, metrics
from src.model import ModelConfig, PsgMae, to_segments
from src.splits import TASKS, EpochDataset, class_weights
from src.utils.config_base import ConfigSection
from src.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
MASK_REFRESH_MODES = ("step", "fixed")
STAGE_NAMES = ("W", "N1", "N2", "N3", "R")
OSA_NAMES = ("normal", "osa_event")


@dataclass
class TrainConfig(ConfigSection):
    """Optimization settings shared by pre-training and fine-tuning."""
    batch_size: int = 32
    max_steps: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    early_stop_patience: int = 0
    eval_every: int = 100
    log_every: int = 50
    iccl_enabled: bool = True
    recon_target: str = "visible"
    mask_refresh: str = "step"
    checkpoint_every: int = 0
    grad_clip: float = 5.0
    eval_max_epochs: int = 512

    def validate(self) -> None:
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise InvalidConfig("batch_size and learning_rate must be positive")
        if self.max_steps < 0 or self.early_stop_patience < 0 or self.checkpoint_every < 0:
            raise InvalidConfig("max_steps, early_stop_patience and checkpoint_every must be non-negative")
        if self.eval_every <= 0 or self.log_every <= 0 or self.eval_max_epochs <= 0:
            raise InvalidConfig("eval_every, log_every and eval_max_epochs must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.recon_target not in RECON_TARGETS:
            raise InvalidConfig(f"recon_target must be one of {RECON_TARGETS}, got {self.recon_target!r}")
        if self.mask_refresh not in MASK_REFRESH_MODES:
            raise InvalidConfig(f"mask_refresh must be one of {MASK_REFRESH_MODES}, got {self.mask_refresh!r}")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if not self.grad_clip > 0:
            raise InvalidConfig("grad_clip must be positive")


@dataclass
class HeadConfig(ConfigSection):
    """Downstream task settings."""
    task: str = "staging"
    freeze_encoder: bool = False

    def validate(self) -> None:
        if self.task not in TASKS:
            raise InvalidConfig(f"task must be one of {sorted(TASKS)}, got {self.task!r}")

    @property
    def num_classes(self) -> int:
        return TASKS[self.task]

    @property
    def categories(self) -> Tuple[str, ...]:
        return STAGE_NAMES if self.task == "staging" else OSA_NAMES


@dataclass
class RunLog:
    """Append-only record of a training run."""
    config: Dict[str, object] = field(default_factory=dict)
    steps: List[Dict[str, object]] = field(default_factory=list)
    evals: List[Dict[str, object]] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def append_step(self, record: Dict[str, object]) -> None:
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError(f"Step {record['step']} does not follow {self.steps[-1]['step']}")
        self.steps.append(record)

    def append_eval(self, record: Dict[str, object]) -> None:
        if self.evals and record["step"] < self.evals[-1]["step"]:
            raise ValueError(f"Evaluation step {record['step']} precedes {self.evals[-1]['step']}")
        self.evals.append(record)

    def loss_sequence(self, key: str = "total") -> List[float]:
        return [float(record[key]) for record in self.steps]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(record, sort_keys=False) + "\n" for record in self.steps)

    def write(self, run_dir: Union[str, Path], name: str = "runlog") -> Tuple[Path, Path]:
        """Write ``<name>.ndjson`` (step records) and ``<name>_evals.json``."""
        run_dir = Path(run_dir)
        steps_path = run_dir / f"{name}.ndjson"
        evals_path = run_dir / f"{name}_evals.json"
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            steps_path.write_text(self.to_ndjson(), encoding="utf-8")
            evals_path.write_text(json.dumps(self.evals, indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"Cannot write run log to {run_dir}: {exc}") from exc
        return steps_path, evals_path

    @classmethod
    def read_steps(cls, path: Union[str, Path]) -> "RunLog":
        path = Path(path)
        if not path.exists():
            raise IoFailure(f"Run log not found: {path}")
        log = cls()
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                log.append_step(json.loads(line))
        return log


def build_optimizer(params: Sequence[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def _clip(params: Sequence[torch.nn.Parameter], cfg: TrainConfig, step: int) -> bool:
    norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    clipped = bool(norm > cfg.grad_clip)
    if clipped:
        logger.warning("step=%d gradient norm %.3f clipped to %.1f", step, float(norm), cfg.grad_clip)
    return clipped


def _check_dataset(model_cfg: ModelConfig, dataset: EpochDataset) -> None:
    if dataset.C != model_cfg.c or dataset.L != model_cfg.epoch_length:
        raise ConfigMismatch(
            f"Dataset epochs are ({dataset.C}, {dataset.L}); model expects "
            f"({model_cfg.c}, {model_cfg.n_patch} x {model_cfg.l_prime})"
        )


def _batch_tensor(data: np.ndarray, indices: np.ndarray, n_patch: int) -> torch.Tensor:
    return to_segments(torch.from_numpy(np.ascontiguousarray(data[indices])), n_patch)


def _draw_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def _capped(dataset: EpochDataset, limit: int) -> EpochDataset:
    return dataset if len(dataset) <= limit else dataset.subset(np.arange(limit))


def evaluate_pretrain(model: PsgMae, data: np.ndarray, selection: np.ndarray,
                      iccl_cfg: IcclConfig, recon_target: str, iccl_enabled: bool,
                      batch_size: int = 64) -> Dict[str, object]:
    """Validation losses over fixed masks, averaged over batches weighted by size."""
    model.eval()
    totals = {"l_cos": 0.0, "l_mse": 0.0, "l_cl": 0.0, "total": 0.0, "objective": 0.0}
    per_channel = np.zeros(model.cfg.c)
    count = 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            out = model.forward_pretrain(
                _batch_tensor(data, idx, model.cfg.n_patch),
                torch.from_numpy(selection[idx]),
                iccl_cfg=iccl_cfg, recon_target=recon_target, iccl_enabled=iccl_enabled,
            )
            weight = len(idx)
            loss = out.loss
            totals["l_cos"] += weight * loss.l_cos
            totals["l_mse"] += weight * loss.l_mse
            totals["l_cl"] += weight * loss.l_cl
            totals["total"] += weight * loss.total
            totals["objective"] += weight * float(loss.objective.detach())
            per_channel += weight * np.asarray(loss.per_channel_mse)
            count += weight
    result: Dict[str, object] = {key: value / max(count, 1) for key, value in totals.items()}
    result["l_recon"] = result["l_cos"] + result["l_mse"]
    result["per_channel_mse"] = (per_channel / max(count, 1)).tolist()
    return result


def pretrain(train: EpochDataset, val: EpochDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
             iccl_cfg: Optional[IcclConfig] = None, run_dir: Optional[Union[str, Path]] = None,
             progress: bool = True) -> Tuple[Checkpoint, RunLog]:
    """
    Self-supervised pre-training with complementary masks.

    Each step samples a batch, draws a fresh mask pair per epoch (or reuses
    the epoch's fixed pair when ``mask_refresh == "fixed"``), runs both sides
    through the shared network and updates on the combined objective.
    Validation runs at step 0 and every ``eval_every`` steps; the checkpoint
    with the lowest validation objective is returned.

    Raises:
        ConfigMismatch: dataset epochs do not fit ``model_cfg``.
        DivergenceDetected: the loss became non-finite.
    """
    iccl_cfg = iccl_cfg or IcclConfig()
    _check_dataset(model_cfg, train)
    _check_dataset(model_cfg, val)
    seed = train_cfg.seed
    started = time.perf_counter()

    model = PsgMae.initialized(model_cfg, derive_seed(seed, "init"))
    optimizer = build_optimizer(list(model.parameters()), train_cfg)
    batch_rng = make_rng(seed, "batches")
    mask_rng = make_rng(seed, "masks")
    fixed_selection = None
    if train_cfg.mask_refresh == "fixed":
        fixed_selection = draw_selection(model_cfg.c, model_cfg.n_patch, mask_rng, batch=len(train))

    val_set = _capped(val, train_cfg.eval_max_epochs)
    val_selection = evaluation_selection(len(val_set), model_cfg.c, model_cfg.n_patch, seed)
    log = RunLog(config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "iccl": iccl_cfg.to_dict()})

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint.from_model(model, seed=seed, center_mode=train.center_mode,
                                     recon_target=train_cfg.recon_target, iccl=iccl_cfg, step=step)

    def validate(step: int) -> float:
        result = evaluate_pretrain(model, val_set.data, val_selection, iccl_cfg,
                                   train_cfg.recon_target, train_cfg.iccl_enabled)
        result["step"] = step
        log.append_eval(result)
        logger.info("step=%d split=val loss=%.6f l_cos=%.6f l_mse=%.6f l_cl=%.6f",
                    step, result["total"], result["l_cos"], result["l_mse"], result["l_cl"])
        return float(result["objective"])

    best_value = validate(0) if len(val_set) else float("inf")
    best = snapshot(0)
    stale = 0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "dropout"))
        steps = tqdm(range(1, train_cfg.max_steps + 1), desc="pretrain", disable=not progress, leave=False)
        for step in steps:
            model.train()
            idx = _draw_batch(batch_rng, len(train), train_cfg.batch_size)
            if fixed_selection is None:
                selection = draw_selection(model_cfg.c, model_cfg.n_patch, mask_rng, batch=len(idx))
            else:
                selection = fixed_selection[idx]
            try:
                out = model.forward_pretrain(
                    _batch_tensor(train.data, idx, model_cfg.n_patch), torch.from_numpy(selection),
                    iccl_cfg=iccl_cfg, recon_target=train_cfg.recon_target,
                    iccl_enabled=train_cfg.iccl_enabled,
                )
            except NonFiniteActivation as exc:
                raise DivergenceDetected(str(exc), step=step, last_good=best) from exc
            loss = out.loss
            if not torch.isfinite(loss.objective):
                raise DivergenceDetected("Non-finite pre-training loss", step=step, last_good=best)

            optimizer.zero_grad()
            loss.objective.backward()
            clipped = _clip(list(model.parameters()), train_cfg, step)
            optimizer.step()

            log.append_step({
                "step": step,
                "l_cos": loss.l_cos,
                "l_mse": loss.l_mse,
                "l_recon": loss.l_recon,
                "l_cl": loss.l_cl,
                "total": loss.total,
                "lr": train_cfg.learning_rate,
                "clipped": clipped,
            })
            if step % train_cfg.log_every == 0:
                logger.info("step=%d split=train loss=%.6f l_cos=%.6f l_mse=%.6f l_cl=%.6f lr=%g",
                            step, loss.total, loss.l_cos, loss.l_mse, loss.l_cl, train_cfg.learning_rate)
                steps.set_postfix(loss=f"{loss.total:.4f}")
            if run_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                snapshot(step).save(Path(run_dir) / f"checkpoint_step{step:06d}.psgc")

            if len(val_set) and (step % train_cfg.eval_every == 0 or step == train_cfg.max_steps):
                value = validate(step)
                if value < best_value:
                    best_value, best, stale = value, snapshot(step), 0
                else:
                    stale += 1
                    if train_cfg.early_stop_patience and stale >= train_cfg.early_stop_patience:
                        logger.info("Early stopping at step %d (best step %d)", step, best.step)
                        break
        if not len(val_set) and train_cfg.max_steps:
            best = snapshot(log.steps[-1]["step"])

    log.wall_clock_seconds = time.perf_counter() - started
    logger.info("Pre-training finished: best step %d, validation objective %.6f", best.step, best_value)
    return best, log


def _task_loss(probabilities: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, task: str) -> torch.Tensor:
    if task == "staging":
        return weighted_ce_loss(probabilities, labels, weights)
    return weighted_bce_loss(probabilities[:, 1], labels, positive_weight=float(weights[1] / weights[0]))


def finetune(train: EpochDataset, val: EpochDataset, pretrained: Checkpoint, head_cfg: HeadConfig,
             train_cfg: TrainConfig, progress: bool = True) -> Tuple[Checkpoint, RunLog]:
    """
    Train a fresh classification head on top of the pre-trained encoder.

    Class weights come from the training subset only. The encoder is updated
    too unless ``head_cfg.freeze_encoder`` is set. The checkpoint with the
    best validation macro F1 is returned.

    Raises:
        LabelModeMismatch: the datasets carry no labels for the task.
        ConfigMismatch: dataset and checkpoint disagree on shape or normalization.
        DivergenceDetected: the loss became non-finite.
    """
    task = head_cfg.task
    if task == "staging" and train.label_mode == "osa2":
        raise LabelModeMismatch("Staging head requested on osa2-labelled data")
    y_train = train.labels_for(task)
    y_val = val.labels_for(task) if len(val) else np.zeros(0, dtype=np.int64)
    if train.center_mode != pretrained.center_mode:
        raise ConfigMismatch(
            f"Dataset center_mode {train.center_mode!r} differs from checkpoint's {pretrained.center_mode!r}"
        )
    _check_dataset(pretrained.model_config, train)
    seed = train_cfg.seed
    started = time.perf_counter()

    model = pretrained.build_model()
    model.reset_head(head_cfg.num_classes, derive_seed(seed, "head-init"))
    model.set_encoder_trainable(not head_cfg.freeze_encoder)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = build_optimizer(params, train_cfg)
    weights = torch.as_tensor(class_weights(y_train, head_cfg.num_classes), dtype=torch.float32)
    batch_rng = make_rng(seed, "batches")
    val_set = _capped(val, train_cfg.eval_max_epochs)
    y_val = y_val[:len(val_set)]
    n_patch = model.cfg.n_patch
    log = RunLog(config={"head": head_cfg.to_dict(), "train": train_cfg.to_dict(),
                         "class_weights": weights.tolist()})

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint.from_model(model, seed=seed, center_mode=pretrained.center_mode,
                                     recon_target=pretrained.recon_target, iccl=pretrained.iccl,
                                     task=task, step=step)

    def validate(step: int) -> float:
        predictions = predict_probabilities(model, val_set.data).argmax(axis=1)
        report = metrics(confusion(y_val, predictions, head_cfg.num_classes), head_cfg.categories)
        log.append_eval({"step": step, "accuracy": report.accuracy, "macro_f1": report.macro_f1})
        logger.info("step=%d split=val accuracy=%.4f macro_f1=%.4f", step, report.accuracy, report.macro_f1)
        return report.macro_f1

    best_value = validate(0) if len(val_set) else -1.0
    best = snapshot(0)
    stale = 0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "dropout"))
        steps = tqdm(range(1, train_cfg.max_steps + 1), desc=f"finetune-{task}", disable=not progress, leave=False)
        for step in steps:
            model.train()
            idx = _draw_batch(batch_rng, len(train), train_cfg.batch_size)
            try:
                probabilities = model.classify(_batch_tensor(train.data, idx, n_patch))
            except NonFiniteActivation as exc:
                raise DivergenceDetected(str(exc), step=step, last_good=best) from exc
            loss = _task_loss(probabilities, torch.from_numpy(y_train[idx]), weights, task)
            if not torch.isfinite(loss):
                raise DivergenceDetected("Non-finite fine-tuning loss", step=step, last_good=best)

            optimizer.zero_grad()
            loss.backward()
            clipped = _clip(params, train_cfg, step)
            optimizer.step()
            log.append_step({"step": step, "loss": float(loss.detach()), "lr": train_cfg.learning_rate,
                            "clipped": clipped})
            if step % train_cfg.log_every == 0:
                logger.info("step=%d split=train loss=%.6f lr=%g", step, float(loss.detach()), train_cfg.learning_rate)

            if len(val_set) and (step % train_cfg.eval_every == 0 or step == train_cfg.max_steps):
                value = validate(step)
                if value > best_value:
                    best_value, best, stale = value, snapshot(step), 0
                else:
                    stale += 1
                    if train_cfg.early_stop_patience and stale >= train_cfg.early_stop_patience:
                        logger.info("Early stopping at step %d (best step %d)", step, best.step)
                        break
        if not len(val_set) and train_cfg.max_steps:
            best = snapshot(log.steps[-1]["step"])

    log.wall_clock_seconds = time.perf_counter() - started
    logger.info("Fine-tuning (%s) finished: best step %d, validation MF1 %.4f", task, best.step, best_value)
    return best, log


@dataclass
class AblationReport:
    """Held-out per-channel reconstruction MSE of the with/without-ICCL arms."""
    channel_names: Tuple[str, ...]
    seeds: List[int]
    mse: Dict[str, Dict[int, List[float]]]
    step0_total: Dict[str, Dict[int, float]]
    eeg_channels: List[int]

    def table(self) -> pd.DataFrame:
        rows = [
            {"seed": seed, "arm": arm, "channel": self.channel_names[c], "mse": values[c]}
            for arm, by_seed in self.mse.items()
            for seed, values in by_seed.items()
            for c in range(len(self.channel_names))
        ]
        return pd.DataFrame(rows, columns=["seed", "arm", "channel", "mse"])

    def lower_arm(self, seed: int) -> List[str]:
        """Per channel, the arm with the lower MSE for one seed."""
        with_iccl, without = self.mse["with_iccl"][seed], self.mse["without_iccl"][seed]
        return ["with_iccl" if a < b else "without_iccl" for a, b in zip(with_iccl, without)]

    def eeg_wins(self) -> int:
        """Seeds where the ICCL arm has the lower mean MSE over the EEG channels."""
        wins = 0
        for seed in self.seeds:
            with_iccl = np.mean([self.mse["with_iccl"][seed][c] for c in self.eeg_channels])
            without = np.mean([self.mse["without_iccl"][seed][c] for c in self.eeg_channels])
            wins += int(with_iccl < without)
        return wins

    def to_dict(self) -> Dict[str, object]:
        return {
            "channels": list(self.channel_names),
            "seeds": list(self.seeds),
            "mse": {arm: {str(s): v for s, v in by_seed.items()} for arm, by_seed in self.mse.items()},
            "step0_total": {arm: {str(s): v for s, v in by_seed.items()} for arm, by_seed in self.step0_total.items()},
            "lower_arm": {str(s): self.lower_arm(s) for s in self.seeds},
            "eeg_wins": self.eeg_wins(),
        }


def run_ablation(train: EpochDataset, val: EpochDataset, test: EpochDataset, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, iccl_cfg: Optional[IcclConfig] = None,
                 seeds: Sequence[int] = (0,), trace_dir: Optional[Union[str, Path]] = None,
                 progress: bool = False) -> AblationReport:
    """
    Train the with-ICCL and without-ICCL arms for every seed and compare their
    held-out reconstruction MSE. Both arms of a seed share every random stream,
    so they start from identical parameters.
    """
    arms = {"with_iccl": True, "without_iccl": False}
    mse: Dict[str, Dict[int, List[float]]] = {arm: {} for arm in arms}
    step0: Dict[str, Dict[int, float]] = {arm: {} for arm in arms}
    for seed in seeds:
        for arm, enabled in arms.items():
            cfg = train_cfg.replace(seed=int(seed), iccl_enabled=enabled)
            checkpoint, log = pretrain(train, val, model_cfg, cfg, iccl_cfg, progress=progress)
            report = reconstruction_mse_report(checkpoint, test, seed=int(seed))
            mse[arm][int(seed)] = report.per_channel_mse
            step0[arm][int(seed)] = float(log.evals[0]["total"]) if log.evals else float("nan")
            if trace_dir is not None:
                export_trace(checkpoint.build_model(), test, 0, Path(trace_dir) / f"trace_{arm}_seed{seed}.csv",
                             seed=int(seed), recon_target=checkpoint.recon_target)
            logger.info("Ablation seed=%d arm=%s mean MSE %.6f", seed, arm, report.mean_mse)
    eeg = [i for i, name in enumerate(train.channel_names) if name.upper().startswith("EEG")] or [0]
    return AblationReport(
        channel_names=tuple(train.channel_names),
        seeds=[int(s) for s in seeds],
        mse=mse,
        step0_total=step0,
        eeg_channels=eeg,
    )
