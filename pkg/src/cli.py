"""
Command-line interface.

Subcommands: gen-data, pretrain, finetune, evaluate, reconstruct, gradcheck,
export and ablate. Every command that writes a run directory locks it, writes
``config_snapshot.yaml`` and ``run.log`` beside its outputs, and maps toolkit
errors to exit codes (2 invalid arguments, 3 missing or corrupt input,
4 configuration mismatch, 5 numerical divergence or a failed gradient
check).
"""

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence

import numpy as np

from src.checkpoint import CHECKPOINT_NAME, Checkpoint
from src.config import AppConfig, load_config, run_lock, write_snapshot
from src.data_loading import load_recordings, write_manifest, write_recording
from src.errors import DivergenceDetected, GradientCheckFailed, InvalidConfig, NonDivisibleLength, PsgMaeError
from src.evaluation import (
    BASELINE_KINDS,
    classification_report,
    encode_features,
    export_features,
    export_loss_curve,
    export_plot_data,
    export_reports,
    export_trace,
    reconstruction_mse_report,
    run_raw_baselines,
    write_json,
)
from src.gradcheck import gradcheck
from src.metrics import cv_aggregate
from src.splits import EpochDataset, build_epoch_dataset, make_split, make_subject_folds
from src.synthetic import generate_cohort
from src.training import HeadConfig, RunLog, finetune, pretrain, run_ablation
from src.utils.logging_utils import detach_file_handlers, setup_logging

logger = logging.getLogger(__name__)


@contextmanager
def run_directory(out: Path, cfg: AppConfig) -> Iterator[Path]:
    """Lock ``out``, snapshot the merged config and tee logging into run.log."""
    with run_lock(out):
        write_snapshot(cfg, out)
        setup_logging(logging.getLogger().level, out / "run.log")
        try:
            yield out
        finally:
            detach_file_handlers()


def _fit_model_to_data(cfg: AppConfig, dataset: EpochDataset) -> AppConfig:
    n_patch = cfg.model.n_patch
    if dataset.L % n_patch:
        raise NonDivisibleLength(f"Epoch length {dataset.L} is not divisible by n_patch={n_patch}")
    cfg.model = cfg.model.replace(c=dataset.C, l_prime=dataset.L // n_patch)
    return cfg


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, {"synth": {
        "channel_count": args.channels,
        "epoch_count": args.epochs,
        "label_mode": args.mode,
        "event_rate": args.event_rate,
        "seed": args.seed,
        "sampling_hz": args.sampling_hz,
    }})
    out = Path(args.out)
    with run_directory(out, cfg):
        recordings = generate_cohort(cfg.synth, args.subjects)
        files = [write_recording(rec, out / f"{rec.subject_id}.psgr") for rec in recordings]
        write_manifest(out, recordings, files, extra={"synth": cfg.synth.to_dict()})
    print(f"Wrote {len(files)} recordings to {out}")
    return 0


def _common_train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "max_steps": args.steps,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "optimizer": args.optimizer,
    }


def cmd_pretrain(args: argparse.Namespace) -> int:
    train_overrides = _common_train_overrides(args)
    train_overrides.update({
        "iccl_enabled": False if args.no_iccl else None,
        "recon_target": args.recon_target,
        "mask_refresh": args.mask_refresh,
    })
    cfg = load_config(args.config, {
        "model": {"n_patch": args.n_patch},
        "iccl": {"margin_alpha": args.alpha, "symmetric": True if args.symmetric_iccl else None},
        "train": train_overrides,
        "norm": {"center_mode": args.center_mode},
    })
    dataset = build_epoch_dataset(load_recordings(args.data), cfg.norm)
    cfg = _fit_model_to_data(cfg, dataset)
    out = Path(args.out)
    with run_directory(out, cfg):
        train_idx, val_idx, test_idx = make_split(dataset, seed=cfg.train.seed, by_subject=args.by_subject)
        write_json({"train": train_idx.tolist(), "val": val_idx.tolist(), "test": test_idx.tolist()},
                   out / "split.json")
        try:
            checkpoint, log = pretrain(dataset.subset(train_idx), dataset.subset(val_idx), cfg.model,
                                       cfg.train, cfg.iccl, run_dir=out, progress=not args.quiet)
        except DivergenceDetected as exc:
            if exc.last_good is not None:
                exc.last_good.save(out / "checkpoint_last_good.psgc")
            raise
        checkpoint.save(out / CHECKPOINT_NAME)
        log.write(out)
        export_loss_curve(log.steps, out / "loss_curve.csv")
        report = reconstruction_mse_report(checkpoint, dataset.subset(test_idx), seed=cfg.train.seed)
        write_json(report.to_dict(), out / "recon_report.json")
    print(f"Best step {checkpoint.step}; test reconstruction MSE {report.mean_mse:.4f} "
          f"(predict-zero baseline {report.mean_baseline:.4f})")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    pretrained = Checkpoint.load(args.pretrained)
    cfg = load_config(args.config, {
        "train": _common_train_overrides(args),
        "head": {"task": args.task, "freeze_encoder": True if args.freeze_encoder else None},
        "norm": {"center_mode": args.center_mode or pretrained.center_mode},
    })
    cfg.model = pretrained.model_config
    dataset = build_epoch_dataset(load_recordings(args.data), cfg.norm)
    labels = dataset.labels_for(cfg.head.task)
    out = Path(args.out)
    with run_directory(out, cfg):
        plan = make_subject_folds(dataset, k=args.folds, seed=cfg.train.seed)
        write_json(plan.to_dict(), out / "folds.json")
        before = pretrained.build_model()
        reports = []
        for fold in range(plan.fold_count):
            fold_dir = out / f"fold_{fold}"
            train_idx, val_idx, test_idx = plan.fold_indices(dataset, fold)
            checkpoint, log = finetune(dataset.subset(train_idx), dataset.subset(val_idx), pretrained,
                                       cfg.head, cfg.train, progress=not args.quiet)
            checkpoint.save(fold_dir / CHECKPOINT_NAME)
            log.write(fold_dir)
            model = checkpoint.build_model()
            test = dataset.subset(test_idx)
            report = classification_report(model, test.data, labels[test_idx], cfg.head.categories)
            write_json(report.to_dict(), fold_dir / "report.json")
            export_features(encode_features(before, test.data), labels[test_idx], fold_dir / "features_before.csv")
            export_features(encode_features(model, test.data), labels[test_idx], fold_dir / "features_after.csv")
            logger.info("fold=%d accuracy=%.4f macro_f1=%.4f", fold, report.accuracy, report.macro_f1)
            reports.append(report)
        summary = cv_aggregate(reports)
        summary.to_csv(out / "cv_summary.csv", float_format="%.9g", lineterminator="\n")
        export_reports(reports, out / "fold_reports.csv")
    print(f"{cfg.head.task}: accuracy {summary.loc['accuracy', 'mean']:.4f} "
          f"+/- {summary.loc['accuracy', 'std']:.4f}, "
          f"MF1 {summary.loc['macro_f1', 'mean']:.4f} +/- {summary.loc['macro_f1', 'std']:.4f}")
    return 0


def _dataset_for_checkpoint(args: argparse.Namespace, checkpoint: Checkpoint) -> EpochDataset:
    cfg = load_config(args.config, {"norm": {"center_mode": args.center_mode or checkpoint.center_mode}})
    return build_epoch_dataset(load_recordings(args.data), cfg.norm)


def cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = _dataset_for_checkpoint(args, checkpoint)
    report = reconstruction_mse_report(checkpoint, dataset, recon_target=args.recon_target, seed=args.seed or 0)
    payload: Dict[str, Any] = {"reconstruction": report.to_dict()}
    if checkpoint.task is not None:
        head = HeadConfig(task=checkpoint.task)
        labels = dataset.labels_for(head.task)
        payload["classification"] = classification_report(
            checkpoint.build_model(), dataset.data, labels, head.categories).to_dict()
    if args.baselines:
        if checkpoint.task is None:
            raise InvalidConfig("--baselines needs a fine-tuned checkpoint")
        seed = args.seed or 0
        train_idx, val_idx, test_idx = make_split(dataset, seed=seed)
        baseline_reports = run_raw_baselines(
            dataset.subset(np.concatenate([train_idx, val_idx])), dataset.subset(test_idx), checkpoint.task,
            args.baselines, HeadConfig(task=checkpoint.task).categories, seed=seed, cnn_steps=args.baseline_steps)
        payload["baselines"] = {kind: scored.to_dict() for kind, scored in baseline_reports.items()}
        for kind, scored in baseline_reports.items():
            print(f"baseline {kind}: accuracy {scored.accuracy:.4f} MF1 {scored.macro_f1:.4f}")
    if args.out:
        cfg = load_config(args.config, {"norm": {"center_mode": dataset.center_mode}})
        cfg.model = checkpoint.model_config
        with run_directory(Path(args.out), cfg):
            write_json(payload, Path(args.out) / "evaluation.json")
    for name, mse, base in zip(report.channel_names, report.per_channel_mse, report.baseline_mse):
        print(f"{name}: mse {mse:.4f} baseline {base:.4f}")
    print(f"mean: mse {report.mean_mse:.4f} baseline {report.mean_baseline:.4f}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = _dataset_for_checkpoint(args, checkpoint)
    cfg = load_config(args.config, {"norm": {"center_mode": dataset.center_mode}})
    cfg.model = checkpoint.model_config
    out = Path(args.out)
    with run_directory(out, cfg):
        path = export_trace(checkpoint.build_model(), dataset, args.epoch_index,
                            out / f"trace_epoch{args.epoch_index}.csv", seed=args.seed or 0,
                            recon_target=checkpoint.recon_target)
    print(f"Wrote {path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradcheck(seed=args.seed or 0)
    if args.out:
        out = Path(args.out)
        with run_directory(out, load_config(args.config)):
            write_json(report.to_dict(), out / "gradcheck.json")
            report.to_frame().to_csv(out / "gradcheck.csv", index=False, lineterminator="\n")
    for loss, error in report.by_loss().items():
        print(f"{loss}: max relative error {error:.3e}")
    if not report.passed:
        failing = sorted({f"{e.loss}/{e.tensor}" for e in report.entries if not e.passed})
        raise GradientCheckFailed(report.max_relative_error, failing)
    print("PASSED")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    run = Path(args.run)
    checkpoint = Checkpoint.load(run)
    steps_path = run / "runlog.ndjson"
    steps = RunLog.read_steps(steps_path).steps if steps_path.exists() else None
    dataset = _dataset_for_checkpoint(args, checkpoint) if args.data else None
    model = checkpoint.build_model() if dataset is not None else None
    cfg = load_config(args.config, {"norm": {"center_mode": checkpoint.center_mode}})
    cfg.model = checkpoint.model_config
    out = Path(args.out)
    with run_directory(out, cfg):
        written = export_plot_data(out, steps=steps, model=model, dataset=dataset,
                                   epoch_index=args.epoch_index, seed=args.seed or 0)
    for path in written:
        print(f"Wrote {path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, {
        "model": {"n_patch": args.n_patch},
        "iccl": {"margin_alpha": args.alpha},
        "train": _common_train_overrides(args),
    })
    dataset = build_epoch_dataset(load_recordings(args.data), cfg.norm)
    cfg = _fit_model_to_data(cfg, dataset)
    out = Path(args.out)
    with run_directory(out, cfg):
        train_idx, val_idx, test_idx = make_split(dataset, seed=cfg.train.seed)
        report = run_ablation(dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx),
                              cfg.model, cfg.train, cfg.iccl, seeds=args.seeds,
                              trace_dir=out if args.traces else None, progress=not args.quiet)
        report.table().to_csv(out / "ablation.csv", index=False, float_format="%.9g", lineterminator="\n")
        write_json(report.to_dict(), out / "ablation.json")
    print(f"ICCL arm lower on EEG channels in {report.eeg_wins()} of {len(report.seeds)} seeds")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML config file (e.g. a config_snapshot.yaml)")
    parser.add_argument("--seed", type=int, default=None, help="Root seed")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")


def _add_training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", nargs="+", required=True, help="One or more data directories")
    parser.add_argument("--out", required=True, help="Run directory")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--optimizer", choices=["adam", "sgd"], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psgmae", description="Masked autoencoder toolkit for PSG epochs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate synthetic recordings")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--sampling-hz", type=int, default=None)
    p.add_argument("--mode", choices=["staging5", "osa2"], default=None)
    p.add_argument("--event-rate", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="Self-supervised pre-training")
    _add_common(p)
    _add_training(p)
    p.add_argument("--n-patch", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="ICCL margin")
    p.add_argument("--no-iccl", action="store_true", help="Leave L_CL out of the objective")
    p.add_argument("--symmetric-iccl", action="store_true")
    p.add_argument("--recon-target", choices=["visible", "hidden", "all"], default=None)
    p.add_argument("--mask-refresh", choices=["step", "fixed"], default=None)
    p.add_argument("--center-mode", choices=["median", "mean"], default=None)
    p.add_argument("--by-subject", action="store_true", help="Split whole subjects into train/val/test")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="Subject-wise cross-validated fine-tuning")
    _add_common(p)
    _add_training(p)
    p.add_argument("--task", choices=["staging", "osa"], required=True)
    p.add_argument("--pretrained", required=True, help="Pre-training run directory or checkpoint file")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--center-mode", choices=["median", "mean"], default=None)
    p.set_defaults(func=cmd_finetune)

    for name, func, help_text in (("evaluate", cmd_evaluate, "Reconstruction (and classification) report"),
                                  ("reconstruct", cmd_reconstruct, "Original-vs-reconstructed trace CSV")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", nargs="+", required=True)
        p.add_argument("--center-mode", choices=["median", "mean"], default=None)
        if name == "evaluate":
            p.add_argument("--recon-target", choices=["visible", "hidden", "all"], default=None)
            p.add_argument("--out", default=None)
            p.add_argument("--baselines", nargs="+", choices=BASELINE_KINDS, default=None,
                           help="Raw-signal baselines fitted on a train split and scored on its test part")
            p.add_argument("--baseline-steps", type=int, default=200, help="Training steps of the CNN baseline")
        else:
            p.add_argument("--epoch-index", type=int, default=0)
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="Plot-data CSVs from a run directory")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", nargs="+", default=None)
    p.add_argument("--center-mode", choices=["median", "mean"], default=None)
    p.add_argument("--epoch-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablate", help="With/without ICCL comparison over seeds")
    _add_common(p)
    _add_training(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--n-patch", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--traces", action="store_true", help="Export a reconstruction trace per arm")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except PsgMaeError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
