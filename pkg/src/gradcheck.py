"""
Finite-difference verification of analytic gradients.

Checks the pre-training objective and both classification losses through a
tiny double-precision model, parameter tensor by parameter tensor, plus each
loss function with respect to its own inputs. Instances that fall within
``KINK_MARGIN`` of the triplet hinge are redrawn.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from src.losses import (
    IcclConfig,
    cosine_recon_loss,
    iccl_hinge_arguments,
    iccl_loss,
    mse_recon_loss,
    weighted_bce_loss,
    weighted_ce_loss,
)
from src.masking import draw_selection
from src.model import ModelConfig, PsgMae
from src.utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-3
INPUT_TOLERANCE = 1e-4
KINK_MARGIN = 1e-6
MAX_REDRAWS = 20


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        c=2, n_patch=3, l_prime=4, d_model=8, encoder_layers=1, attention_heads=1,
        feedforward_dim=8, decoder_hidden=8, head_branch_kernels=(3, 5, 7), head_channels=4,
        num_classes=3, dropout_rate=0.0,
    )


@dataclass
class GradcheckEntry:
    loss: str
    tensor: str
    max_relative_error: float
    elements: int
    passed: bool
    tolerance: float = DEFAULT_TOLERANCE


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry] = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE
    input_tolerance: float = INPUT_TOLERANCE
    step: float = DEFAULT_STEP
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(entry.passed for entry in self.entries)

    @property
    def max_relative_error(self) -> float:
        return max((e.max_relative_error for e in self.entries), default=0.0)

    def by_loss(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for entry in self.entries:
            out[entry.loss] = max(out.get(entry.loss, 0.0), entry.max_relative_error)
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.__dict__ for e in self.entries],
                            columns=["loss", "tensor", "max_relative_error", "elements", "passed", "tolerance"])

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "input_tolerance": self.input_tolerance,
            "step": self.step,
            "redraws": self.redraws,
            "max_relative_error": self.max_relative_error,
            "per_loss": self.by_loss(),
            "entries": [e.__dict__ for e in self.entries],
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude of the tensor."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every element of ``tensor``."""
    grad = np.zeros(tensor.numel())
    flat = tensor.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + h
            plus = float(fn())
            flat[i] = original - h
            minus = float(fn())
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tuple(tensor.shape))


def check_tensors(name: str, fn: Callable[[], torch.Tensor], tensors: Dict[str, torch.Tensor],
                  h: float, tolerance: float) -> List[GradcheckEntry]:
    for tensor in tensors.values():
        tensor.grad = None
    fn().backward()
    entries = []
    for tensor_name, tensor in tensors.items():
        analytic = tensor.grad.detach().numpy().copy() if tensor.grad is not None else np.zeros(tuple(tensor.shape))
        numeric = numeric_gradient(fn, tensor, h)
        error = relative_error(analytic, numeric)
        entries.append(GradcheckEntry(name, tensor_name, error, tensor.numel(), error < tolerance, tolerance))
    return entries


def _near_kink(model: PsgMae, segments: torch.Tensor, selection: torch.Tensor, alpha: float) -> bool:
    keep = selection.unsqueeze(-1).to(segments.dtype)
    with torch.no_grad():
        recon_hat = model.reconstruct(segments * keep)
        recon_bar = model.reconstruct(segments * (1.0 - keep))
        hinge = iccl_hinge_arguments(recon_hat, recon_bar, alpha)
    return bool((hinge.abs() < KINK_MARGIN).any())


def gradcheck(model_cfg_small: Optional[ModelConfig] = None, seed: int = 0, batch: int = 2,
              h: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE,
              iccl_cfg: Optional[IcclConfig] = None, input_tolerance: float = INPUT_TOLERANCE) -> GradcheckReport:
    """
    Compare autograd gradients with central finite differences.

    Covers the pre-training objective, weighted cross-entropy and weighted
    binary cross-entropy through every parameter tensor of a tiny model, and
    every loss with respect to its inputs. Runs in float64 with dropout off.
    Model gradients are judged at ``tolerance``; the losses on their own
    inputs at the tighter ``input_tolerance``.
    """
    cfg = (model_cfg_small or tiny_model_config()).replace(dropout_rate=0.0)
    iccl_cfg = iccl_cfg or IcclConfig()
    report = GradcheckReport(tolerance=tolerance, input_tolerance=input_tolerance, step=h)
    rng = make_rng(seed, "gradcheck")

    model = PsgMae.initialized(cfg, derive_seed(seed, "init")).double().eval()
    for _ in range(MAX_REDRAWS):
        segments = torch.from_numpy(rng.standard_normal((batch, cfg.n_patch, cfg.c, cfg.l_prime)))
        selection = torch.from_numpy(draw_selection(cfg.c, cfg.n_patch, rng, batch=batch))
        if not _near_kink(model, segments, selection, iccl_cfg.margin_alpha):
            break
        report.redraws += 1
    params = dict(model.named_parameters())

    def pretrain_objective() -> torch.Tensor:
        return model.forward_pretrain(segments, selection, iccl_cfg=iccl_cfg).loss.objective

    report.entries += check_tensors("pretrain_total", pretrain_objective, params, h, tolerance)

    labels = torch.from_numpy(rng.integers(0, cfg.num_classes, size=batch))
    weights = torch.from_numpy(rng.uniform(0.5, 2.0, size=cfg.num_classes))

    def ce_objective() -> torch.Tensor:
        return weighted_ce_loss(model.classify(segments), labels, weights)

    report.entries += check_tensors("weighted_ce", ce_objective, params, h, tolerance)

    binary = copy.deepcopy(model)
    binary.reset_head(2, derive_seed(seed, "head-init"))
    binary = binary.double().eval()
    binary_labels = torch.from_numpy(rng.integers(0, 2, size=batch)).double()
    positive_weight = float(rng.uniform(0.5, 3.0))

    def bce_objective() -> torch.Tensor:
        return weighted_bce_loss(binary.classify(segments)[:, 1], binary_labels, positive_weight)

    report.entries += check_tensors("weighted_bce", bce_objective, dict(binary.named_parameters()), h, tolerance)
    report.entries += _input_checks(cfg, rng, h, input_tolerance, iccl_cfg)

    logger.info("Gradient check %s: max relative error %.3e over %d tensors",
                "passed" if report.passed else "FAILED", report.max_relative_error, len(report.entries))
    return report


def _input_checks(cfg: ModelConfig, rng: np.random.Generator, h: float, tolerance: float,
                  iccl_cfg: IcclConfig) -> List[GradcheckEntry]:
    """Gradients of each loss with respect to its own inputs."""
    shape = (cfg.n_patch, cfg.c, cfg.l_prime)
    target = torch.from_numpy(rng.standard_normal(shape))
    visible = torch.from_numpy(draw_selection(cfg.c, cfg.n_patch, rng))
    entries = []

    recon = torch.from_numpy(rng.standard_normal(shape)).requires_grad_(True)
    entries += check_tensors("cosine_recon", lambda: cosine_recon_loss(recon, target, visible)[0],
                             {"recon": recon}, h, tolerance)
    entries += check_tensors("mse_recon", lambda: mse_recon_loss(recon, target, visible)[0],
                             {"recon": recon}, h, tolerance)

    for _ in range(MAX_REDRAWS):
        a = torch.from_numpy(rng.standard_normal(shape)).requires_grad_(True)
        b = torch.from_numpy(rng.standard_normal(shape)).requires_grad_(True)
        with torch.no_grad():
            if not (iccl_hinge_arguments(a, b, iccl_cfg.margin_alpha).abs() < KINK_MARGIN).any():
                break
    entries += check_tensors("iccl", lambda: iccl_loss(a, b, iccl_cfg), {"recon_a": a, "recon_b": b}, h, tolerance)

    logits = torch.from_numpy(rng.standard_normal((4, cfg.num_classes))).requires_grad_(True)
    labels = torch.from_numpy(rng.integers(0, cfg.num_classes, size=4))
    weights = torch.from_numpy(rng.uniform(0.5, 2.0, size=cfg.num_classes))
    entries += check_tensors("weighted_ce_input",
                             lambda: weighted_ce_loss(torch.softmax(logits, dim=1), labels, weights),
                             {"logits": logits}, h, tolerance)

    probabilities = torch.from_numpy(rng.uniform(0.05, 0.95, size=4)).requires_grad_(True)
    binary = torch.from_numpy(rng.integers(0, 2, size=4)).double()
    entries += check_tensors("weighted_bce_input", lambda: weighted_bce_loss(probabilities, binary, 1.7),
                             {"probabilities": probabilities}, h, tolerance)
    return entries
