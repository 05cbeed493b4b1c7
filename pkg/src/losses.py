"""
Training objectives.

Pre-training combines a channel-level reconstruction loss (cosine + MSE,
computed on the selected cells of each mask side) with an inter-channel
triplet loss between the two reconstructed sides. Fine-tuning uses
class-weighted cross-entropy (multi-class) or binary cross-entropy.

Reconstruction tensors use the segmented layout (B, N, C, L') or (N, C, L');
cell selections are boolean (B, N, C) or (N, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch

from src.errors import DimensionMismatch, InvalidConfig, NotStochastic, TooFewPatches
from src.utils.config_base import ConfigSection

PROB_EPSILON = 1e-12
RECON_TARGETS = ("visible", "hidden", "all")


@dataclass
class IcclConfig(ConfigSection):
    """Inter-channel contrastive loss settings."""
    margin_alpha: float = 1.0
    symmetric: bool = False

    def validate(self) -> None:
        if self.margin_alpha < 0:
            raise InvalidConfig(f"margin_alpha must be non-negative, got {self.margin_alpha}")


@dataclass
class LossBreakdown:
    """
    Scalar pre-training losses of one step.

    ``objective`` is the differentiable tensor that is back-propagated; it
    equals ``total`` unless the contrastive term is switched off.
    """
    l_cos: float
    l_mse: float
    l_recon: float
    l_cl: float
    total: float
    per_channel_cos: List[float] = field(default_factory=list)
    per_channel_mse: List[float] = field(default_factory=list)
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict[str, object]:
        return {
            "l_cos": self.l_cos,
            "l_mse": self.l_mse,
            "l_recon": self.l_recon,
            "l_cl": self.l_cl,
            "total": self.total,
            "per_channel_cos": list(self.per_channel_cos),
            "per_channel_mse": list(self.per_channel_mse),
        }


@dataclass
class ReconTerms:
    """Reconstruction losses of one mask side."""
    l_cos: torch.Tensor
    l_mse: torch.Tensor
    per_channel_cos: torch.Tensor
    per_channel_mse: torch.Tensor


@dataclass
class LossParts:
    """Component losses of one epoch pair, input to ``total_pretrain_loss``."""
    hat: ReconTerms
    bar: ReconTerms
    l_cl: torch.Tensor


def _batched(recon: torch.Tensor, target: torch.Tensor,
             visible: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if recon.shape != target.shape:
        raise DimensionMismatch(f"recon shape {tuple(recon.shape)} != target shape {tuple(target.shape)}")
    if recon.dim() == 3:
        recon, target = recon.unsqueeze(0), target.unsqueeze(0)
        if visible is not None:
            visible = visible.unsqueeze(0)
    if recon.dim() != 4:
        raise DimensionMismatch(f"Expected (B, N, C, L') or (N, C, L'), got {tuple(recon.shape)}")
    if visible is None:
        visible = torch.ones(recon.shape[:3], dtype=torch.bool, device=recon.device)
    if tuple(visible.shape) != tuple(recon.shape[:3]):
        raise DimensionMismatch(f"visible shape {tuple(visible.shape)} != {tuple(recon.shape[:3])}")
    return recon, target, visible.to(recon.dtype)


def _channel_average(per_channel: torch.Tensor, included: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Average (B, C) per-channel values over included channels, then over epochs.

    Returns the scalar and the batch-averaged per-channel vector (channels that
    are never included report 0).
    """
    n_included = included.sum(dim=1)
    per_epoch = (per_channel * included).sum(dim=1) / n_included.clamp_min(1.0)
    scalar = per_epoch.mean()
    counts = included.sum(dim=0)
    channel_mean = (per_channel * included).sum(dim=0) / counts.clamp_min(1.0)
    return scalar, channel_mean


def safe_norm(x: torch.Tensor, dim: int = -1) -> Tuple[torch.Tensor, torch.Tensor]:
    """Euclidean norm with a finite gradient at zero; also returns the non-zero flag."""
    squared = (x * x).sum(dim=dim)
    nonzero = squared > 0
    norm = torch.where(nonzero, torch.sqrt(torch.where(nonzero, squared, torch.ones_like(squared))),
                       torch.zeros_like(squared))
    return norm, nonzero


def cosine_recon_loss(recon: torch.Tensor, target: torch.Tensor,
                      visible: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Channel-level cosine reconstruction loss.

    For channel c: 1 - mean over selected subsegments of cos(r_n^c, x_n^c), with
    the cosine taken over the L' samples of the subsegment. The scalar is the
    mean over channels with at least one selected subsegment. A zero-norm
    vector has cosine 0.

    Returns:
        (scalar, per_channel) tensors.
    """
    recon, target, weight = _batched(recon, target, visible)
    dot = (recon * target).sum(dim=-1)
    recon_norm, recon_nonzero = safe_norm(recon)
    target_norm, target_nonzero = safe_norm(target)
    both = recon_nonzero & target_nonzero
    denom = torch.where(both, recon_norm * target_norm, torch.ones_like(dot))
    cos = torch.where(both, dot / denom, torch.zeros_like(dot))

    n_visible = weight.sum(dim=1)
    included = (n_visible > 0).to(recon.dtype)
    per_channel = 1.0 - (cos * weight).sum(dim=1) / n_visible.clamp_min(1.0)
    return _channel_average(per_channel, included)


def mse_recon_loss(recon: torch.Tensor, target: torch.Tensor,
                   visible: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Channel-level mean squared error over selected time steps.

    For channel c: mean squared difference over the samples of its selected
    subsegments; the scalar is the mean over channels with any selected cell.

    Returns:
        (scalar, per_channel) tensors.
    """
    recon, target, weight = _batched(recon, target, visible)
    l_prime = recon.shape[-1]
    squared = ((recon - target) ** 2).sum(dim=-1)
    n_visible = weight.sum(dim=1)
    included = (n_visible > 0).to(recon.dtype)
    per_channel = (squared * weight).sum(dim=1) / (n_visible.clamp_min(1.0) * l_prime)
    return _channel_average(per_channel, included)


def _pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """(B, N, D) -> (B, N, N) Euclidean distances."""
    diff = x.unsqueeze(2) - x.unsqueeze(1)
    distance, _ = safe_norm(diff)
    return distance


def _triplet_terms(anchor: torch.Tensor, positive: torch.Tensor, alpha: float) -> torch.Tensor:
    n_patch = anchor.shape[1]
    positive_distance, _ = safe_norm(anchor - positive)
    negative_mean = _pairwise_distances(anchor).sum(dim=2) / (n_patch - 1)
    return positive_distance - negative_mean + alpha


def iccl_hinge_arguments(recon_a: torch.Tensor, recon_b: torch.Tensor,
                         margin_alpha: float = 1.0) -> torch.Tensor:
    """Pre-hinge values d(a_i, b_i) - mean_j d(a_i, a_j) + alpha, shape (B, N)."""
    if recon_a.shape != recon_b.shape:
        raise DimensionMismatch(f"recon_a shape {tuple(recon_a.shape)} != recon_b shape {tuple(recon_b.shape)}")
    if recon_a.dim() == 3:
        recon_a, recon_b = recon_a.unsqueeze(0), recon_b.unsqueeze(0)
    if recon_a.dim() != 4:
        raise DimensionMismatch(f"Expected (B, N, C, L') or (N, C, L'), got {tuple(recon_a.shape)}")
    if recon_a.shape[1] < 2:
        raise TooFewPatches(f"ICCL needs at least 2 subsegments, got {recon_a.shape[1]}")
    anchor = recon_a.flatten(start_dim=2)
    positive = recon_b.flatten(start_dim=2)
    return _triplet_terms(anchor, positive, margin_alpha)


def iccl_loss(recon_a: torch.Tensor, recon_b: torch.Tensor,
              cfg: Optional[IcclConfig] = None) -> torch.Tensor:
    """
    Inter-channel contrastive triplet loss.

    Anchor i is subsegment i of ``recon_a`` flattened to D = C * L' values; its
    positive is subsegment i of ``recon_b`` and its negatives are the other
    subsegments of ``recon_a``. Each term is
    max(0, d(a_i, b_i) - mean_{j != i} d(a_i, a_j) + alpha); the loss is the
    mean over anchors (and over the batch).

    With ``cfg.symmetric`` the loss also anchors on ``recon_b`` and averages
    both directions.
    """
    cfg = cfg or IcclConfig()
    terms = torch.relu(iccl_hinge_arguments(recon_a, recon_b, cfg.margin_alpha))
    loss = terms.mean()
    if cfg.symmetric:
        reverse = torch.relu(iccl_hinge_arguments(recon_b, recon_a, cfg.margin_alpha))
        loss = 0.5 * (loss + reverse.mean())
    return loss


def target_selection(selection: torch.Tensor, recon_target: str) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Cells each mask side is scored on.

    ``selection`` marks the channels of mask M. Returns the (hat, bar) cell
    selections for the given ``recon_target`` mode.
    """
    if recon_target == "visible":
        return selection, ~selection
    if recon_target == "hidden":
        return ~selection, selection
    if recon_target == "all":
        ones = torch.ones_like(selection)
        return ones, ones
    raise InvalidConfig(f"recon_target must be one of {RECON_TARGETS}, got {recon_target!r}")


def recon_terms(recon: torch.Tensor, target: torch.Tensor, cells: torch.Tensor) -> ReconTerms:
    l_cos, per_cos = cosine_recon_loss(recon, target, cells)
    l_mse, per_mse = mse_recon_loss(recon, target, cells)
    return ReconTerms(l_cos=l_cos, l_mse=l_mse, per_channel_cos=per_cos, per_channel_mse=per_mse)


def total_pretrain_loss(parts: LossParts, iccl_enabled: bool = True) -> LossBreakdown:
    """
    Combine the component losses into the pre-training objective.

    Both mask sides contribute their mean: L_COS = (cos_hat + cos_bar) / 2 and
    likewise for L_MSE; L_Recon = L_COS + L_MSE and total = L_Recon + L_CL.
    With ``iccl_enabled`` false L_CL is still reported but left out of the
    back-propagated objective.
    """
    l_cos_t = 0.5 * (parts.hat.l_cos + parts.bar.l_cos)
    l_mse_t = 0.5 * (parts.hat.l_mse + parts.bar.l_mse)
    l_cl_t = torch.as_tensor(parts.l_cl)
    recon_t = l_cos_t + l_mse_t
    objective = recon_t + l_cl_t if iccl_enabled else recon_t

    per_cos = 0.5 * (parts.hat.per_channel_cos + parts.bar.per_channel_cos)
    per_mse = 0.5 * (parts.hat.per_channel_mse + parts.bar.per_channel_mse)

    l_cos = float(l_cos_t.detach())
    l_mse = float(l_mse_t.detach())
    l_cl = float(l_cl_t.detach())
    l_recon = l_cos + l_mse
    return LossBreakdown(
        l_cos=l_cos,
        l_mse=l_mse,
        l_recon=l_recon,
        l_cl=l_cl,
        total=l_recon + l_cl,
        per_channel_cos=[float(v) for v in torch.as_tensor(per_cos).detach().reshape(-1)],
        per_channel_mse=[float(v) for v in torch.as_tensor(per_mse).detach().reshape(-1)],
        objective=objective,
    )


def terms_from_values(l_cos: float, l_mse: float, channels: int = 1) -> ReconTerms:
    """ReconTerms holding constant values, for assembling breakdowns by hand."""
    return ReconTerms(
        l_cos=torch.tensor(float(l_cos), dtype=torch.float64),
        l_mse=torch.tensor(float(l_mse), dtype=torch.float64),
        per_channel_cos=torch.full((channels,), float(l_cos), dtype=torch.float64),
        per_channel_mse=torch.full((channels,), float(l_mse), dtype=torch.float64),
    )


def _check_stochastic(probabilities: torch.Tensor) -> None:
    with torch.no_grad():
        if (probabilities < 0).any():
            raise NotStochastic("Probabilities must be non-negative")
        row_sums = probabilities.sum(dim=1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), rtol=0.0, atol=1e-6):
            raise NotStochastic("Probability rows must sum to 1 within 1e-6")


def weighted_ce_loss(probabilities: torch.Tensor, labels: torch.Tensor,
                     weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Class-weighted multi-class cross-entropy.

    -(1/N) sum_i sum_j w_j * y_ij * log p_ij with p clamped to [1e-12, 1].

    Args:
        probabilities: (N, K) row-stochastic matrix.
        labels: (N, K) one-hot rows or (N,) category indices.
        weights: (K,) class weights; all ones when omitted.
    """
    if probabilities.dim() != 2:
        raise DimensionMismatch(f"probabilities must be (N, K), got {tuple(probabilities.shape)}")
    n, k = probabilities.shape
    if labels.dim() == 1:
        if labels.shape[0] != n:
            raise DimensionMismatch(f"{labels.shape[0]} labels for {n} rows")
        if labels.numel() and (labels.min() < 0 or labels.max() >= k):
            raise DimensionMismatch(f"label indices must lie in [0, {k})")
        labels = torch.nn.functional.one_hot(labels.long(), num_classes=k)
    if tuple(labels.shape) != (n, k):
        raise DimensionMismatch(f"labels shape {tuple(labels.shape)} != probabilities shape {(n, k)}")
    if weights is None:
        weights = torch.ones(k, dtype=probabilities.dtype, device=probabilities.device)
    weights = torch.as_tensor(weights, dtype=probabilities.dtype, device=probabilities.device)
    if tuple(weights.shape) != (k,):
        raise DimensionMismatch(f"weights must have length {k}, got {tuple(weights.shape)}")
    _check_stochastic(probabilities)

    log_p = torch.log(probabilities.clamp(PROB_EPSILON, 1.0))
    labels = labels.to(probabilities.dtype)
    return -(labels * log_p * weights.unsqueeze(0)).sum() / n


def weighted_bce_loss(probabilities: torch.Tensor, labels: torch.Tensor,
                      positive_weight: float = 1.0) -> torch.Tensor:
    """
    Binary cross-entropy with a weight on the positive term.

    -(1/N) sum_i [w_pos * y_i * log p_i + (1 - y_i) * log(1 - p_i)] with p
    clamped to [1e-12, 1 - 1e-12].
    """
    probabilities = probabilities.reshape(-1)
    labels = labels.reshape(-1)
    if probabilities.shape != labels.shape:
        raise DimensionMismatch(f"{labels.numel()} labels for {probabilities.numel()} probabilities")
    p = probabilities.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
    y = labels.to(probabilities.dtype)
    per_sample = positive_weight * y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)
    return -per_sample.sum() / probabilities.numel()
