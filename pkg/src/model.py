"""
Masked autoencoder network for multichannel epochs.

One token per subsegment: the (C, L') block is flattened and linearly embedded
to ``d_model``, a learned positional encoding is added, and a stack of
pre-norm self-attention blocks encodes the token sequence. A token-wise MLP
decoder maps every token back to a full (C, L') block. Both mask sides run
through the same parameters.

For downstream tasks a multi-branch 1-D convolution head reads the encoder
tokens: parallel kernels of sizes 3/5/7 over the token axis, concatenation,
a 1x1 reduction, global average pooling and an MLP with softmax output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn

from src.errors import InvalidConfig, NonFiniteActivation, ShapeMismatch
from src.losses import (
    IcclConfig,
    LossBreakdown,
    LossParts,
    iccl_loss,
    recon_terms,
    target_selection,
    total_pretrain_loss,
)
from src.utils.config_base import ConfigSection

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig(ConfigSection):
    """Network dimensions; defaults follow a (5, 3000) epoch cut into 10 subsegments."""
    c: int = 5
    n_patch: int = 10
    l_prime: int = 300
    d_model: int = 64
    encoder_layers: int = 2
    attention_heads: int = 4
    feedforward_dim: int = 128
    decoder_hidden: int = 128
    head_branch_kernels: Tuple[int, ...] = (3, 5, 7)
    head_channels: int = 32
    num_classes: int = 5
    dropout_rate: float = 0.1

    def validate(self) -> None:
        for name in ("c", "n_patch", "l_prime", "d_model", "encoder_layers", "attention_heads",
                     "feedforward_dim", "decoder_hidden", "head_channels", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.n_patch < 2:
            raise InvalidConfig("n_patch must be at least 2")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be at least 2")
        if self.d_model % self.attention_heads != 0:
            raise InvalidConfig(
                f"d_model={self.d_model} must be divisible by attention_heads={self.attention_heads}"
            )
        if not self.head_branch_kernels or any(k % 2 == 0 or k <= 0 for k in self.head_branch_kernels):
            raise InvalidConfig(f"head kernels must be positive odd integers, got {self.head_branch_kernels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def token_dim(self) -> int:
        return self.c * self.l_prime

    @property
    def epoch_length(self) -> int:
        return self.n_patch * self.l_prime


class PretrainOutput(NamedTuple):
    recon_hat: torch.Tensor
    recon_bar: torch.Tensor
    loss: LossBreakdown


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block with a feedforward sublayer."""

    def __init__(self, d_model: int, heads: int, feedforward_dim: int, dropout_rate: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attention = nn.MultiheadAttention(d_model, heads, dropout=0.0, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.feedforward = nn.Sequential(
            nn.Linear(d_model, feedforward_dim),
            nn.GELU(),
            nn.Dropout(dropout_rate),
            nn.Linear(feedforward_dim, d_model),
        )

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.norm1(x)
        attended, weights = self.attention(h, h, h, need_weights=True, average_attn_weights=False)
        x = x + attended
        x = x + self.feedforward(self.norm2(x))
        return x, weights


class FeatureDecomposerHead(nn.Module):
    """Multi-branch temporal convolution head over encoder tokens."""

    def __init__(self, d_model: int, kernels: Tuple[int, ...], channels: int,
                 num_classes: int, dropout_rate: float):
        super().__init__()
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.Conv1d(d_model, channels, kernel_size=k, padding=k // 2),
                nn.GELU(),
            )
            for k in kernels
        ])
        self.reduce = nn.Conv1d(channels * len(kernels), channels, kernel_size=1)
        self.global_pool = nn.AdaptiveAvgPool1d(1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 2 * channels),
            nn.GELU(),
            nn.Dropout(dropout_rate),
            nn.Linear(2 * channels, num_classes),
        )

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        x = features.transpose(1, 2)  # (B, d_model, N)
        x = torch.cat([branch(x) for branch in self.branches], dim=1)
        x = self.reduce(x)
        x = self.global_pool(x).flatten(1)
        return self.mlp(x)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(features), dim=-1)


def init_parameters(module: nn.Module) -> None:
    """Uniform fan-in scaling for weights, zeros for biases."""
    for name, param in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(param)
        elif param.dim() < 2:
            continue  # layer-norm gains keep their ones
        else:
            fan_in = param.shape[-1] if "positional" in name else param[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(param, -bound, bound)


class PsgMae(nn.Module):
    """Shared encoder-decoder with an attachable classification head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Linear(cfg.token_dim, cfg.d_model)
        self.positional = nn.Parameter(torch.zeros(cfg.n_patch, cfg.d_model))
        self.blocks = nn.ModuleList([
            EncoderBlock(cfg.d_model, cfg.attention_heads, cfg.feedforward_dim, cfg.dropout_rate)
            for _ in range(cfg.encoder_layers)
        ])
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.decoder = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.decoder_hidden),
            nn.GELU(),
            nn.Linear(cfg.decoder_hidden, cfg.token_dim),
        )
        self.head = self._build_head(cfg.num_classes)

    @classmethod
    def initialized(cls, cfg: ModelConfig, seed: int) -> "PsgMae":
        """Build a model whose parameters are a pure function of (cfg, seed)."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(cfg)
            init_parameters(model)
        return model

    def _build_head(self, num_classes: int) -> FeatureDecomposerHead:
        return FeatureDecomposerHead(
            self.cfg.d_model, tuple(self.cfg.head_branch_kernels), self.cfg.head_channels,
            num_classes, self.cfg.dropout_rate,
        )

    def reset_head(self, num_classes: int, seed: int) -> None:
        """Replace the classification head with a freshly initialized one."""
        self.cfg = self.cfg.replace(num_classes=num_classes)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            head = self._build_head(num_classes)
            init_parameters(head)
        param = next(self.parameters())
        self.head = head.to(dtype=param.dtype, device=param.device)
        logger.info("Classification head reset to %d classes", num_classes)

    def encoder_parameters(self) -> List[nn.Parameter]:
        """Parameters of the embedding, positional encoding and encoder stack."""
        params = list(self.embedding.parameters()) + [self.positional]
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.final_norm.parameters())
        return params

    def encoder_parameter_names(self) -> List[str]:
        prefixes = ("embedding.", "positional", "blocks.", "final_norm.")
        return [name for name, _ in self.named_parameters() if name.startswith(prefixes)]

    def set_encoder_trainable(self, trainable: bool) -> None:
        for param in self.encoder_parameters():
            param.requires_grad_(trainable)

    def _check_segments(self, segments: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.n_patch, self.cfg.c, self.cfg.l_prime)
        if segments.dim() == 3:
            segments = segments.unsqueeze(0)
        if segments.dim() != 4 or tuple(segments.shape[1:]) != expected:
            raise ShapeMismatch(f"Expected segments of shape (B, {expected}), got {tuple(segments.shape)}")
        return segments

    def embed(self, segments: torch.Tensor) -> torch.Tensor:
        """(B, N, C, L') masked subsegments -> (B, N, d_model) tokens with positions added."""
        segments = self._check_segments(segments)
        tokens = self.embedding(segments.flatten(start_dim=2))
        return tokens + self.positional.unsqueeze(0)

    def encode(self, tokens: torch.Tensor,
               return_attention: bool = False):
        """
        Run the self-attention stack.

        Returns the (B, N, d_model) feature sequence, and with
        ``return_attention`` the per-layer (B, heads, N, N) attention weights.

        Raises:
            NonFiniteActivation: an activation became non-finite.
        """
        if not torch.isfinite(tokens).all():
            raise NonFiniteActivation("Non-finite input tokens", layer=0)
        attention = []
        x = tokens
        for index, block in enumerate(self.blocks):
            x, weights = block(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivation("Non-finite encoder activation", layer=index + 1)
            attention.append(weights)
        x = self.final_norm(x)
        if return_attention:
            return x, attention
        return x

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        """(B, N, d_model) -> (B, N, C, L') reconstruction, one MLP shared by all tokens."""
        if features.dim() != 3 or features.shape[-1] != self.cfg.d_model:
            raise ShapeMismatch(f"Expected features (B, N, {self.cfg.d_model}), got {tuple(features.shape)}")
        out = self.decoder(features)
        return out.reshape(*features.shape[:2], self.cfg.c, self.cfg.l_prime)

    def head_forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, N, d_model) features -> (B, num_classes) category probabilities."""
        if features.dim() != 3 or features.shape[-1] != self.cfg.d_model:
            raise ShapeMismatch(f"Expected features (B, N, {self.cfg.d_model}), got {tuple(features.shape)}")
        probabilities = self.head(features)
        if not torch.isfinite(probabilities).all():
            raise NonFiniteActivation("Non-finite head output")
        return probabilities

    def reconstruct(self, masked_segments: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(self.embed(masked_segments)))

    def features(self, segments: torch.Tensor) -> torch.Tensor:
        """Encoder tokens of unmasked input."""
        return self.encode(self.embed(segments))

    def classify(self, segments: torch.Tensor) -> torch.Tensor:
        """Category probabilities for unmasked (B, N, C, L') input."""
        return self.head_forward(self.features(segments))

    def forward_pretrain(self, segments: torch.Tensor, selection: torch.Tensor,
                         iccl_cfg: Optional[IcclConfig] = None, recon_target: str = "visible",
                         iccl_enabled: bool = True) -> PretrainOutput:
        """
        Pre-training pass over both complementary mask sides.

        Args:
            segments: (B, N, C, L') unmasked input.
            selection: (B, N, C) boolean, True where a channel belongs to mask M.
            iccl_cfg: contrastive loss settings.
            recon_target: which cells each side is scored on.
            iccl_enabled: include L_CL in the back-propagated objective.

        Returns:
            (recon_hat, recon_bar, LossBreakdown)
        """
        segments = self._check_segments(segments)
        if selection.dim() == 2:
            selection = selection.unsqueeze(0)
        if tuple(selection.shape) != tuple(segments.shape[:3]):
            raise ShapeMismatch(f"selection shape {tuple(selection.shape)} != {tuple(segments.shape[:3])}")
        selection = selection.to(torch.bool)
        keep = selection.unsqueeze(-1).to(segments.dtype)

        recon_hat = self.reconstruct(segments * keep)
        recon_bar = self.reconstruct(segments * (1.0 - keep))

        cells_hat, cells_bar = target_selection(selection, recon_target)
        parts = LossParts(
            hat=recon_terms(recon_hat, segments, cells_hat),
            bar=recon_terms(recon_bar, segments, cells_bar),
            l_cl=iccl_loss(recon_hat, recon_bar, iccl_cfg),
        )
        return PretrainOutput(recon_hat, recon_bar, total_pretrain_loss(parts, iccl_enabled=iccl_enabled))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def to_segments(epochs: torch.Tensor, n_patch: int) -> torch.Tensor:
    """(B, C, L) -> (B, N, C, L') without copying data order."""
    b, c, length = epochs.shape
    if length % n_patch:
        raise ShapeMismatch(f"L={length} not divisible by n_patch={n_patch}")
    return epochs.reshape(b, c, n_patch, length // n_patch).permute(0, 2, 1, 3)


def from_segments(segments: torch.Tensor) -> torch.Tensor:
    """(B, N, C, L') -> (B, C, L)."""
    b, n, c, l_prime = segments.shape
    return segments.permute(0, 2, 1, 3).reshape(b, c, n * l_prime)
