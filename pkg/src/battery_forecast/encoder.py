"""
Dual-view encoder.

SOC view: one strided convolution per cycle along the SOC axis, then a shared
feed-forward encoder over the cycle axis for each SOC interval.
Temporal view: CyclePatch embedding per cycle, positionwise residual blocks,
and projected cycle descriptors.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .core import ModelConfig

logger = logging.getLogger(__name__)

N_CHANNELS = 4
N_DESCRIPTORS = 2


def soc_token_count(L: int, P: int) -> int:
    return (L - P) // P + 1


def sinusoidal_encoding(length: int, d: int) -> torch.Tensor:
    """Fixed encoding: sin on even columns, cos on odd columns."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    encoding = torch.zeros(length, d, dtype=torch.float64)
    encoding[:, 0::2] = torch.sin(position * div)
    encoding[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return encoding.to(torch.get_default_dtype())


@dataclass
class DualViewTokens:
    temporal: torch.Tensor  # [B, S_max, d]
    soc: Optional[torch.Tensor]  # [B, M, d], None without the SOC view
    tokens: torch.Tensor  # [B, S_max + M, d], positional encoding added
    key_mask: torch.Tensor  # [B, S_max + M], True = attendable


class IntraCycleBlock(nn.Module):
    """affine -> GELU -> affine, residual add, LayerNorm."""

    def __init__(self, d: int, d_ff: int, dropout: float):
        super().__init__()
        self.linear1 = nn.Linear(d, d_ff)
        self.linear2 = nn.Linear(d_ff, d)
        self.activation = nn.GELU()
        self.norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.dropout(self.linear2(self.activation(self.linear1(x)))))


class DualViewEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.use_soc_view = config.socview
        self.M = soc_token_count(config.L, config.P) if config.socview else 0

        if self.use_soc_view:
            self.soc_conv = nn.Conv1d(N_CHANNELS, d, kernel_size=config.P, stride=config.P)
            self.soc_encoder = nn.Sequential(
                nn.Linear(config.S_max * d, config.d_ffs),
                nn.GELU(),
                nn.Linear(config.d_ffs, d),
            )
            self.soc_dropout = nn.Dropout(config.dropout)

        self.cycle_patch = nn.Linear(N_CHANNELS * config.L, d)
        self.intra_blocks = nn.ModuleList(
            [IntraCycleBlock(d, config.d_ff, config.dropout) for _ in range(config.L_intra)]
        )
        self.descriptor_proj = nn.Linear(N_DESCRIPTORS, d)
        self.register_buffer("positional", sinusoidal_encoding(config.S_max + self.M, d), persistent=False)

    def soc_patchify(self, X: torch.Tensor, cycle_mask: torch.Tensor) -> torch.Tensor:
        """[B, S_max, L, 4] -> Z_hat [B, S_max, d, M]; padded cycles stay zero."""
        B, S_max, L, C = X.shape
        per_cycle = X.reshape(B * S_max, L, C).transpose(1, 2)  # [B*S_max, 4, L]
        patches = self.soc_conv(per_cycle)  # [B*S_max, d, M]
        patches = patches.reshape(B, S_max, patches.shape[1], patches.shape[2])
        return patches * cycle_mask[:, :, None, None].to(patches.dtype)

    def soc_view_encode(self, Z_hat: torch.Tensor) -> torch.Tensor:
        """Flatten each SOC interval over the cycle axis; shared encoder -> [B, M, d]."""
        B, S_max, d, M = Z_hat.shape
        per_interval = Z_hat.permute(0, 3, 1, 2).reshape(B, M, S_max * d)
        return self.soc_dropout(self.soc_encoder(per_interval))

    def cyclepatch_embed(self, X: torch.Tensor) -> torch.Tensor:
        B, S_max, L, C = X.shape
        return self.cycle_patch(X.reshape(B, S_max, L * C))

    def intra_cycle_encode(self, embeddings: torch.Tensor) -> torch.Tensor:
        for block in self.intra_blocks:
            embeddings = block(embeddings)
        return embeddings

    def inject_descriptors(self, H_temporal: torch.Tensor, X_f: torch.Tensor) -> torch.Tensor:
        return H_temporal + self.descriptor_proj(X_f)

    def assemble_tokens(self, temporal: torch.Tensor, soc: Optional[torch.Tensor],
                        cycle_mask: torch.Tensor) -> DualViewTokens:
        key_mask = cycle_mask.bool()
        if soc is not None:
            sequence = torch.cat([temporal, soc], dim=1)
            soc_keys = torch.ones(soc.shape[0], soc.shape[1], dtype=torch.bool, device=soc.device)
            key_mask = torch.cat([key_mask, soc_keys], dim=1)
        else:
            sequence = temporal
        tokens = sequence + self.positional[: sequence.shape[1]].to(sequence.dtype)
        return DualViewTokens(temporal=temporal, soc=soc, tokens=tokens, key_mask=key_mask)

    def forward(self, X: torch.Tensor, X_f: torch.Tensor, cycle_mask: torch.Tensor) -> DualViewTokens:
        temporal = self.inject_descriptors(self.intra_cycle_encode(self.cyclepatch_embed(X)), X_f)
        soc = None
        if self.use_soc_view:
            soc = self.soc_view_encode(self.soc_patchify(X, cycle_mask))
        return self.assemble_tokens(temporal, soc, cycle_mask)
