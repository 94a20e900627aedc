"""
Aging-condition-aware decoder: condition prior, condition-modulated
multi-head attention, and the post-norm decoder stack over learnable queries.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .exceptions import AllKeysMasked

logger = logging.getLogger(__name__)


@dataclass
class ConditionPrior:
    e_ac: torch.Tensor  # [B, d]
    E_hat: torch.Tensor  # [B, s_bar, d]


@dataclass
class DecoderOutput:
    H: torch.Tensor  # [B, s_bar, d]
    cross_attention: Optional[torch.Tensor]  # final layer, [B, h, s_bar, n_keys]
    self_attention: List[torch.Tensor]


class ConditionPriorNet(nn.Module):
    """e_ac = z_ac W1 + b1, then one affine map d -> d per query row."""

    def __init__(self, d_enc: int, d: int, s_bar: int):
        super().__init__()
        self.W1 = nn.Linear(d_enc, d)
        self.W2 = nn.Parameter(torch.empty(s_bar, d, d))
        self.b2 = nn.Parameter(torch.empty(s_bar, d))
        bound = 1.0 / math.sqrt(d)
        nn.init.uniform_(self.W2, -bound, bound)
        nn.init.uniform_(self.b2, -bound, bound)

    def forward(self, z_ac: torch.Tensor) -> ConditionPrior:
        e_ac = self.W1(z_ac)
        E_hat = torch.einsum("bd,sde->bse", e_ac, self.W2) + self.b2
        return ConditionPrior(e_ac=e_ac, E_hat=E_hat)


class ConditionAwareAttention(nn.Module):
    """
    Multi-head attention whose query input is shifted by E_hat before projection.
    With E_hat None (or zero) it is standard scaled dot-product attention.
    """

    def __init__(self, d: int, h: int, dropout: float = 0.0):
        super().__init__()
        if d % h:
            raise ValueError(f"d={d} is not divisible by h={h}")
        self.d = d
        self.h = h
        self.d_head = d // h
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.reshape(B, n, self.h, self.d_head).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                E_hat: Optional[torch.Tensor] = None,
                key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (output [B, n_q, d], weights [B, h, n_q, n_k]); key_mask True = attendable."""
        if E_hat is not None:
            query = query + E_hat
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if key_mask is not None:
            if (~key_mask).all(dim=-1).any():
                raise AllKeysMasked("Every key is masked for at least one sample")
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = F.softmax(scores, dim=-1)
        attended = self.dropout(weights) @ v
        B, _, n_q, _ = attended.shape
        merged = attended.transpose(1, 2).reshape(B, n_q, self.d)
        return self.out_proj(merged), weights


class ConditionAwareDecoderLayer(nn.Module):
    def __init__(self, d: int, h: int, d_ff: int, dropout: float):
        super().__init__()
        self.self_attn = ConditionAwareAttention(d, h, dropout)
        self.cross_attn = ConditionAwareAttention(d, h, dropout)
        self.linear1 = nn.Linear(d, d_ff)
        self.linear2 = nn.Linear(d_ff, d)
        self.activation = nn.GELU()
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, E_hat: Optional[torch.Tensor],
                key_mask: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        attended, self_weights = self.self_attn(x, x, x, E_hat)
        x = self.norm1(x + self.dropout1(attended))
        attended, cross_weights = self.cross_attn(x, memory, memory, E_hat, key_mask)
        x = self.norm2(x + self.dropout2(attended))
        ff = self.linear2(self.dropout(self.activation(self.linear1(x))))
        x = self.norm3(x + self.dropout3(ff))
        return x, self_weights, cross_weights


class ConditionAwareDecoder(nn.Module):
    """Learnable generic queries Q_g refined over the encoder tokens by L_de layers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.use_acquery = config.use_acquery
        self.use_acattention = config.use_acattention
        self.queries = nn.Parameter(torch.randn(config.s_bar, config.d) * 0.02)
        self.layers = nn.ModuleList([
            ConditionAwareDecoderLayer(config.d, config.h, config.d_ff, config.dropout)
            for _ in range(config.L_de)
        ])

    def initial_queries(self, batch_size: int, E_hat: Optional[torch.Tensor]) -> torch.Tensor:
        """H0 = Q_g + E_hat with ACQuery, else Q_g."""
        H = self.queries.unsqueeze(0).expand(batch_size, -1, -1)
        if self.use_acquery and E_hat is not None:
            H = H + E_hat
        return H

    def decode(self, X_de: torch.Tensor, tokens: torch.Tensor, E_hat: Optional[torch.Tensor],
               key_mask: Optional[torch.Tensor]) -> DecoderOutput:
        H = X_de
        cross = None
        self_maps: List[torch.Tensor] = []
        for layer in self.layers:
            H, self_weights, cross = layer(H, tokens, E_hat, key_mask)
            self_maps.append(self_weights)
        return DecoderOutput(H=H, cross_attention=cross, self_attention=self_maps)

    def forward(self, tokens: torch.Tensor, key_mask: torch.Tensor,
                E_hat: Optional[torch.Tensor] = None) -> DecoderOutput:
        X_de = self.initial_queries(tokens.shape[0], E_hat)
        attention_prior = E_hat if self.use_acattention else None
        return self.decode(X_de, tokens, attention_prior, key_mask)
