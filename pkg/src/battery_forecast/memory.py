"""
Degradation pattern memory: learnable prototype slots retrieved by top-2
cosine similarity, a trajectory autoencoder that supervises them, and the
gated fusion head that produces the forecast.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .exceptions import DegenerateQuery

logger = logging.getLogger(__name__)

TOP_K = 2
COLLAPSE_NORM = 1e-8


@dataclass
class RetrievalResult:
    indices: torch.Tensor  # [B, 2], highest similarity first
    alpha: torch.Tensor  # [B, 2]
    h_mem: torch.Tensor  # [B, d]
    similarities: torch.Tensor  # [B, N_mem]


def _unit_rows(rows: int, d: int) -> torch.Tensor:
    return F.normalize(torch.randn(rows, d), dim=-1)


def retrieve_top2(q_mem: torch.Tensor, slots: torch.Tensor) -> RetrievalResult:
    """Cosine similarity against every slot, top-2 (ties to the lower index), softmax over the pair."""
    if (q_mem.norm(dim=-1) == 0).any():
        raise DegenerateQuery("Memory query has zero norm")
    similarities = F.normalize(q_mem, dim=-1) @ F.normalize(slots, dim=-1).T
    order = torch.sort(similarities, dim=-1, descending=True, stable=True).indices
    indices = order[:, :TOP_K]
    alpha = F.softmax(torch.gather(similarities, 1, indices), dim=-1)
    h_mem = (alpha.unsqueeze(-1) * slots[indices]).sum(dim=1)
    return RetrievalResult(indices=indices, alpha=alpha, h_mem=h_mem, similarities=similarities)


class PatternMemory(nn.Module):
    """N_mem unit-norm slots plus the feed-forward map from decoder states to a memory query."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.slots = nn.Parameter(_unit_rows(config.N_mem, config.d))
        self.query_net = nn.Sequential(
            nn.Flatten(start_dim=1),
            nn.Linear(config.s_bar * config.d, config.d_mem),
            nn.GELU(),
            nn.Linear(config.d_mem, config.d),
        )

    def memory_query(self, H: torch.Tensor) -> torch.Tensor:
        return self.query_net(H)

    def forward(self, H: torch.Tensor) -> RetrievalResult:
        return retrieve_top2(self.memory_query(H), self.slots)

    @torch.no_grad()
    def reinitialize_collapsed_slots(self) -> int:
        """Redraw slots whose norm fell below the collapse threshold; returns how many."""
        collapsed = self.slots.norm(dim=-1) < COLLAPSE_NORM
        count = int(collapsed.sum())
        if count:
            fresh = _unit_rows(count, self.slots.shape[1]).to(self.slots)
            self.slots[collapsed] = fresh
            logger.warning(f"Re-initialized {count} collapsed memory slot(s)")
        return count


class TrajectoryAutoencoder(nn.Module):
    """Maps masked normalized trajectories to d-vectors and back to T_max curves."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.d_ffs
        self.encoder = nn.Sequential(
            nn.Linear(config.T_max, width),
            nn.GELU(),
            nn.Linear(width, width),
            nn.GELU(),
            nn.Linear(width, config.d),
        )
        self.decoder = nn.Sequential(
            nn.Linear(config.d, width),
            nn.GELU(),
            nn.Linear(width, width),
            nn.GELU(),
            nn.Linear(width, config.T_max),
        )

    def encode_trajectory(self, y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.encoder(y * mask)

    def decode_trajectory(self, e_trajectory: torch.Tensor) -> torch.Tensor:
        return self.decoder(e_trajectory)


class FusionHead(nn.Module):
    """
    H_bar = FFN(Flatten(H)); with memory, beta = sigmoid(FFN([H_bar; h_mem]))
    and the forecast is Head(H_bar + beta * h_mem). Without memory, Head(H_bar).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d
        self.summarize = nn.Sequential(
            nn.Flatten(start_dim=1),
            nn.Linear(config.s_bar * d, config.d_ffs),
            nn.GELU(),
            nn.Linear(config.d_ffs, d),
        )
        self.gate = None
        if config.mdpm:
            self.gate = nn.Sequential(
                nn.Linear(2 * d, config.d_mem),
                nn.GELU(),
                nn.Linear(config.d_mem, d),
            )
        self.head = nn.Linear(d, config.T_max)

    def forward(self, H: torch.Tensor, h_mem: Optional[torch.Tensor] = None
                ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        H_bar = self.summarize(H)
        if self.gate is None or h_mem is None:
            return self.head(H_bar), None
        beta = torch.sigmoid(self.gate(torch.cat([H_bar, h_mem], dim=-1)))
        return self.head(H_bar + beta * h_mem), beta


def alignment_loss(h_mem: torch.Tensor, e_trajectory: torch.Tensor,
                   eps: float = 1e-12) -> Tuple[torch.Tensor, int]:
    """Mean (1 - cosine) over samples where both vectors are nonzero; returns (loss, skipped)."""
    valid = (h_mem.norm(dim=-1) > eps) & (e_trajectory.norm(dim=-1) > eps)
    skipped = int((~valid).sum())
    if not valid.any():
        return h_mem.sum() * 0.0, skipped
    cosine = F.cosine_similarity(h_mem[valid], e_trajectory[valid], dim=-1)
    return (1.0 - cosine).mean(), skipped
