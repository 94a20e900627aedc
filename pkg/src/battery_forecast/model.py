"""
DegradationForecaster: dual-view encoder, condition prior, condition-aware
decoder, pattern memory and fusion head, assembled per ModelConfig flags.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import AgingCondition, ModelConfig
from .dataset import Batch, full_batch
from .decoder import ConditionAwareDecoder, ConditionPriorNet, DecoderOutput
from .embedder import ExternalEmbedder, ExternalEmbeddingTable, LookupEmbedder, build_vocabulary
from .encoder import DualViewEncoder, DualViewTokens
from .memory import FusionHead, PatternMemory, RetrievalResult, TrajectoryAutoencoder
from .preprocess import ProcessedSample

logger = logging.getLogger(__name__)


@dataclass
class ForecastOutput:
    y_hat: torch.Tensor  # [B, T_max], normalized SOH
    H: torch.Tensor  # [B, s_bar, d]
    tokens: DualViewTokens
    decoder: DecoderOutput
    E_hat: Optional[torch.Tensor]
    retrieval: Optional[RetrievalResult]
    beta: Optional[torch.Tensor]

    @property
    def h_mem(self) -> Optional[torch.Tensor]:
        return None if self.retrieval is None else self.retrieval.h_mem


class DegradationForecaster(nn.Module):
    def __init__(self, config: ModelConfig, vocabulary: Optional[Dict[str, List[str]]] = None,
                 embedding_table: Optional[ExternalEmbeddingTable] = None):
        super().__init__()
        self.config = config
        self.vocabulary = vocabulary or {}
        self.encoder = DualViewEncoder(config)

        self.embedder: Optional[nn.Module] = None
        self.prior: Optional[ConditionPriorNet] = None
        if config.uses_condition:
            if config.llm_embedder:
                if embedding_table is None:
                    raise ValueError("llm_embedder requires an external embedding table")
                self.embedder = ExternalEmbedder(embedding_table)
            else:
                self.embedder = LookupEmbedder(config.d_enc, vocabulary)
            self.prior = ConditionPriorNet(config.d_enc, config.d, config.s_bar)

        self.decoder = ConditionAwareDecoder(config)

        self.memory: Optional[PatternMemory] = None
        self.trajectory: Optional[TrajectoryAutoencoder] = None
        if config.mdpm:
            self.memory = PatternMemory(config)
            self.trajectory = TrajectoryAutoencoder(config)
        self.head = FusionHead(config)

    def condition_embedding(self, conditions: Sequence[AgingCondition], like: torch.Tensor) -> torch.Tensor:
        if isinstance(self.embedder, ExternalEmbedder):
            return self.embedder(conditions, dtype=like.dtype, device=like.device)
        return self.embedder(conditions)

    def forward(self, X: torch.Tensor, X_f: torch.Tensor, cycle_mask: torch.Tensor,
                conditions: Sequence[AgingCondition]) -> ForecastOutput:
        tokens = self.encoder(X, X_f, cycle_mask)
        E_hat = None
        if self.prior is not None:
            z_ac = self.condition_embedding(conditions, X)
            E_hat = self.prior(z_ac).E_hat
        decoded = self.decoder(tokens.tokens, tokens.key_mask, E_hat)
        retrieval = self.memory(decoded.H) if self.memory is not None else None
        y_hat, beta = self.head(decoded.H, None if retrieval is None else retrieval.h_mem)
        return ForecastOutput(y_hat=y_hat, H=decoded.H, tokens=tokens, decoder=decoded,
                              E_hat=E_hat, retrieval=retrieval, beta=beta)

    def forward_batch(self, batch: Batch) -> ForecastOutput:
        return self(batch.X, batch.X_f, batch.cycle_mask, batch.conditions)

    def decode_prototypes(self, indices: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Decoded memory slots as normalized curves of length T_max."""
        if self.memory is None or self.trajectory is None:
            raise ValueError("Model was built without the pattern memory")
        slots = self.memory.slots if indices is None else self.memory.slots[list(indices)]
        return self.trajectory.decode_trajectory(slots)

    def reinitialize_collapsed_slots(self) -> int:
        return 0 if self.memory is None else self.memory.reinitialize_collapsed_slots()

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, train_conditions: Sequence[AgingCondition] = (),
                embedding_table: Optional[ExternalEmbeddingTable] = None) -> DegradationForecaster:
    """Seeded construction; the lookup vocabulary comes from the training conditions."""
    torch.manual_seed(config.seed)
    vocabulary = build_vocabulary(train_conditions) if train_conditions else None
    if config.llm_embedder and embedding_table is None and config.embedding_file:
        embedding_table = ExternalEmbeddingTable.load(config.embedding_file, config.d_enc)
    model = DegradationForecaster(config, vocabulary, embedding_table)
    logger.debug(f"Built forecaster with {model.n_parameters()} parameters")
    return model


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over state_dict names, shapes and raw bytes."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        array = tensor.detach().cpu().contiguous().numpy()
        digest.update(name.encode())
        digest.update(str(tuple(array.shape)).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


@torch.no_grad()
def predict_samples(model: DegradationForecaster, samples: Sequence[ProcessedSample],
                    S: int, T_max: int, batch_size: int = 64) -> np.ndarray:
    """Normalized forecasts [n, T_max] in eval mode."""
    samples = list(samples)
    was_training = model.training
    model.eval()
    outputs = []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(samples), batch_size):
        batch = full_batch(samples[start:start + batch_size], S, T_max).to(dtype)
        outputs.append(model.forward_batch(batch).y_hat.cpu().numpy())
    model.train(was_training)
    if not outputs:
        return np.empty((0, T_max))
    return np.concatenate(outputs, axis=0).astype(np.float64)
