"""
Aging-condition embeddings z_ac.

Two sources: a factor-wise lookup table learned with the model (the default),
and a precomputed external embedding file keyed by condition key.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.feature_extraction.text import HashingVectorizer

from .core import FACTOR_NAMES, AgingCondition, PathLike, read_json, write_json
from .exceptions import DimensionMismatch, MissingEmbedding

logger = logging.getLogger(__name__)

LOOKUP_FACTORS = (
    "positive_electrode",
    "negative_electrode",
    "operating_temperature",
    "package_structure",
    "manufacturer",
)
OOV_BUCKETS = 16
HASHED_EMBEDDER_NAME = "hashing-vectorizer-ngram-1-2"


def render_prompt(condition: AgingCondition) -> str:
    """One "factor_name: value" line per factor, in listing order."""
    return "\n".join(f"{name}: {condition.factor(name)}" for name in FACTOR_NAMES)


def _factor_token(value: object) -> str:
    return str(value)


def _oov_bucket(factor: str, token: str, buckets: int) -> int:
    digest = hashlib.sha256(f"{factor}={token}".encode()).hexdigest()
    return int(digest[:8], 16) % buckets


def build_vocabulary(conditions: Sequence[AgingCondition]) -> Dict[str, List[str]]:
    """Sorted distinct values of each lookup factor seen in the training conditions."""
    return {
        factor: sorted({_factor_token(c.factor(factor)) for c in conditions})
        for factor in LOOKUP_FACTORS
    }


class LookupEmbedder(nn.Module):
    """Sum of per-factor learned embeddings; unseen values fall into hashed OOV buckets."""

    def __init__(self, d_enc: int, vocabulary: Optional[Dict[str, List[str]]] = None,
                 oov_buckets: int = OOV_BUCKETS):
        super().__init__()
        self.d_enc = d_enc
        self.oov_buckets = oov_buckets
        self.vocabulary = {f: list((vocabulary or {}).get(f, [])) for f in LOOKUP_FACTORS}
        self._index = {f: {v: i for i, v in enumerate(vals)} for f, vals in self.vocabulary.items()}
        self.tables = nn.ModuleDict({
            f: nn.Embedding(len(self.vocabulary[f]) + oov_buckets, d_enc) for f in LOOKUP_FACTORS
        })

    def token_index(self, factor: str, value: object) -> int:
        token = _factor_token(value)
        known = self._index[factor]
        if token in known:
            return known[token]
        return len(known) + _oov_bucket(factor, token, self.oov_buckets)

    def forward(self, conditions: Sequence[AgingCondition]) -> torch.Tensor:
        device = next(self.parameters()).device
        total = None
        for factor in LOOKUP_FACTORS:
            ids = torch.tensor([self.token_index(factor, c.factor(factor)) for c in conditions],
                               dtype=torch.long, device=device)
            embedded = self.tables[factor](ids)
            total = embedded if total is None else total + embedded
        return total


class ExternalEmbeddingTable:
    """Read-only map from condition key to a stored d_enc vector."""

    def __init__(self, embeddings: Dict[str, Sequence[float]], d_enc: int, embedder: str = "external"):
        self.d_enc = d_enc
        self.embedder = embedder
        self.embeddings: Dict[str, np.ndarray] = {}
        for key, vector in embeddings.items():
            array = np.asarray(vector, dtype=np.float64)
            if array.shape != (d_enc,):
                raise DimensionMismatch(f"Embedding for {key} has shape {array.shape}, expected ({d_enc},)")
            if not np.all(np.isfinite(array)):
                raise DimensionMismatch(f"Embedding for {key} is not finite")
            self.embeddings[key] = array

    @classmethod
    def load(cls, path: PathLike, d_enc: Optional[int] = None) -> "ExternalEmbeddingTable":
        data = read_json(path)
        stored = int(data["d_enc"])
        if d_enc is not None and stored != d_enc:
            raise DimensionMismatch(f"Embedding file {path} has d_enc={stored}, config expects {d_enc}")
        table = cls(data["embeddings"], stored, data.get("embedder", "external"))
        logger.info(f"Loaded {len(table.embeddings)} condition embeddings from {path}")
        return table

    def save(self, path: PathLike) -> Path:
        return write_json(
            {
                "embedder": self.embedder,
                "d_enc": self.d_enc,
                "embeddings": {k: v.tolist() for k, v in sorted(self.embeddings.items())},
            },
            path,
        )

    def vector(self, condition: AgingCondition) -> np.ndarray:
        try:
            return self.embeddings[condition.key]
        except KeyError:
            raise MissingEmbedding(f"No embedding for condition {condition.key}") from None


class ExternalEmbedder(nn.Module):
    """Module wrapper so the model treats both embedding sources alike. Holds no parameters."""

    def __init__(self, table: ExternalEmbeddingTable):
        super().__init__()
        self.table = table
        self.d_enc = table.d_enc

    def forward(self, conditions: Sequence[AgingCondition], dtype: torch.dtype = torch.float32,
                device: Optional[torch.device] = None) -> torch.Tensor:
        vectors = np.stack([self.table.vector(c) for c in conditions])
        return torch.as_tensor(vectors, dtype=dtype, device=device)


def embed_lookup(condition: AgingCondition, embedder: LookupEmbedder) -> np.ndarray:
    with torch.no_grad():
        return embedder([condition])[0].detach().cpu().numpy()


def embed_external(condition: AgingCondition, table: ExternalEmbeddingTable) -> np.ndarray:
    return table.vector(condition)


def hashed_embedding_table(conditions: Sequence[AgingCondition], d_enc: int) -> ExternalEmbeddingTable:
    """
    Offline stand-in for a language embedder: hashed word uni/bi-grams of each
    rendered prompt, l2-normalized.
    """
    unique = {c.key: c for c in conditions}
    keys = sorted(unique)
    vectorizer = HashingVectorizer(n_features=d_enc, ngram_range=(1, 2), norm="l2",
                                   alternate_sign=True, lowercase=True)
    matrix = vectorizer.transform([render_prompt(unique[k]) for k in keys]).toarray()
    return ExternalEmbeddingTable(dict(zip(keys, matrix)), d_enc, HASHED_EMBEDDER_NAME)


def write_hashed_embedding_file(conditions: Sequence[AgingCondition], d_enc: int,
                                path: PathLike) -> Path:
    """Hashed prompt embeddings written in the external-embedding format."""
    table = hashed_embedding_table(conditions, d_enc)
    written = table.save(path)
    logger.info(f"Wrote hashed embeddings for {len(table.embeddings)} conditions to {written}")
    return written
