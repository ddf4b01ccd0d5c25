"""Embedding providers used by patient matching and dense search."""

from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np

from ..text import tokenize


class EmbeddingProviderError(RuntimeError):
    """The provider failed; callers may retry. Distinct from an empty result."""


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return a ``(len(texts), dim)`` array with no all-zero rows."""
        ...


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class HashEmbedder:
    """Deterministic bag-of-tokens embedding: token counts in hashed buckets.

    Text without any token is hashed whole, so no row is ever zero.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = tokenize(text) or [text]
            for token in tokens:
                out[row, _bucket(token, self.dim)] += 1.0
        return out


def unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EmbeddingProviderError("provider returned a zero vector")
    return vectors / norms


def safe_embed(provider: EmbeddingProvider, texts: Sequence[str]) -> np.ndarray:
    """Call the provider and check its output contract."""
    if not texts:
        return np.zeros((0, getattr(provider, "dim", 0)), dtype=np.float64)
    try:
        vectors = np.asarray(provider.embed(list(texts)), dtype=np.float64)
    except EmbeddingProviderError:
        raise
    except Exception as exc:
        raise EmbeddingProviderError(f"embedding provider failed: {exc}") from exc
    if vectors.ndim != 2 or vectors.shape[0] != len(texts):
        raise EmbeddingProviderError(f"provider returned shape {vectors.shape} for {len(texts)} texts")
    return vectors
