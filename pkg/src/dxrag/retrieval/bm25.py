"""Okapi BM25 over an in-memory inverted index."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from ..text import tokenize

SNAPSHOT_VERSION = 1


@dataclass
class Bm25Index:
    """Inverted index with postings ``token -> [(doc, tf), ...]``.

    Documents are addressed by position; ``doc_ids`` carries their external keys,
    which also break score ties (ascending).
    """

    doc_ids: list[str]
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self):
        self.N = len(self.doc_lengths)
        self.avgdl = sum(self.doc_lengths) / self.N if self.N else 0.0
        self.idf = {t: self._idf(len(p)) for t, p in self.postings.items()}

    @classmethod
    def build(cls, texts: Sequence[str], doc_ids: Sequence[str] | None = None,
              k1: float = 1.5, b: float = 0.75) -> "Bm25Index":
        if doc_ids is None:
            doc_ids = [str(i) for i in range(len(texts))]
        if len(doc_ids) != len(texts):
            raise ValueError("texts and doc_ids differ in length")
        postings: dict[str, list[tuple[int, int]]] = {}
        lengths = []
        for doc, text in enumerate(texts):
            tokens = tokenize(text)
            lengths.append(len(tokens))
            for token, tf in Counter(tokens).items():
                postings.setdefault(token, []).append((doc, tf))
        postings = {t: postings[t] for t in sorted(postings)}
        return cls(list(doc_ids), postings, lengths, k1, b)

    def _idf(self, n_t: int) -> float:
        return math.log((self.N - n_t + 0.5) / (n_t + 0.5) + 1.0)

    def scores(self, query: str | Sequence[str]) -> dict[int, float]:
        """Scores of every document sharing at least one token with the query.

        Repeated query tokens contribute once per occurrence.
        """
        tokens = tokenize(query) if isinstance(query, str) else list(query)
        out: dict[int, float] = {}
        if not self.N:
            return out
        k1, b, avgdl = self.k1, self.b, self.avgdl
        for token in tokens:
            plist = self.postings.get(token)
            if not plist:
                continue
            idf = self.idf[token]
            for doc, tf in plist:
                norm = k1 * (1.0 - b + b * self.doc_lengths[doc] / avgdl)
                out[doc] = out.get(doc, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
        return out

    def top_k(self, query: str | Sequence[str], k: int) -> list[tuple[int, float]]:
        """Best ``k`` (doc, score) pairs with a positive score, best first."""
        scored = self.scores(query)
        ranked = sorted(scored.items(), key=lambda item: (-item[1], self.doc_ids[item[0]]))
        return ranked[:k] if k >= 0 else ranked

    def best(self, query: str | Sequence[str]) -> tuple[int, float] | None:
        hits = self.top_k(query, 1)
        return hits[0] if hits else None

    def to_json(self) -> str:
        return json.dumps({
            "version": SNAPSHOT_VERSION,
            "k1": self.k1,
            "b": self.b,
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": self.postings,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "Bm25Index":
        data = json.loads(payload)
        if data.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported index snapshot version {data.get('version')!r}")
        postings = {t: [tuple(p) for p in plist] for t, plist in data["postings"].items()}
        return cls(data["doc_ids"], postings, data["doc_lengths"], data["k1"], data["b"])
