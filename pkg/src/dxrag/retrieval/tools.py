"""The four retrieval tools: guideline lookup, patient matching, knowledge
search and document summarization."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from ..corpus import SOURCES, GuidelineEntry, KnowledgeChunk, PatientRecord
from .bm25 import Bm25Index
from .embed import EmbeddingProvider, safe_embed, unit_rows

log = logging.getLogger(__name__)

NO_REFERENCE = "no reference"
MAX_LOOKUP_DISEASES = 10
MAX_SEARCH_QUERIES = 3
# Scores equal to this many decimals are treated as ties and ordered by id.
TIE_DECIMALS = 12


class ToolError(Exception):
    """A malformed tool invocation (as opposed to a tool finding nothing)."""

    code = "tool_error"


class FormatBudgetError(ToolError):
    code = "format_budget"


class UnknownSourceError(ToolError):
    code = "unknown_source"


class InvalidQueryError(ToolError):
    code = "invalid_query"


# -- guideline lookup -------------------------------------------------------


@dataclass(frozen=True)
class LookupResult:
    query_disease: str
    matched_disease: str | None
    phenotypes: tuple[str, ...]
    score: float = 0.0

    @property
    def found(self) -> bool:
        return self.matched_disease is not None

    def to_dict(self) -> dict:
        return {
            "query_disease": self.query_disease,
            "matched_disease": self.matched_disease,
            "phenotypes": list(self.phenotypes) if self.found else NO_REFERENCE,
            "score": self.score,
        }


class GuidelineLookup:
    """BM25 over disease names; returns the best entry's leading phenotypes."""

    def __init__(self, entries: Sequence[GuidelineEntry], tau: float = 0.5, k_pheno: int = 10,
                 k1: float = 1.5, b: float = 0.75, index: Bm25Index | None = None):
        self.entries = list(entries)
        self.tau = tau
        self.k_pheno = k_pheno
        names = [e.disease_name for e in self.entries]
        # doc ids are the names themselves so equal scores resolve alphabetically
        self.index = index or Bm25Index.build(names, names, k1=k1, b=b)

    def lookup_one(self, disease: str) -> LookupResult:
        if not disease.strip():
            return LookupResult(disease, None, ())
        best = self.index.best(disease)
        if best is None or best[1] < self.tau:
            return LookupResult(disease, None, (), best[1] if best else 0.0)
        doc, score = best
        entry = self.entries[doc]
        return LookupResult(disease, entry.disease_name, entry.phenotypes[: self.k_pheno], score)

    def lookup(self, diseases: Sequence[str]) -> list[LookupResult]:
        if len(diseases) > MAX_LOOKUP_DISEASES:
            raise FormatBudgetError(
                f"lookup accepts at most {MAX_LOOKUP_DISEASES} diseases, got {len(diseases)}")
        return [self.lookup_one(d) for d in diseases]


def lookup_phenotypes(diseases: Sequence[str], lookup: GuidelineLookup) -> list[LookupResult]:
    return lookup.lookup(diseases)


# -- patient matching -------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    record_id: str
    diagnosis: str
    phenotypes: tuple[str, ...]
    score: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["phenotypes"] = list(self.phenotypes)
        return out


class PatientMatcher:
    """Scores each record by the mean, over query phenotypes, of the best cosine
    similarity against the record's phenotypes."""

    def __init__(self, records: Sequence[PatientRecord], provider: EmbeddingProvider):
        self.records = list(records)
        self.provider = provider
        vocab: dict[str, int] = {}
        cols = []
        starts = []
        for record in self.records:
            starts.append(len(cols))
            for p in record.phenotypes:
                cols.append(vocab.setdefault(p, len(vocab)))
        self._vocab = list(vocab)
        self._cols = np.asarray(cols, dtype=np.int64)
        self._starts = np.asarray(starts, dtype=np.int64)
        self._ids = np.asarray([r.record_id for r in self.records])
        self._unit = unit_rows(safe_embed(provider, self._vocab)) if self._vocab else None

    def __len__(self) -> int:
        return len(self.records)

    def similarities(self, query: Sequence[str]) -> np.ndarray:
        if not query:
            raise InvalidQueryError("match needs at least one phenotype")
        if not self.records:
            return np.zeros(0)
        q = unit_rows(safe_embed(self.provider, list(query)))
        cos = np.clip(q @ self._unit.T, -1.0, 1.0)
        best = np.maximum.reduceat(cos[:, self._cols], self._starts, axis=1)
        return best.mean(axis=0)

    def match(self, query: Sequence[str], top_n: int = 20,
              restrict: np.ndarray | None = None) -> list[MatchResult]:
        """Top ``top_n`` records; ``restrict`` is an optional boolean mask of eligible records."""
        if top_n < 1:
            raise InvalidQueryError("top_n must be >= 1")
        scores = self.similarities(query)
        if scores.size == 0:
            return []
        eligible = np.arange(len(self.records))
        if restrict is not None:
            eligible = eligible[restrict]
        keys = np.round(scores[eligible], TIE_DECIMALS)
        order = eligible[np.lexsort((self._ids[eligible], -keys))][:top_n]
        return [
            MatchResult(self.records[i].record_id, self.records[i].diagnosis,
                        self.records[i].phenotypes, float(scores[i]))
            for i in order
        ]


def match_patients(query_phenotypes: Sequence[str], records: Sequence[PatientRecord],
                   provider: EmbeddingProvider, top_n: int = 20) -> list[MatchResult]:
    return PatientMatcher(records, provider).match(query_phenotypes, top_n)


# -- knowledge search -------------------------------------------------------


@dataclass(frozen=True)
class SearchHit:
    chunk_id: str
    score: float
    text: str
    source: str = ""

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "score": self.score, "text": self.text}


class DenseIndex:
    """Exact cosine top-k over provider embeddings; same surface as Bm25Index.top_k."""

    def __init__(self, texts: Sequence[str], doc_ids: Sequence[str], provider: EmbeddingProvider):
        self.doc_ids = list(doc_ids)
        self.provider = provider
        self._unit = unit_rows(safe_embed(provider, list(texts))) if texts else None

    def top_k(self, query: str, k: int) -> list[tuple[int, float]]:
        if self._unit is None:
            return []
        q = unit_rows(safe_embed(self.provider, [query]))[0]
        scores = np.clip(self._unit @ q, -1.0, 1.0)
        ids = np.asarray(self.doc_ids)
        order = np.lexsort((ids, -np.round(scores, TIE_DECIMALS)))[:k]
        return [(int(i), float(scores[i])) for i in order]


def parse_source(source: str) -> str:
    name = source.strip().strip("|").strip()
    if name not in SOURCES:
        raise UnknownSourceError(f"unknown search source {source!r}; expected one of {SOURCES}")
    return name


class KnowledgeSearcher:
    """One index per source; sparse BM25 by default, dense when a provider is given."""

    def __init__(self, chunks: Sequence[KnowledgeChunk], top_k: int = 3,
                 provider: EmbeddingProvider | None = None, k1: float = 1.5, b: float = 0.75):
        self.top_k = top_k
        self.mode = "dense" if provider is not None else "bm25"
        self.chunks: dict[str, list[KnowledgeChunk]] = {s: [] for s in SOURCES}
        for chunk in chunks:
            self.chunks[chunk.source].append(chunk)
        self.indexes = {}
        for source, items in self.chunks.items():
            texts = [c.text for c in items]
            ids = [c.chunk_id for c in items]
            if provider is None:
                self.indexes[source] = Bm25Index.build(texts, ids, k1=k1, b=b)
            else:
                self.indexes[source] = DenseIndex(texts, ids, provider)

    def search(self, source: str, queries: Sequence[str], top_k: int | None = None) -> list[SearchHit]:
        source = parse_source(source)
        if not 1 <= len(queries) <= MAX_SEARCH_QUERIES:
            raise InvalidQueryError(f"search takes 1 to {MAX_SEARCH_QUERIES} queries, got {len(queries)}")
        k = self.top_k if top_k is None else top_k
        index = self.indexes[source]
        items = self.chunks[source]
        merged: dict[str, SearchHit] = {}
        for query in queries:
            for doc, score in index.top_k(query, k):
                chunk = items[doc]
                prev = merged.get(chunk.chunk_id)
                if prev is None:
                    merged[chunk.chunk_id] = SearchHit(chunk.chunk_id, score, chunk.text, source)
                elif score > prev.score:
                    # keep first-seen position, best score
                    merged[chunk.chunk_id] = SearchHit(chunk.chunk_id, score, chunk.text, source)
        return list(merged.values())


def search_knowledge(source: str, queries: Sequence[str], searcher: KnowledgeSearcher,
                     top_k: int | None = None) -> list[SearchHit]:
    return searcher.search(source, queries, top_k)


# -- document summarization -------------------------------------------------

SUMMARIZER_SYSTEM_PROMPT = (
    "You condense retrieved medical documents. Read the query and the document, then "
    "answer the query using only facts stated in the document.\n"
    "- Keep at most the 10 most relevant points.\n"
    "- Be brief; do not explain your answer.\n"
    '- Reply with JSON of the form {"answer": "..."}.\n'
    '- When the document does not address the query, reply {"answer": "no reference"}.'
)


def summarizer_user_prompt(source: str, query: str, document: str) -> str:
    return f"Source: {source} | Query: {query}\n\nDocument:\n{document}"


class SummarizerTimeout(TimeoutError):
    pass


class Summarizer(Protocol):
    def summarize(self, source: str, query: str, document: str) -> str:
        """Return the raw model reply (expected to carry an ``answer`` JSON field)."""
        ...


class TruncationSummarizer:
    """Non-model fallback: the leading window of the document."""

    def __init__(self, budget: int = 1000):
        self.budget = budget

    def summarize(self, source: str, query: str, document: str) -> str:
        return json.dumps({"answer": truncate(document, self.budget)})


def truncate(document: str, budget: int) -> str:
    if len(document) <= budget:
        return document
    cut = document.rfind(" ", 0, budget + 1)
    return document[: cut if cut > 0 else budget].rstrip()


_ANSWER_FIELD = re.compile(r'"answer"\s*:\s*("(?:[^"\\]|\\.)*")', re.DOTALL)


def extract_answer(reply: str) -> str | None:
    """Pull the ``answer`` string out of a model reply, or None when absent."""
    text = reply.strip()
    candidates = [text]
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        candidates.append(text[start:end + 1])
    for candidate in candidates:
        try:
            data = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(data, dict) and isinstance(data.get("answer"), str):
            return data["answer"]
    m = _ANSWER_FIELD.search(text)
    if m:
        try:
            return json.loads(m.group(1))
        except ValueError:
            return None
    return None


@dataclass(frozen=True)
class SummaryResult:
    text: str
    verbatim: bool = False
    fallback: bool = False
    parse_failed: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def summarize_document(source: str, query: str, document: str,
                       summarizer: Summarizer | None = None, budget: int = 1000) -> SummaryResult:
    if not document:
        raise InvalidQueryError("document must be non-empty")
    if len(document) <= budget:
        return SummaryResult(document, verbatim=True)
    fallback = TruncationSummarizer(budget)
    used_fallback = summarizer is None
    try:
        reply = (summarizer or fallback).summarize(source, query, document)
    except Exception as exc:  # timeouts and transport errors degrade to truncation
        log.warning("summarizer failed (%s); using truncation fallback", exc)
        reply = fallback.summarize(source, query, document)
        used_fallback = True
    answer = extract_answer(reply)
    if answer is None:
        return SummaryResult(NO_REFERENCE, fallback=used_fallback, parse_failed=True)
    answer = answer.strip()
    if not answer or answer.lower() == NO_REFERENCE:
        return SummaryResult(NO_REFERENCE, fallback=used_fallback)
    return SummaryResult(truncate(answer, budget), fallback=used_fallback)
