"""The retrieval environment seen by the agent.

``ToolEnvironment.respond`` turns an active block's payload into the text of
the matching passive block. Subclasses only provide the three tools.
"""

from __future__ import annotations

import random
import re
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from ..corpus import Corpora, DiagnosticCase
from ..text import normalize_name, split_list
from ..transcript import PAIRED_PASSIVE, neutralize_tags, parse_search_payload
from .embed import EmbeddingProvider, HashEmbedder
from .tools import (
    NO_REFERENCE,
    GuidelineLookup,
    InvalidQueryError,
    KnowledgeSearcher,
    LookupResult,
    MatchResult,
    PatientMatcher,
    SearchHit,
    Summarizer,
    SummaryResult,
    parse_source,
    summarize_document,
)

_ANY_SOURCE = re.compile(r"^\s*\|([^|]*)\|")


@dataclass(frozen=True)
class EnvConfig:
    tau: float = 0.5
    k_pheno: int = 10
    top_n: int = 20
    top_k: int = 3
    doc_budget: int = 1000
    k1: float = 1.5
    b: float = 0.75
    refer_phenotypes: int = 5  # phenotypes shown per retrieved case in <refer>


@dataclass
class EnvResponse:
    kind: str  # the active kind that triggered the call
    query: str
    feedback: str
    records: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def passive(self) -> str:
        return PAIRED_PASSIVE[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "query": self.query, "feedback": self.feedback,
                "records": self.records, "error": self.error}


def format_guide(results: Sequence[LookupResult]) -> str:
    lines = []
    for r in results:
        if r.found:
            lines.append(f"\\textbf{{{r.matched_disease}}}: {', '.join(r.phenotypes)}")
        else:
            lines.append(f"\\textbf{{{r.query_disease}}}: {NO_REFERENCE}")
    return "\n".join(lines) if lines else NO_REFERENCE


def format_refer(results: Sequence[MatchResult], n_phen: int) -> str:
    if not results:
        return NO_REFERENCE
    return "\n".join(f"{r.diagnosis} ({', '.join(r.phenotypes[:n_phen])})" for r in results)


def format_result(hits: Sequence[tuple[SearchHit, SummaryResult]]) -> str:
    texts = [f"[{h.source}:{h.chunk_id}] {s.text}" for h, s in hits if s.text != NO_REFERENCE]
    return "\n".join(texts) if texts else NO_REFERENCE


class ToolEnvironment:
    """Formatting and dispatch shared by every environment variant."""

    config: EnvConfig

    def lookup(self, diseases: Sequence[str]) -> list[LookupResult]:
        raise NotImplementedError

    def match(self, phenotypes: Sequence[str], top_n: int | None = None) -> list[MatchResult]:
        raise NotImplementedError

    def search(self, source: str, queries: Sequence[str], top_k: int | None = None) -> list[SearchHit]:
        raise NotImplementedError

    def summarize(self, source: str, query: str, document: str) -> SummaryResult:
        raise NotImplementedError

    def for_case(self, case: DiagnosticCase) -> "ToolEnvironment":
        return self

    def respond(self, kind: str, payload: str) -> EnvResponse:
        """Run the tool for an active block and format its passive feedback.

        Tool errors propagate; the rollout loop converts them to "no reference".
        """
        if kind == "lookup":
            results = self.lookup(split_list(payload))
            feedback = format_guide(results)
            records = [r.to_dict() for r in results]
        elif kind == "match":
            phenotypes = split_list(payload)
            if not phenotypes:
                raise InvalidQueryError("empty match payload")
            results = self.match(phenotypes)
            feedback = format_refer(results, self.config.refer_phenotypes)
            records = [r.to_dict() for r in results]
        elif kind == "search":
            parsed = parse_search_payload(payload)
            if parsed is None:
                other = _ANY_SOURCE.match(payload)
                if other:
                    parse_source(other.group(1))  # raises unknown_source
                raise InvalidQueryError("search payload lacks a source prefix")
            source, queries = parsed
            hits = self.search(source, queries)
            joined = ", ".join(queries)
            summaries = [(h, self.summarize(source, joined, h.text)) for h in hits]
            feedback = format_result(summaries)
            records = [h.to_dict() for h in hits]
        else:
            raise InvalidQueryError(f"{kind!r} is not a tool action")
        return EnvResponse(kind, payload, neutralize_tags(feedback), records)


class DiagnosticEnvironment(ToolEnvironment):
    """In-process environment over the three corpora."""

    def __init__(self, corpora: Corpora, config: EnvConfig = EnvConfig(),
                 provider: EmbeddingProvider | None = None,
                 summarizer: Summarizer | None = None,
                 search_provider: EmbeddingProvider | None = None):
        self.corpora = corpora
        self.config = config
        self.provider = provider or HashEmbedder()
        self.summarizer = summarizer
        self.guidelines = GuidelineLookup(corpora.guideline.items, config.tau, config.k_pheno,
                                          config.k1, config.b)
        self.matcher = PatientMatcher(corpora.patients.items, self.provider)
        self.searcher = KnowledgeSearcher(corpora.knowledge.items, config.top_k, search_provider,
                                          config.k1, config.b)
        self._lock = threading.Lock()
        self.counters: Counter = Counter()

    def _count(self, name: str) -> None:
        with self._lock:
            self.counters[name] += 1

    def lookup(self, diseases):
        self._count("lookup")
        return self.guidelines.lookup(diseases)

    def match(self, phenotypes, top_n=None):
        self._count("match")
        return self.matcher.match(phenotypes, top_n or self.config.top_n)

    def search(self, source, queries, top_k=None):
        self._count("search")
        return self.searcher.search(source, queries, top_k)

    def summarize(self, source, query, document):
        self._count("summarize")
        return summarize_document(source, query, document, self.summarizer, self.config.doc_budget)

    def stats(self) -> dict[str, Any]:
        with self._lock:
            counters = dict(self.counters)
        return {
            "sizes": {
                "guideline": len(self.corpora.guideline),
                "patients": len(self.corpora.patients),
                "knowledge": len(self.corpora.knowledge),
            },
            "queries": counters,
        }


def adversarial_wrap(env: DiagnosticEnvironment, seed: int = 0, matcher=None) -> "AdversarialEnvironment":
    """Environment whose every answer is drawn from content unrelated to the case."""
    return AdversarialEnvironment(env, seed, matcher)


class AdversarialEnvironment(ToolEnvironment):
    """Serves decoys: guideline entries, patient records and chunks that do not
    match the bound case's ground truth. Bind a case with :meth:`for_case`."""

    def __init__(self, base: DiagnosticEnvironment, seed: int = 0, matcher=None,
                 case: DiagnosticCase | None = None):
        from ..metrics import DiseaseMatcher

        self.base = base
        self.config = base.config
        self.seed = seed
        self.disease_matcher = matcher or DiseaseMatcher()
        self.case = case
        self._calls = 0
        self._lock = threading.Lock()

    def for_case(self, case: DiagnosticCase) -> "AdversarialEnvironment":
        return AdversarialEnvironment(self.base, self.seed, self.disease_matcher, case)

    @property
    def ground_truth(self) -> tuple[str, ...]:
        return self.case.ground_truth_diagnoses if self.case else ()

    def _is_gt(self, name: str) -> bool:
        return any(self.disease_matcher.matches(name, g) for g in self.ground_truth)

    def _mentions_gt(self, text: str) -> bool:
        padded = f" {normalize_name(text)} "
        return any(f" {normalize_name(g)} " in padded for g in self.ground_truth)

    def _rng(self, tool: str) -> random.Random:
        with self._lock:
            self._calls += 1
            n = self._calls
        case_id = self.case.case_id if self.case else ""
        return random.Random(f"{self.seed}:{case_id}:{tool}:{n}")

    def lookup(self, diseases):
        if len(diseases) > 10:
            return self.base.guidelines.lookup(diseases)  # raises the budget error
        rng = self._rng("lookup")
        decoys = [e for e in self.base.guidelines.entries if not self._is_gt(e.disease_name)]
        out = []
        for d in diseases:
            if not decoys or not d.strip():
                out.append(LookupResult(d, None, ()))
                continue
            entry = rng.choice(decoys)
            out.append(LookupResult(d, entry.disease_name, entry.phenotypes[: self.config.k_pheno], 0.0))
        return out

    def match(self, phenotypes, top_n=None):
        top_n = top_n or self.config.top_n
        rng = self._rng("match")
        records = self.base.matcher.records
        pool = [i for i, r in enumerate(records) if not self._is_gt(r.diagnosis)]
        if not pool:
            return []
        chosen = rng.sample(pool, min(top_n, len(pool)))
        mask = np.zeros(len(records), dtype=bool)
        mask[chosen] = True
        return self.base.matcher.match(phenotypes, top_n, restrict=mask)

    def search(self, source, queries, top_k=None):
        from .tools import MAX_SEARCH_QUERIES

        source = parse_source(source)
        if not 1 <= len(queries) <= MAX_SEARCH_QUERIES:
            raise InvalidQueryError("search takes 1 to 3 queries")
        k = top_k or self.config.top_k
        rng = self._rng("search")
        chunks = [c for c in self.base.searcher.chunks[source] if not self._mentions_gt(c.text)]
        chosen = rng.sample(chunks, min(k, len(chunks)))
        return [SearchHit(c.chunk_id, 0.0, c.text, source) for c in chosen]

    def summarize(self, source, query, document):
        result = self.base.summarize(source, query, document)
        if self._mentions_gt(result.text):
            return replace(result, text=NO_REFERENCE)
        return result
