"""Retrieval environment: guideline lookup, patient matching, knowledge search."""

from .bm25 import Bm25Index
from .embed import EmbeddingProvider, EmbeddingProviderError, HashEmbedder
from .env import (
    AdversarialEnvironment,
    DiagnosticEnvironment,
    EnvConfig,
    EnvResponse,
    ToolEnvironment,
    adversarial_wrap,
)
from .tools import (
    NO_REFERENCE,
    FormatBudgetError,
    GuidelineLookup,
    InvalidQueryError,
    KnowledgeSearcher,
    LookupResult,
    MatchResult,
    PatientMatcher,
    SearchHit,
    SummaryResult,
    ToolError,
    TruncationSummarizer,
    UnknownSourceError,
    lookup_phenotypes,
    match_patients,
    search_knowledge,
    summarize_document,
)

__all__ = [
    "AdversarialEnvironment", "Bm25Index", "DiagnosticEnvironment", "EmbeddingProvider",
    "EmbeddingProviderError", "EnvConfig", "EnvResponse", "FormatBudgetError", "GuidelineLookup",
    "HashEmbedder", "InvalidQueryError", "KnowledgeSearcher", "LookupResult", "MatchResult",
    "NO_REFERENCE", "PatientMatcher", "SearchHit", "SummaryResult", "ToolEnvironment", "ToolError",
    "TruncationSummarizer", "UnknownSourceError", "adversarial_wrap", "lookup_phenotypes",
    "match_patients", "search_knowledge", "summarize_document",
]
