"""Lexical helpers shared by the corpus, retrieval, reward and metric code."""

from __future__ import annotations

import re

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)
_SPACE = re.compile(r"\s+")
_PUNCT = re.compile(r"[^\w\s]|_", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN.findall(text.lower())


def token_set(text: str) -> set[str]:
    return set(tokenize(text))


def normalize_term(text: str) -> str:
    """Key used for duplicate detection: lowercase, trimmed, single-spaced."""
    return _SPACE.sub(" ", text.strip().lower())


def normalize_name(text: str) -> str:
    """Key used for disease matching: like normalize_term but punctuation-free."""
    return _SPACE.sub(" ", _PUNCT.sub(" ", text.lower())).strip()


def split_list(payload: str) -> list[str]:
    """Split a comma separated payload into stripped, non-empty items."""
    return [part.strip() for part in payload.split(",") if part.strip()]
