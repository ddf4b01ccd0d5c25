"""Corpus data models and JSON-lines ingestion.

Three retrieval corpora back the environment: disease guidelines, patient
records and knowledge chunks. Diagnostic cases are the episodes the agent is
asked to solve. Every corpus file holds one JSON object per line, with field
names equal to the dataclass fields below.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Generic, Iterable, Iterator, TypeVar

from .text import normalize_term

log = logging.getLogger(__name__)

RARITIES = ("common", "rare")
SOURCES = ("WIKI", "PMC", "BOOK")
MAX_CHUNK_CHARS = 1000


class CorpusError(Exception):
    """Fatal ingestion failure (unreadable file, or malformed line in strict mode)."""


def _dedupe(items: Iterable[str]) -> tuple[str, ...]:
    seen: set[str] = set()
    out = []
    for item in items:
        key = normalize_term(item)
        if key and key not in seen:
            seen.add(key)
            out.append(item.strip())
    return tuple(out)


def _require_text(data: dict, name: str) -> str:
    value = data.get(name)
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"{name!r} must be a non-empty string")
    return value


def _require_list(data: dict, name: str) -> list[str]:
    value = data.get(name)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValueError(f"{name!r} must be a list of strings")
    return value


@dataclass(frozen=True)
class GuidelineEntry:
    disease_name: str
    phenotypes: tuple[str, ...]  # most frequent first
    rarity: str = "common"
    disease_code: str | None = None
    source_count: int = 0

    def __post_init__(self):
        if not self.disease_name.strip():
            raise ValueError("disease_name must be non-empty")
        if not self.phenotypes:
            raise ValueError("phenotypes must be non-empty")
        if len({normalize_term(p) for p in self.phenotypes}) != len(self.phenotypes):
            raise ValueError("phenotypes contain duplicates")
        if self.rarity not in RARITIES:
            raise ValueError(f"rarity must be one of {RARITIES}")
        if self.source_count < 0:
            raise ValueError("source_count must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "GuidelineEntry":
        count = data.get("source_count", 0)
        if not isinstance(count, int) or isinstance(count, bool):
            raise ValueError("'source_count' must be an integer")
        code = data.get("disease_code")
        if code is not None and not isinstance(code, str):
            raise ValueError("'disease_code' must be a string")
        return cls(
            disease_name=_require_text(data, "disease_name").strip(),
            phenotypes=_dedupe(_require_list(data, "phenotypes")),
            rarity=data.get("rarity", "common"),
            disease_code=code,
            source_count=count,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["phenotypes"] = list(self.phenotypes)
        return out


@dataclass(frozen=True)
class PatientRecord:
    record_id: str
    phenotypes: tuple[str, ...]
    diagnosis: str
    source_tag: str = ""

    def __post_init__(self):
        if not self.record_id:
            raise ValueError("record_id must be non-empty")
        if not self.phenotypes:
            raise ValueError("phenotypes must be non-empty")
        if not self.diagnosis.strip():
            raise ValueError("diagnosis must be non-empty")

    @classmethod
    def from_dict(cls, data: dict) -> "PatientRecord":
        phenotypes = tuple(p.strip() for p in _require_list(data, "phenotypes") if p.strip())
        return cls(
            record_id=_require_text(data, "record_id"),
            phenotypes=phenotypes,
            diagnosis=_require_text(data, "diagnosis").strip(),
            source_tag=str(data.get("source_tag", "")),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["phenotypes"] = list(self.phenotypes)
        return out


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    source: str
    text: str
    title: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if len(self.text) > MAX_CHUNK_CHARS:
            raise ValueError(f"chunk text exceeds {MAX_CHUNK_CHARS} characters")
        if not self.chunk_id:
            raise ValueError("chunk_id must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiagnosticCase:
    case_id: str
    presentation: str | tuple[str, ...]
    ground_truth_diagnoses: tuple[str, ...]
    rarity: str = "common"
    dataset: str = ""

    def __post_init__(self):
        if not self.ground_truth_diagnoses:
            raise ValueError("ground_truth_diagnoses must be non-empty")
        if self.rarity not in RARITIES:
            raise ValueError(f"rarity must be one of {RARITIES}")

    @property
    def presentation_text(self) -> str:
        if isinstance(self.presentation, str):
            return self.presentation
        return ", ".join(self.presentation)

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticCase":
        presentation = data.get("presentation")
        if isinstance(presentation, list):
            presentation = tuple(str(p) for p in presentation)
        elif not isinstance(presentation, str):
            raise ValueError("'presentation' must be a string or a list of strings")
        gt = data.get("ground_truth_diagnoses")
        if isinstance(gt, str):
            gt = [gt]
        if not isinstance(gt, list) or not gt or not all(isinstance(g, str) and g.strip() for g in gt):
            raise ValueError("'ground_truth_diagnoses' must be a non-empty list of strings")
        return cls(
            case_id=_require_text(data, "case_id"),
            presentation=presentation,
            ground_truth_diagnoses=tuple(g.strip() for g in gt),
            rarity=data.get("rarity", "common"),
            dataset=str(data.get("dataset", "")),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        if not isinstance(self.presentation, str):
            out["presentation"] = list(self.presentation)
        out["ground_truth_diagnoses"] = list(self.ground_truth_diagnoses)
        return out


T = TypeVar("T")


@dataclass(frozen=True)
class Store(Generic[T]):
    """Immutable, ordered collection of validated entities."""

    items: tuple[T, ...]
    skipped: int = 0
    errors: tuple[tuple[int, str], ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[T]:
        return iter(self.items)

    def __getitem__(self, i: int) -> T:
        return self.items[i]


def _read_lines(path: str | os.PathLike) -> Iterator[tuple[int, str]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    yield lineno, line
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc


def _ingest(path, parse: Callable[[dict, int], Any], strict: bool) -> tuple[list, int, list]:
    parsed, errors = [], []
    for lineno, line in _read_lines(path):
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("line is not a JSON object")
            result = parse(data, lineno)
        except (ValueError, TypeError) as exc:
            if strict:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            errors.append((lineno, str(exc)))
            continue
        if result is not None:
            parsed.append(result)
    if errors:
        log.warning("%s: skipped %d malformed line(s)", path, len(errors))
    return parsed, len(errors), errors


def merge_guidelines(entries: Iterable[GuidelineEntry]) -> list[GuidelineEntry]:
    """Merge entries sharing a normalized disease name; phenotype lists are unioned."""
    merged: dict[str, GuidelineEntry] = {}
    for entry in entries:
        key = normalize_term(entry.disease_name)
        prev = merged.get(key)
        if prev is None:
            merged[key] = entry
            continue
        merged[key] = GuidelineEntry(
            disease_name=prev.disease_name,
            phenotypes=_dedupe(prev.phenotypes + entry.phenotypes),
            rarity=prev.rarity,
            disease_code=prev.disease_code or entry.disease_code,
            source_count=prev.source_count + entry.source_count,
        )
    return list(merged.values())


def ingest_guideline(path, strict: bool = False) -> Store[GuidelineEntry]:
    entries, skipped, errors = _ingest(path, lambda d, _: GuidelineEntry.from_dict(d), strict)
    return Store(tuple(merge_guidelines(entries)), skipped, tuple(errors))


def ingest_patients(path, strict: bool = False) -> Store[PatientRecord]:
    seen: set[str] = set()

    def parse(data: dict, _lineno: int) -> PatientRecord:
        record = PatientRecord.from_dict(data)
        if record.record_id in seen:
            raise ValueError(f"duplicate record_id {record.record_id!r}")
        seen.add(record.record_id)
        return record

    records, skipped, errors = _ingest(path, parse, strict)
    return Store(tuple(records), skipped, tuple(errors))


def split_text(text: str, limit: int = MAX_CHUNK_CHARS) -> list[str]:
    """Split text into pieces of at most ``limit`` characters at whitespace.

    A run of more than ``limit`` non-space characters is hard-split.
    """
    if len(text) <= limit:
        return [text] if text.strip() else []
    pieces = []
    rest = text.strip()
    while len(rest) > limit:
        window = rest[: limit + 1]
        cut = max(window.rfind(" "), window.rfind("\n"), window.rfind("\t"))
        if cut <= 0:
            cut = limit
        piece = rest[:cut].rstrip()
        if piece:
            pieces.append(piece)
        rest = rest[cut:].lstrip()
    if rest:
        pieces.append(rest)
    return pieces


def ingest_knowledge(path, strict: bool = False, limit: int = MAX_CHUNK_CHARS) -> Store[KnowledgeChunk]:
    seen: set[str] = set()

    def parse(data: dict, _lineno: int) -> list[KnowledgeChunk]:
        chunk_id = _require_text(data, "chunk_id")
        text = data.get("text")
        if not isinstance(text, str):
            raise ValueError("'text' must be a string")
        source = data.get("source")
        if source not in SOURCES:
            raise ValueError(f"'source' must be one of {SOURCES}")
        title = data.get("title")
        pieces = split_text(text, limit)
        if len(pieces) == 1 and pieces[0] == text:
            ids = [chunk_id]
        else:
            ids = [f"{chunk_id}-{i}" for i in range(len(pieces))]
        if seen.intersection(ids):
            raise ValueError(f"duplicate chunk_id {chunk_id!r}")
        seen.update(ids)
        return [KnowledgeChunk(cid, source, piece, title) for cid, piece in zip(ids, pieces)]

    groups, skipped, errors = _ingest(path, parse, strict)
    chunks = tuple(chunk for group in groups for chunk in group)
    return Store(chunks, skipped, tuple(errors))


def ingest_cases(path, strict: bool = False) -> Store[DiagnosticCase]:
    cases, skipped, errors = _ingest(path, lambda d, _: DiagnosticCase.from_dict(d), strict)
    return Store(tuple(cases), skipped, tuple(errors))


def write_jsonl(path, items: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            data = item.to_dict() if hasattr(item, "to_dict") else item
            fh.write(json.dumps(data, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Corpora:
    guideline: Store[GuidelineEntry]
    patients: Store[PatientRecord]
    knowledge: Store[KnowledgeChunk]


MANIFEST_NAME = "manifest.json"


def load_manifest(path) -> dict[str, str]:
    """Read an ingest manifest; relative paths resolve against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
    missing = [k for k in ("guideline", "patients", "knowledge") if k not in data]
    if missing:
        raise CorpusError(f"manifest {path} is missing {', '.join(missing)}")
    return {k: str((path.parent / v).resolve()) for k, v in data.items() if isinstance(v, str)}


def load_corpora(guideline, patients, knowledge, strict: bool = False) -> Corpora:
    return Corpora(
        guideline=ingest_guideline(guideline, strict),
        patients=ingest_patients(patients, strict),
        knowledge=ingest_knowledge(knowledge, strict),
    )


def load_store_dir(path, strict: bool = False) -> Corpora:
    paths = load_manifest(path)
    return load_corpora(paths["guideline"], paths["patients"], paths["knowledge"], strict)


def save_store_dir(corpora: Corpora, out_dir) -> Path:
    """Write normalized corpora plus a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "guideline.jsonl", corpora.guideline)
    write_jsonl(out / "patients.jsonl", corpora.patients)
    write_jsonl(out / "knowledge.jsonl", corpora.knowledge)
    manifest = {
        "guideline": "guideline.jsonl",
        "patients": "patients.jsonl",
        "knowledge": "knowledge.jsonl",
        "counts": {
            "guideline": len(corpora.guideline),
            "patients": len(corpora.patients),
            "knowledge": len(corpora.knowledge),
        },
        "skipped": {
            "guideline": corpora.guideline.skipped,
            "patients": corpora.patients.skipped,
            "knowledge": corpora.knowledge.skipped,
        },
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST_NAME
