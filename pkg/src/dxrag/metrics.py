"""Evaluation metrics over episode results: Acc@N, Hit@N and the hint score.

Results may be ``EpisodeResult`` objects or the dicts they serialize to.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .text import normalize_name
from .transcript import parse, validate

MATCHER_MODES = ("normalized_exact", "token_f1")


@dataclass(frozen=True)
class DiseaseMatcher:
    """Symmetric predicate deciding whether two disease names denote the same disease."""

    mode: str = "normalized_exact"
    threshold: float = 0.6

    def __post_init__(self):
        if self.mode not in MATCHER_MODES:
            raise ValueError(f"mode must be one of {MATCHER_MODES}")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")

    def matches(self, a: str, b: str) -> bool:
        na, nb = normalize_name(a), normalize_name(b)
        if not na or not nb:
            return False
        if self.mode == "normalized_exact":
            return na == nb
        ta, tb = Counter(na.split()), Counter(nb.split())
        common = sum((ta & tb).values())
        if not common:
            return False
        precision, recall = common / sum(ta.values()), common / sum(tb.values())
        return 2 * precision * recall / (precision + recall) >= self.threshold

    def any_match(self, candidates: Iterable[str], truths: Iterable[str]) -> bool:
        truths = list(truths)
        return any(self.matches(c, g) for c in candidates for g in truths)


def _record(result: Any) -> dict:
    return result.to_dict() if hasattr(result, "to_dict") else result


def _sigma_f(rec: dict) -> int:
    reward = rec.get("reward")
    if reward and "sigma_f" in reward:
        return int(reward["sigma_f"])
    return validate(rec.get("completion", "")).sigma_f


def _diagnoses(rec: dict) -> list[str]:
    if "diagnoses" in rec:
        return list(rec["diagnoses"])
    return parse(rec.get("completion", "")).diagnoses


def acc_at_n(results: Sequence, n: int, matcher: DiseaseMatcher = DiseaseMatcher()) -> float | None:
    """Share of cases whose first ``n`` diagnoses include a ground-truth disease.

    Transcripts failing the format gate count as wrong. None for no cases.
    """
    records = [_record(r) for r in results]
    if not records:
        return None
    correct = sum(
        1 for rec in records
        if _sigma_f(rec) and matcher.any_match(_diagnoses(rec)[:n], rec["ground_truth"])
    )
    return correct / len(records)


def hit_counts(results: Sequence, n: int, matcher: DiseaseMatcher = DiseaseMatcher()) -> tuple[int, int]:
    hits = total = 0
    for result in results:
        rec = _record(result)
        for call in rec.get("env_trace", []):
            if call.get("kind") != "match":
                continue
            total += 1
            diagnoses = [r.get("diagnosis", "") for r in call.get("records", [])[:n]]
            if matcher.any_match(diagnoses, rec["ground_truth"]):
                hits += 1
    return hits, total


def hit_at_n(results: Sequence, n: int, matcher: DiseaseMatcher = DiseaseMatcher()) -> float | None:
    """Share of patient-match calls whose top ``n`` records include the true diagnosis.

    None when no episode made a match call.
    """
    hits, total = hit_counts(results, n, matcher)
    return hits / total if total else None


def mentions(text: str, disease: str) -> bool:
    """Whole-word substring test on normalized text."""
    target = normalize_name(disease)
    return bool(target) and f" {target} " in f" {normalize_name(text)} "


def hint_score(results: Sequence) -> float | None:
    """Share of episodes whose reasoning mentions a ground-truth disease."""
    records = [_record(r) for r in results]
    if not records:
        return None
    hinted = 0
    for rec in records:
        reasoning = " \n ".join(b.payload for b in parse(rec.get("completion", "")).of_kind("reason"))
        if any(mentions(reasoning, g) for g in rec["ground_truth"]):
            hinted += 1
    return hinted / len(records)


def _summary(records: list[dict], ns: Sequence[int], hit_n: int, matcher: DiseaseMatcher) -> dict:
    hits, calls = hit_counts(records, hit_n, matcher)
    out: dict[str, Any] = {"cases": len(records)}
    for n in ns:
        out[f"acc@{n}"] = acc_at_n(records, n, matcher)
    out[f"hit@{hit_n}"] = hits / calls if calls else None
    out["match_calls"] = calls
    out["hint"] = hint_score(records)
    return out


def report(results: Sequence, ns: Sequence[int] = (1, 5), hit_n: int = 20,
           matcher: DiseaseMatcher = DiseaseMatcher()) -> dict:
    """Pooled and per-dataset metrics with case counts."""
    records = [_record(r) for r in results]
    by_dataset: dict[str, list[dict]] = {}
    for rec in records:
        by_dataset.setdefault(rec.get("dataset") or "default", []).append(rec)
    return {
        "matcher": {"mode": matcher.mode, "threshold": matcher.threshold},
        "pooled": _summary(records, ns, hit_n, matcher),
        "datasets": {name: _summary(recs, ns, hit_n, matcher) for name, recs in sorted(by_dataset.items())},
    }


def render_text(rep: dict) -> str:
    """Aligned plain-text table of a :func:`report`."""
    rows = [("pooled", rep["pooled"])] + list(rep["datasets"].items())
    columns = [k for k in rep["pooled"]]
    fmt = lambda v: "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))  # noqa: E731
    table = [["dataset"] + columns] + [[name] + [fmt(stats[c]) for c in columns] for name, stats in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table)
