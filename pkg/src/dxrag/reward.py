"""Trajectory rewards: format gate, patient-matching, search and diagnosis
rewards, their weighted combination, and the four-stage weight schedule."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .metrics import DiseaseMatcher
from .text import normalize_term, split_list, token_set
from .transcript import (
    FormatLimits,
    Transcript,
    extract_bold,
    parse,
    parse_search_payload,
    validate,
)


@dataclass(frozen=True)
class RewardWeights:
    w_m: float
    w_s: float
    w_d: float

    def __post_init__(self):
        for name in ("w_m", "w_s", "w_d"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RewardWeights":
        return cls(float(data["w_m"]), float(data["w_s"]), float(data["w_d"]))


def stage_weights(stage: int) -> RewardWeights:
    """Stages 1-3 each emphasize one reward (search, match, diagnosis in that
    order) at 0.9 with 0.05 on the others; stage 4 uses S=0.3, M=0.3, D=0.4."""
    if stage == 1:
        return RewardWeights(w_m=0.05, w_s=0.9, w_d=0.05)
    if stage == 2:
        return RewardWeights(w_m=0.9, w_s=0.05, w_d=0.05)
    if stage == 3:
        return RewardWeights(w_m=0.05, w_s=0.05, w_d=0.9)
    if stage == 4:
        return RewardWeights(w_m=0.3, w_s=0.3, w_d=0.4)
    raise ValueError(f"stage must be 1, 2, 3 or 4, got {stage!r}")


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[RewardWeights, ...] = tuple(stage_weights(s) for s in (1, 2, 3, 4))

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError("a schedule has exactly 4 stages")
        for r, w in enumerate(self.stages[:3]):
            ordered = (w.w_s, w.w_m, w.w_d)
            if ordered[r] != 0.9 or any(v != 0.05 for i, v in enumerate(ordered) if i != r):
                raise ValueError(f"stage {r + 1} must put 0.9 on reward {r + 1} and 0.05 elsewhere")
        last = self.stages[3]
        if (last.w_s, last.w_m, last.w_d) != (0.3, 0.3, 0.4):
            raise ValueError("stage 4 must be (S, M, D) = (0.3, 0.3, 0.4)")

    def stage_of(self, iteration: int, iters: int) -> int:
        """1-based stage for ``iteration`` when ``iters`` are split evenly across stages."""
        per = max(iters, 1) / len(self.stages)
        return min(int(iteration // per), len(self.stages) - 1) + 1

    def weights(self, stage: int) -> RewardWeights:
        return self.stages[stage - 1]


@dataclass(frozen=True)
class RewardConfig:
    k: float = 3.0  # root applied to token coverage fractions
    max_n: int = 6  # most disease mentions allowed across search payloads
    diag_root: bool = True  # apply the same root to the diagnosis similarity
    dedupe_match_in_combo: bool = False  # drop the separate w_M term from the total
    matcher: DiseaseMatcher = DiseaseMatcher()
    limits: FormatLimits = FormatLimits()

    def to_dict(self) -> dict:
        return {
            "k": self.k, "max_n": self.max_n, "diag_root": self.diag_root,
            "dedupe_match_in_combo": self.dedupe_match_in_combo,
            "matcher": {"mode": self.matcher.mode, "threshold": self.matcher.threshold},
            "limits": self.limits.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RewardConfig":
        data = dict(data)
        if "matcher" in data:
            data["matcher"] = DiseaseMatcher(**data["matcher"])
        if "limits" in data:
            data["limits"] = FormatLimits.from_dict(data["limits"])
        return cls(**data)


def token_coverage(truths: Sequence[str], candidates: Iterable[str]) -> float:
    """Fraction of ground-truth tokens (set per diagnosis, summed over diagnoses)
    present among the candidate tokens."""
    pool: set[str] = set()
    for text in candidates:
        pool |= token_set(text)
    total = matched = 0
    for g in truths:
        tokens = token_set(g)
        total += len(tokens)
        matched += len(tokens & pool)
    return matched / total if total else 0.0


def token_similarity(truths: Sequence[str], candidates: Iterable[str], k: float = 3.0,
                     root: bool = True) -> float:
    frac = token_coverage(truths, candidates)
    return frac ** (1.0 / k) if root else frac


_PAREN = re.compile(r"\([^()]*\)")
_BOLD = re.compile(r"\\textbf\{([^{}]*)\}")
_SEPARATORS = re.compile(r"[,;:\n]")


def refer_diagnoses(payload: str) -> list[str]:
    """Candidate disease names listed in a refer block.

    Bold markup is unwrapped, parenthesized detail removed, and the text split
    on commas, semicolons, colons and newlines.
    """
    text = _BOLD.sub(r"\1", payload)
    prev = None
    while prev != text:
        prev, text = text, _PAREN.sub(" ", text)
    out = []
    for piece in _SEPARATORS.split(text):
        piece = piece.strip().strip(".…").strip()
        if piece:
            out.append(piece)
    return out


@dataclass(frozen=True)
class MatchOutcome:
    rwd_m: float
    diversity_ok: bool
    n_match: int
    hit: bool
    defined: bool


def _match_structure_ok(t: Transcript, limits: FormatLimits) -> bool:
    matches = [i for i, b in enumerate(t.blocks) if b.kind == "match"]
    if len(matches) > limits.max_match:
        return False
    for i in matches:
        block = t.blocks[i]
        nxt = t.blocks[i + 1] if i + 1 < len(t.blocks) else None
        if not block.closed or nxt is None or nxt.kind != "refer" or not nxt.closed:
            return False
    return all(b.closed for b in t.of_kind("refer"))


def match_reward(t: Transcript, gt: Sequence[str], matcher: DiseaseMatcher = DiseaseMatcher(),
                 limits: FormatLimits = FormatLimits()) -> MatchOutcome:
    n_match = len(t.of_kind("match"))
    if not _match_structure_ok(t, limits):
        return MatchOutcome(0.0, False, n_match, False, defined=False)
    hit = any(matcher.any_match(refer_diagnoses(b.payload), gt) for b in t.of_kind("refer"))
    penalty = min(0.1 * n_match, 0.3)
    rwd_m = 0.5 - penalty if hit else 0.0 - penalty
    sets = [{normalize_term(p) for p in split_list(b.payload)} for b in t.of_kind("match")]
    diverse = all(len(a ^ b) >= 2 for a, b in zip(sets, sets[1:]))
    if not diverse:
        return MatchOutcome(0.0, False, n_match, hit, defined=True)
    return MatchOutcome(rwd_m, True, n_match, hit, defined=True)


def search_queries(t: Transcript) -> list[str]:
    queries = []
    for b in t.of_kind("search"):
        parsed = parse_search_payload(b.payload)
        queries.extend(parsed[1] if parsed else split_list(b.payload))
    return queries


def search_reward(t: Transcript, gt: Sequence[str], max_n: int = 6, k: float = 3.0) -> float:
    n_search, n_result = len(t.of_kind("search")), len(t.of_kind("result"))
    if n_search != n_result or n_search == 0:
        return 0.0
    queries = search_queries(t)
    if len(queries) > max_n:
        return 0.0
    return token_similarity(gt, queries, k)


def diagnosis_reward(t: Transcript, gt: Sequence[str], match: MatchOutcome, k: float = 3.0,
                     root: bool = True) -> tuple[float, float]:
    """Return (rwd_d, sim_diag)."""
    sim_diag = token_similarity(gt, t.diagnoses, k, root)
    if not match.defined or not match.diversity_ok:
        return 0.0, sim_diag
    return 0.2 + 0.6 * sim_diag + match.rwd_m, sim_diag


def combine(sigma_f: int, rwd_m: float, rwd_s: float, rwd_d: float, w: RewardWeights,
            dedupe_match: bool = False) -> float:
    if not sigma_f:
        return 0.0
    total = w.w_s * rwd_s + w.w_d * rwd_d
    if not dedupe_match:
        total += w.w_m * rwd_m
    return min(max(total, 0.0), 1.0)


@dataclass
class RewardBreakdown:
    sigma_f: int
    rwd_m: float
    rwd_s: float
    rwd_d: float
    combined: float
    n_match: int
    diversity_ok: bool
    sim_diag: float
    weights: RewardWeights
    hit: bool = False
    structural_violation: bool = False
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = self.weights.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RewardBreakdown":
        data = dict(data)
        data["weights"] = RewardWeights.from_dict(data["weights"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def score(transcript: Transcript | str, gt: Sequence[str], weights: RewardWeights = stage_weights(4),
          config: RewardConfig = RewardConfig(),
          guideline_names: Iterable[str] | None = None) -> RewardBreakdown:
    """Full reward breakdown for one transcript against its ground truth."""
    t = parse(transcript) if isinstance(transcript, str) else transcript
    report = validate(t, config.limits, guideline_names)
    match = match_reward(t, gt, config.matcher, config.limits)
    if match.defined:
        rwd_s = search_reward(t, gt, config.max_n, config.k)
        rwd_d, sim_diag = diagnosis_reward(t, gt, match, config.k, config.diag_root)
        rwd_m = match.rwd_m
    else:
        rwd_m = rwd_s = rwd_d = 0.0
        sim_diag = token_similarity(gt, t.diagnoses, config.k, config.diag_root)
    combined = combine(report.sigma_f, rwd_m, rwd_s, rwd_d, weights, config.dedupe_match_in_combo)
    return RewardBreakdown(
        sigma_f=report.sigma_f,
        rwd_m=rwd_m,
        rwd_s=rwd_s,
        rwd_d=rwd_d,
        combined=combined,
        n_match=match.n_match,
        diversity_ok=match.diversity_ok,
        sim_diag=sim_diag,
        weights=weights,
        hit=match.hit,
        structural_violation=not match.defined,
        violations=sorted(report.codes),
        warnings=sorted({v.code for v in report.warnings}),
    )
