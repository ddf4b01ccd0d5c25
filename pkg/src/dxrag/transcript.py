"""Tag grammar for episode transcripts.

A transcript is a sequence of blocks ``<kind> payload </kind>``. Active blocks
are written by the agent, passive blocks are injected by the environment:

    active:  reason (also spelled think), lookup, match, search, diagnose
    passive: guide (after lookup), refer (after match), result (after search)

Blocks do not nest. Any tag that arrives while a block is open, other than
that block's own closing tag, ends the open block as unclosed. Parsing never
fails; :func:`validate` turns structural problems into coded violations.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .text import normalize_term, split_list

ACTIVE = ("reason", "lookup", "match", "search", "diagnose")
PASSIVE = ("guide", "refer", "result")
KINDS = ACTIVE + PASSIVE
TAG_ALIASES = {"think": "reason"}
PAIRED_PASSIVE = {"lookup": "guide", "match": "refer", "search": "result"}
PASSIVE_OWNER = {v: k for k, v in PAIRED_PASSIVE.items()}
ACTIVE_CLOSE_MARKERS = tuple(f"</{k}>" for k in PAIRED_PASSIVE)

TAG_RE = re.compile(r"<(/?)(reason|think|lookup|guide|match|refer|search|result|diagnose)>")
SEARCH_PAYLOAD_RE = re.compile(r"^\s*\|(WIKI|PMC|BOOK)\|\s*(.*?)\s*$", re.DOTALL)
BOLD_OPEN = "\\textbf{"


@dataclass(frozen=True)
class TagToken:
    kind: str
    closing: bool
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class ActionBlock:
    kind: str
    payload: str
    span: tuple[int, int]
    index: int
    open_tag: str
    close_tag: str | None  # None when the block was never closed

    @property
    def closed(self) -> bool:
        return self.close_tag is not None

    @property
    def truncated(self) -> bool:
        return self.close_tag is None

    @property
    def active(self) -> bool:
        return self.kind in ACTIVE


def tag_tokens(text: str) -> list[TagToken]:
    return [
        TagToken(TAG_ALIASES.get(m.group(2), m.group(2)), bool(m.group(1)), m.start(), m.end(), m.group(0))
        for m in TAG_RE.finditer(text)
    ]


def extract_bold(text: str) -> list[str]:
    """Contents of every balanced ``\\textbf{...}`` in ``text``, whitespace-trimmed.

    Nested braces are kept inside the item; an unbalanced marker is ignored.
    """
    out = []
    pos = 0
    while True:
        start = text.find(BOLD_OPEN, pos)
        if start < 0:
            return out
        i = start + len(BOLD_OPEN)
        depth = 1
        while i < len(text) and depth:
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
            i += 1
        if depth:
            pos = start + len(BOLD_OPEN)
            continue
        item = text[start + len(BOLD_OPEN): i - 1].strip()
        if item:
            out.append(item)
        pos = i


def parse_search_payload(payload: str) -> tuple[str, list[str]] | None:
    """``|SRC| q1, q2`` -> (SRC, [q1, q2]); None when the prefix is missing."""
    m = SEARCH_PAYLOAD_RE.match(payload)
    if not m:
        return None
    return m.group(1), split_list(m.group(2))


@dataclass
class Transcript:
    raw: str
    blocks: list[ActionBlock]
    tokens: list[TagToken]
    stray: list[TagToken] = field(default_factory=list)

    def of_kind(self, kind: str) -> list[ActionBlock]:
        return [b for b in self.blocks if b.kind == kind]

    @property
    def diagnoses(self) -> list[str]:
        for block in self.blocks:
            if block.kind == "diagnose" and block.closed:
                return extract_bold(block.payload)
        return []

    @property
    def match_specs(self) -> list[list[str]]:
        return [split_list(b.payload) for b in self.of_kind("match")]

    @property
    def lookup_specs(self) -> list[list[str]]:
        return [split_list(b.payload) for b in self.of_kind("lookup")]

    @property
    def lookup_spec(self) -> list[str] | None:
        specs = self.lookup_specs
        return specs[0] if specs else None

    @property
    def search_specs(self) -> list[tuple[str | None, list[str]]]:
        out = []
        for b in self.of_kind("search"):
            parsed = parse_search_payload(b.payload)
            out.append(parsed if parsed else (None, split_list(b.payload)))
        return out

    def gaps(self) -> list[tuple[int, int]]:
        """Character ranges not covered by any block."""
        out, pos = [], 0
        for b in self.blocks:
            if b.span[0] > pos:
                out.append((pos, b.span[0]))
            pos = b.span[1]
        if pos < len(self.raw):
            out.append((pos, len(self.raw)))
        return out

    def render(self, canonical_reason: str | None = None) -> str:
        """Rebuild the text from blocks and gaps.

        With ``canonical_reason`` set, reason blocks are re-tagged with that spelling.
        """
        pieces = []
        pos = 0
        for b in self.blocks:
            pieces.append(self.raw[pos:b.span[0]])
            open_tag, close_tag = b.open_tag, b.close_tag
            if canonical_reason and b.kind == "reason":
                open_tag = f"<{canonical_reason}>"
                close_tag = f"</{canonical_reason}>" if close_tag else None
            pieces.append(open_tag + b.payload + (close_tag or ""))
            pos = b.span[1]
        pieces.append(self.raw[pos:])
        return "".join(pieces)


def parse(text: str) -> Transcript:
    tokens = tag_tokens(text)
    blocks: list[ActionBlock] = []
    stray: list[TagToken] = []
    current: TagToken | None = None

    def finish(end: int, close: TagToken | None):
        payload_end = close.start if close else end
        blocks.append(ActionBlock(
            kind=current.kind,
            payload=text[current.end:payload_end],
            span=(current.start, close.end if close else end),
            index=len(blocks),
            open_tag=current.text,
            close_tag=close.text if close else None,
        ))

    for tok in tokens:
        if current is not None:
            if tok.closing and tok.kind == current.kind:
                finish(tok.end, tok)
                current = None
                continue
            finish(tok.start, None)
            current = None
        if tok.closing:
            stray.append(tok)
        else:
            current = tok
    if current is not None:
        finish(len(text), None)
    return Transcript(text, blocks, tokens, stray)


# -- validation -------------------------------------------------------------

RULES = {
    "R1": "exactly one <diagnose> and one </diagnose> tag",
    "R2": "</diagnose> appears before <diagnose>",
    "R3": "diagnose block without a bold disease",
    "R4": "too many bold diseases in the diagnose block",
    "R5": "too many match blocks",
    "R6": "unmatched search tags or an unclosed/stray tag",
    "R7": "match not immediately followed by refer, or passive block without its action",
    "R8": "too many lookup blocks or looked-up diseases",
    "R9": "too many search blocks or malformed search payload",
    "R10": "text outside of tags",
    "R11": "match/lookup payload content of the wrong kind",
    "R12": "consecutive tool actions without a reason block between them",
}
DEFAULT_GATING = frozenset({"R1", "R2", "R3", "R4", "R5", "R6", "R7", "R9", "R10"})


@dataclass(frozen=True)
class FormatLimits:
    max_match: int = 3
    max_search: int = 2
    max_lookup: int = 1
    max_diagnoses: int = 5
    max_lookup_diseases: int = 10
    max_search_queries: int = 3
    gating: frozenset = DEFAULT_GATING

    @classmethod
    def strict(cls, **kwargs) -> "FormatLimits":
        return cls(gating=frozenset(RULES), **kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gating"] = sorted(self.gating)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FormatLimits":
        data = dict(data)
        if "gating" in data:
            unknown = set(data["gating"]) - set(RULES)
            if unknown:
                raise ValueError(f"unknown rule codes {sorted(unknown)}")
            data["gating"] = frozenset(data["gating"])
        return cls(**data)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    span: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message,
                "span": list(self.span) if self.span else None}


@dataclass
class FormatReport:
    violations: list[Violation]  # rules that gate the format coefficient
    warnings: list[Violation]  # rules that are reported only

    @property
    def sigma_f(self) -> int:
        return 0 if self.violations else 1

    @property
    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    @property
    def all_codes(self) -> set[str]:
        return {v.code for v in self.violations + self.warnings}

    def to_dict(self) -> dict:
        return {
            "sigma_f": self.sigma_f,
            "violations": [v.to_dict() for v in self.violations],
            "warnings": [v.to_dict() for v in self.warnings],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def check_rules(t: Transcript, limits: FormatLimits = FormatLimits(),
                guideline_names: Iterable[str] | None = None) -> list[Violation]:
    """Every rule failure, gating or not, in rule order."""
    out: list[Violation] = []

    def add(code: str, detail: str, span=None):
        out.append(Violation(code, f"{RULES[code]}: {detail}", span))

    count = {(tok.kind, tok.closing): 0 for tok in t.tokens}
    for tok in t.tokens:
        count[(tok.kind, tok.closing)] += 1
    n_open = lambda k: count.get((k, False), 0)  # noqa: E731
    n_close = lambda k: count.get((k, True), 0)  # noqa: E731

    # R1/R2
    if n_open("diagnose") != 1 or n_close("diagnose") != 1:
        add("R1", f"{n_open('diagnose')} opening and {n_close('diagnose')} closing tags")
    opens = [tok for tok in t.tokens if tok.kind == "diagnose" and not tok.closing]
    closes = [tok for tok in t.tokens if tok.kind == "diagnose" and tok.closing]
    if opens and closes and closes[0].start < opens[0].start:
        add("R2", "closing tag precedes opening tag", (closes[0].start, closes[0].end))

    # R3/R4
    for b in t.of_kind("diagnose"):
        if not b.closed:
            continue
        n_bold = len(extract_bold(b.payload))
        if n_bold == 0:
            add("R3", "no \\textbf{} disease", b.span)
        elif n_bold > limits.max_diagnoses:
            add("R4", f"{n_bold} > {limits.max_diagnoses}", b.span)

    # R5
    if n_open("match") > limits.max_match:
        add("R5", f"{n_open('match')} > {limits.max_match}")

    # R6
    if n_open("search") != n_close("search"):
        add("R6", f"{n_open('search')} <search> vs {n_close('search')} </search>")
    for b in t.blocks:
        if not b.closed:
            add("R6", f"<{b.kind}> is never closed", b.span)
    for tok in t.stray:
        add("R6", f"stray {tok.text}", (tok.start, tok.end))

    # R7
    for i, b in enumerate(t.blocks):
        nxt = t.blocks[i + 1] if i + 1 < len(t.blocks) else None
        prev = t.blocks[i - 1] if i > 0 else None
        if b.kind == "match" and not (nxt and nxt.kind == "refer" and nxt.closed):
            add("R7", "match without a following refer", b.span)
        if b.kind in PASSIVE and not (prev and prev.kind == PASSIVE_OWNER[b.kind] and prev.closed):
            add("R7", f"<{b.kind}> does not follow <{PASSIVE_OWNER[b.kind]}>", b.span)

    # R8
    if n_open("lookup") > limits.max_lookup:
        add("R8", f"{n_open('lookup')} lookup blocks > {limits.max_lookup}")
    for b in t.of_kind("lookup"):
        n = len(split_list(b.payload))
        if n > limits.max_lookup_diseases:
            add("R8", f"{n} diseases > {limits.max_lookup_diseases}", b.span)

    # R9
    if n_open("search") > limits.max_search:
        add("R9", f"{n_open('search')} search blocks > {limits.max_search}")
    for b in t.of_kind("search"):
        if not b.closed:
            continue
        parsed = parse_search_payload(b.payload)
        if parsed is None:
            add("R9", "payload lacks a |WIKI|, |PMC| or |BOOK| prefix", b.span)
        elif not 1 <= len(parsed[1]) <= limits.max_search_queries:
            add("R9", f"{len(parsed[1])} queries (allowed 1..{limits.max_search_queries})", b.span)

    # R10
    stray_spans = [(tok.start, tok.end) for tok in t.stray]
    for start, end in t.gaps():
        text = t.raw[start:end]
        for s, e in stray_spans:
            if start <= s and e <= end:
                text = text.replace(t.raw[s:e], "", 1)
        if text.strip():
            add("R10", repr(text.strip()[:40]), (start, end))

    # R11
    if guideline_names is not None:
        names = {normalize_term(n) for n in guideline_names}
        for b in t.of_kind("match"):
            bad = [p for p in split_list(b.payload) if normalize_term(p) in names]
            if bad:
                add("R11", f"match lists diseases {bad}", b.span)
        for b in t.of_kind("lookup"):
            bad = [d for d in split_list(b.payload) if normalize_term(d) not in names]
            if bad:
                add("R11", f"lookup lists unknown diseases {bad}", b.span)

    # R12
    actions = [b for b in t.blocks if b.active]
    for prev, cur in zip(actions, actions[1:]):
        if prev.kind != "reason" and cur.kind != "reason":
            add("R12", f"<{prev.kind}> followed by <{cur.kind}>", cur.span)
    return out


def validate(t: Transcript | str, limits: FormatLimits = FormatLimits(),
             guideline_names: Iterable[str] | None = None) -> FormatReport:
    if isinstance(t, str):
        t = parse(t)
    found = check_rules(t, limits, guideline_names)
    return FormatReport(
        violations=[v for v in found if v.code in limits.gating],
        warnings=[v for v in found if v.code not in limits.gating],
    )


def wrap_block(kind: str, payload: str) -> str:
    return f"<{kind}>{payload}</{kind}>"


_ESCAPE_RE = re.compile(r"<(/?(?:reason|think|lookup|guide|match|refer|search|result|diagnose))>")


def neutralize_tags(text: str) -> str:
    """Defuse tag-like substrings in environment content so it cannot alter the block structure."""
    return _ESCAPE_RE.sub(r"‹\1›", text)


def count_passive(text_or_t: Transcript | str) -> int:
    t = parse(text_or_t) if isinstance(text_or_t, str) else text_or_t
    return sum(1 for b in t.blocks if b.kind in PASSIVE)


def block_kinds(t: Transcript) -> Sequence[str]:
    return [b.kind for b in t.blocks]
