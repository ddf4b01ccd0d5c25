"""Canned transcripts for toy training and demos.

Sixteen transcripts for one leukemia case, ranging from a clean search, match
and diagnose run to transcripts that fail the format gate. Their rewards come
from the real reward stack.
"""

from __future__ import annotations

from dataclasses import dataclass

from .reward import RewardConfig, RewardWeights, score

TOY_GT = ("Acute myeloid leukemia",)

_AML_PHEN = "Fatigue, Fever, Pallor, Thrombocytopenia, Anemia"
_ALT_PHEN = "Fatigue, Fever, Splenomegaly, Neutropenia, Bone pain"
_THIRD_PHEN = "Pallor, Easy bruising, Gingival hypertrophy, Leukocytosis"


def _b(kind: str, payload: str) -> str:
    return f"<{kind}> {payload} </{kind}>"


def _reason(text: str = "Weigh the findings before acting.") -> str:
    return _b("reason", text)


def _match(phen: str, hit: bool) -> list[str]:
    refer = ("Acute myeloid leukemia (Fever, Anemia)\nMyelodysplastic syndrome (Anemia)" if hit
             else "Aplastic anemia (Pallor, Anemia)\nMyelodysplastic syndrome (Anemia)")
    return [_b("match", phen), _b("refer", refer)]


def _search(query: str) -> list[str]:
    return [_b("search", f"|PMC| {query}"), _b("result", "[PMC:p1] Marrow blasts above twenty percent.")]


def _diagnose(*names: str) -> str:
    return _b("diagnose", ", ".join(f"\\textbf{{{n}}}" for n in names))


def _join(*parts) -> str:
    flat: list[str] = []
    for p in parts:
        flat.extend(p if isinstance(p, list) else [p])
    return "\n".join(flat)


def _transcripts() -> list[str]:
    r = _reason
    aml, mds, apl = "Acute myeloid leukemia", "Myelodysplastic syndrome", "Aplastic anemia"
    return [
        # 0: match hit, full-coverage search, correct diagnosis
        _join(r(), _match(_AML_PHEN, True), r(), _search("acute myeloid leukemia"), r(), _diagnose(aml, mds)),
        # 1: match hit then correct diagnosis, no search
        _join(r(), _match(_AML_PHEN, True), r(), _diagnose(aml)),
        # 2: two diverse matches, second hits
        _join(r(), _match(_ALT_PHEN, False), r(), _match(_AML_PHEN, True), r(), _diagnose(aml)),
        # 3: partial search coverage
        _join(r(), _search("myeloid blasts"), r(), _diagnose(aml)),
        # 4: match miss, wrong diagnosis
        _join(r(), _match(_ALT_PHEN, False), r(), _diagnose(apl)),
        # 5: repeated identical match (diversity failure)
        _join(r(), _match(_AML_PHEN, True), r(), _match(_AML_PHEN, True), r(), _diagnose(aml)),
        # 6: no tools, correct diagnosis
        _join(r(), _diagnose(aml)),
        # 7: no tools, partially overlapping diagnosis
        _join(r(), _diagnose("Acute lymphoblastic leukemia")),
        # 8: no tools, wrong diagnosis
        _join(r(), _diagnose(mds)),
        # 9: missing diagnose block (gate fails)
        _join(r(), _match(_AML_PHEN, True), r()),
        # 10: text outside tags (gate fails)
        _join(r(), "stray words", _diagnose(aml)),
        # 11: three matches, one hit
        _join(r(), _match(_ALT_PHEN, False), r(), _match(_THIRD_PHEN, False), r(),
              _match(_AML_PHEN, True), r(), _diagnose(aml)),
        # 12: search without coverage, wrong diagnosis
        _join(r(), _search("bone marrow failure"), r(), _diagnose(apl)),
        # 13: diagnose with no bold item (gate fails)
        _join(r(), _b("diagnose", aml)),
        # 14: match hit but wrong final diagnosis
        _join(r(), _match(_AML_PHEN, True), r(), _diagnose(mds)),
        # 15: unclosed search (gate fails)
        _join(r(), "<search> |PMC| acute myeloid leukemia", _diagnose(aml)),
    ]


@dataclass
class ToyVocabulary:
    transcripts: list[str]
    ground_truth: tuple[str, ...] = TOY_GT

    def reward_fn(self, config: RewardConfig = RewardConfig()):
        def fn(index: int, weights: RewardWeights) -> float:
            return score(self.transcripts[index], self.ground_truth, weights, config).combined
        return fn


def toy_vocabulary() -> ToyVocabulary:
    return ToyVocabulary(_transcripts())
