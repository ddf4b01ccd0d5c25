"""Prompt templates for the three rollout modes."""

from __future__ import annotations

from string import Template

from .corpus import DiagnosticCase

MODES = ("agentic", "vanilla", "rag_free")

FRAMEWORK_INSTRUCTION = Template(r"""You are a diagnostic assistant. Working from a patient's phenotypes or symptoms, reach a final disease diagnosis by reasoning step by step and consulting the tools below.

Tools
1. Guideline lookup. Write <lookup> disease1, disease2 </lookup> to get the typical phenotypes of up to 10 diseases. The system answers inside <guide> </guide>.
2. Patient record matching. Write <match> phenotype1, phenotype2, phenotype3 </match> to retrieve similar known cases with their diagnoses and symptoms. The system answers inside <refer> </refer>.
3. Knowledge search. Write <search> |WIKI| query1, query2 </search>, <search> |PMC| query1 </search> or <search> |BOOK| query1 </search> to search Wikipedia, PubMed Central or textbooks. Use a single source per search, at most three comma-separated queries, and no commas inside a query. The system answers inside <result> </result>.

Actions
- <think> </think> (active): analysis and reasoning between actions.
- <lookup> </lookup> (active): guideline lookup.
- <guide> </guide> (passive): written by the system after <lookup>.
- <match> </match> (active): patient record matching.
- <refer> </refer> (passive): written by the system after <match>.
- <search> </search> (active): knowledge search.
- <result> </result> (passive): written by the system after <search>.
- <diagnose> </diagnose> (active): the final diagnosis.

Rules
- Put a <think> block between any two active actions.
- Use <lookup> at most once, listing diseases only.
- Use <match> at most three times, listing phenotypes or symptoms only.
- Use <search> at most twice, in the form |SOURCE| query1, query2 with up to three queries.
- End with exactly one <diagnose> block naming up to five candidate diseases, each in LaTeX bold: \textbf{Disease1}, \textbf{Disease2}.
- Write nothing outside the tags.

When you repeat <match>, change the phenotype list: add phenotypes typical of the suspected disease group, swap terms for medical synonyms, include complications or associated findings, add earlier or later stage manifestations, or borrow symptoms from retrieved cases.

The tools may be used in any order and as often as the rules allow.
$mode_note
Patient presentation:
$presentation
""")

RAG_FREE_NOTE = "Call a tool only when you judge that it will help.\n"

VANILLA_INSTRUCTION = Template(r"""You are a diagnostic assistant. Diagnose the patient from the phenotypes or symptoms below. Your answer should only be diseases, with no explanation, each in LaTeX bold: \textbf{Disease1}, \textbf{Disease2}. Give at most 5 diagnoses, wrapped in <diagnose> </diagnose>.

Patient presentation:
$presentation
""")


def build_prompt(case: DiagnosticCase, mode: str = "agentic") -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    presentation = case.presentation_text
    if mode == "vanilla":
        return VANILLA_INSTRUCTION.substitute(presentation=presentation)
    note = RAG_FREE_NOTE if mode == "rag_free" else ""
    return FRAMEWORK_INSTRUCTION.substitute(presentation=presentation, mode_note=note)
