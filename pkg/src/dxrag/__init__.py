"""Agentic retrieval-augmented diagnosis: corpora, retrieval tools, transcript
grammar, rewards, rollouts, GRPO math, metrics, an HTTP service and a CLI."""

from .corpus import Corpora, DiagnosticCase, GuidelineEntry, KnowledgeChunk, PatientRecord
from .metrics import DiseaseMatcher, acc_at_n, hint_score, hit_at_n
from .reward import RewardBreakdown, RewardWeights, StageSchedule, score, stage_weights
from .transcript import FormatLimits, Transcript, parse, validate

__version__ = "0.1.0"
