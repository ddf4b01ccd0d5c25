"""Interleaved generation and retrieval episodes.

The policy writes until it closes a tool block; the loop cuts the text at that
closing tag, asks the environment, splices the feedback in as the paired
passive block, and hands the grown context back to the policy.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .corpus import DiagnosticCase
from .policies import Generation, PolicyClient, PolicyTransportError, cut_at_stop
from .prompts import build_prompt
from .retrieval.env import EnvResponse, ToolEnvironment
from .retrieval.tools import NO_REFERENCE, ToolError
from .reward import RewardBreakdown, RewardConfig, RewardWeights, score, stage_weights
from .transcript import (
    ACTIVE_CLOSE_MARKERS,
    PAIRED_PASSIVE,
    PASSIVE,
    FormatLimits,
    Transcript,
    parse,
    tag_tokens,
)

log = logging.getLogger(__name__)

STATUSES = ("running", "diagnosed", "truncated", "malformed")
LENGTH_UNITS = ("chars", "provider_tokens")


@dataclass(frozen=True)
class RolloutConfig:
    l_max: int = 8192
    max_new: int = 1024
    mode: str = "agentic"
    enforce_limits: bool = False  # stop as malformed once a tool count exceeds its limit
    length_unit: str = "chars"

    def __post_init__(self):
        if self.l_max <= 0 or self.max_new <= 0:
            raise ValueError("l_max and max_new must be positive")
        if self.length_unit not in LENGTH_UNITS:
            raise ValueError(f"length_unit must be one of {LENGTH_UNITS}")


@dataclass
class EpisodeResult:
    case_id: str
    dataset: str
    sample: int
    seed: int
    mode: str
    status: str
    prompt: str
    completion: str
    ground_truth: list[str]
    transcript: Transcript
    reward: RewardBreakdown
    env_trace: list[EnvResponse] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    policy_passive: bool = False
    error: str | None = None

    @property
    def final_text(self) -> str:
        return self.prompt + self.completion

    @property
    def diagnoses(self) -> list[str]:
        return self.transcript.diagnoses

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dataset": self.dataset,
            "sample": self.sample,
            "seed": self.seed,
            "mode": self.mode,
            "status": self.status,
            "prompt": self.prompt,
            "completion": self.completion,
            "ground_truth": list(self.ground_truth),
            "diagnoses": self.diagnoses,
            "reward": self.reward.to_dict(),
            "env_trace": [r.to_dict() for r in self.env_trace],
            "logprobs": list(self.logprobs),
            "policy_passive": self.policy_passive,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def wrap_feedback(kind: str, feedback: str) -> str:
    passive = PAIRED_PASSIVE[kind]
    return f"\n<{passive}>\n{feedback}\n</{passive}>\n"


def gate_policy_passive(reward: RewardBreakdown) -> RewardBreakdown:
    """Zero a reward whose transcript contains policy-written passive tags."""
    return replace(reward, sigma_f=0, combined=0.0,
                   violations=sorted(set(reward.violations) | {"policy_passive"}))


def _emits_passive(delta: str) -> bool:
    return any(tok.kind in PASSIVE for tok in tag_tokens(delta))


def _closed_block(completion: str, marker: str):
    """The active block that ``marker`` closes at the end of ``completion``."""
    kind = marker[2:-1]
    blocks = parse(completion).blocks
    if blocks and blocks[-1].kind == kind and blocks[-1].closed:
        return blocks[-1]
    return None


def _clip(text: str, room: int) -> str:
    return text if len(text) <= room else text[: max(room, 0)]


def run_episode(case: DiagnosticCase, policy: PolicyClient, env: ToolEnvironment | None,
                limits: FormatLimits = FormatLimits(), l_max: int | None = None, *,
                config: RolloutConfig = RolloutConfig(), seed: int = 0, sample: int = 0,
                weights: RewardWeights = stage_weights(4),
                reward_config: RewardConfig | None = None,
                guideline_names=None,
                length_fn: Callable[[str], int] | None = None) -> EpisodeResult:
    """Run one episode for ``case`` and score it.

    Never raises for tool errors: a failing tool yields "no reference". A policy
    transport failure ends the episode as malformed.
    """
    if l_max is not None:
        config = replace(config, l_max=l_max)
    reward_config = reward_config or RewardConfig(limits=limits)
    measure = length_fn or len
    prompt = build_prompt(case, config.mode)
    bound = env.for_case(case) if env is not None else None
    completion = ""
    trace: list[EnvResponse] = []
    logprobs: list[float] = []
    counts = {k: 0 for k in PAIRED_PASSIVE}
    policy_passive = False
    status = "running"
    error = None
    budget = config.l_max + config.max_new

    while status == "running":
        try:
            gen: Generation = policy.generate(prompt + completion, list(ACTIVE_CLOSE_MARKERS),
                                              config.max_new, seed)
        except PolicyTransportError as exc:
            status, error = "malformed", f"policy_transport: {exc}"
            break
        delta = gen.delta[: config.max_new]
        cut, marker = cut_at_stop(delta, ACTIVE_CLOSE_MARKERS)
        if gen.logprobs:
            logprobs.extend(float(x) for x in gen.logprobs)
        if _emits_passive(cut):
            policy_passive = True
        completion += cut

        if marker is None:
            status = "truncated" if measure(completion) >= config.l_max else "finished"
            break
        if measure(completion) >= config.l_max:
            status = "truncated"
            break

        kind = marker[2:-1]
        counts[kind] += 1
        if config.enforce_limits and counts[kind] > _limit(limits, kind):
            status, error = "malformed", f"{kind} limit exceeded"
            break
        block = _closed_block(completion, marker)
        response = _call(bound, kind, block.payload if block else None, config.mode)
        trace.append(response)
        room = budget - len(completion)
        completion += _clip(wrap_feedback(kind, response.feedback), room)
        if measure(completion) >= config.l_max:
            status = "truncated"

    transcript = parse(completion)
    if status in ("running", "finished", "truncated"):
        has_diagnosis = any(b.closed for b in transcript.of_kind("diagnose"))
        if has_diagnosis:
            status = "diagnosed"
        elif status != "truncated":
            status = "malformed"
    if policy_passive:
        status = "malformed"
    reward = score(transcript, case.ground_truth_diagnoses, weights, reward_config, guideline_names)
    if policy_passive:
        reward = gate_policy_passive(reward)
    return EpisodeResult(
        case_id=case.case_id, dataset=case.dataset, sample=sample, seed=seed, mode=config.mode,
        status=status, prompt=prompt, completion=completion,
        ground_truth=list(case.ground_truth_diagnoses), transcript=transcript, reward=reward,
        env_trace=trace, logprobs=logprobs, policy_passive=policy_passive, error=error,
    )


def _limit(limits: FormatLimits, kind: str) -> int:
    return {"lookup": limits.max_lookup, "match": limits.max_match, "search": limits.max_search}[kind]


def _call(env: ToolEnvironment | None, kind: str, payload: str | None, mode: str) -> EnvResponse:
    query = payload or ""
    if mode == "vanilla" or env is None:
        return EnvResponse(kind, query, NO_REFERENCE, [], "retrieval_disabled")
    if payload is None:
        return EnvResponse(kind, query, NO_REFERENCE, [], "invalid_query")
    try:
        return env.respond(kind, payload)
    except ToolError as exc:
        return EnvResponse(kind, query, NO_REFERENCE, [], exc.code)
    except Exception as exc:  # an environment bug must not end the episode
        log.warning("tool %s failed: %s", kind, exc)
        return EnvResponse(kind, query, NO_REFERENCE, [], "internal_error")


@dataclass
class CaseResults:
    case: DiagnosticCase
    episodes: list[EpisodeResult | None]
    errors: list[str | None]


def episode_seeds(base_seed: int, group_size: int) -> list[int]:
    return [base_seed + j for j in range(group_size)]


def run_batch(cases: Sequence[DiagnosticCase], policy: PolicyClient, env: ToolEnvironment | None,
              limits: FormatLimits = FormatLimits(), l_max: int | None = None,
              group_size: int = 1, *, base_seed: int = 0, jobs: int = 1,
              **episode_kwargs) -> list[CaseResults]:
    """``group_size`` seeded episodes per case, ordered by (case, sample).

    Sample ``j`` uses seed ``base_seed + j``. An exception in one episode is
    recorded in ``errors`` and leaves its slot as None.
    """
    if group_size < 1:
        raise ValueError("group_size must be at least 1")
    seeds = episode_seeds(base_seed, group_size)
    jobs_list = [(ci, j) for ci in range(len(cases)) for j in range(group_size)]

    def work(item):
        ci, j = item
        try:
            return run_episode(cases[ci], policy, env, limits, l_max, seed=seeds[j], sample=j,
                               **episode_kwargs), None
        except Exception as exc:
            log.exception("episode %s/%d failed", cases[ci].case_id, j)
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, jobs_list))
    else:
        outcomes = [work(item) for item in jobs_list]

    out = []
    for ci, case in enumerate(cases):
        chunk = outcomes[ci * group_size:(ci + 1) * group_size]
        out.append(CaseResults(case, [e for e, _ in chunk], [err for _, err in chunk]))
    return out


def write_results(path, batches: Sequence[CaseResults]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for batch in batches:
            for ep in batch.episodes:
                if ep is not None:
                    fh.write(ep.to_json() + "\n")
                    n += 1
    return n
