"""Policy clients: the language model behind a generate() call.

Every client returns text ending at the first stop marker it hits. The
rollout loop re-truncates anyway, so a client that overshoots is harmless.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Generation:
    delta: str
    logprobs: list[float] | None = None
    finished: bool = False


class PolicyTransportError(RuntimeError):
    """The policy host could not be reached after retries."""


class PolicyClient(Protocol):
    def generate(self, context: str, stop: Sequence[str], max_new: int,
                 seed: int | None = None) -> Generation:
        ...


def cut_at_stop(text: str, stop: Sequence[str]) -> tuple[str, str | None]:
    """Text up to and including the earliest stop marker, and that marker."""
    best = None
    for marker in stop:
        i = text.find(marker)
        if i >= 0 and (best is None or i < best[0]):
            best = (i, marker)
    if best is None:
        return text, None
    return text[: best[0] + len(best[1])], best[1]


class ScriptedPolicy:
    """Replays a fixed list of deltas.

    The client is stateless: it finds its place by locating the already
    emitted deltas (as cut at the stop markers) in order inside the context.
    """

    def __init__(self, deltas: Sequence[str], honor_stop: bool = True):
        self.deltas = list(deltas)
        self.honor_stop = honor_stop

    @classmethod
    def from_file(cls, path) -> "ScriptedPolicy":
        return cls(load_replay(path))

    def _position(self, context: str, stop: Sequence[str]) -> int:
        pos = 0
        for i, delta in enumerate(self.deltas):
            kept, _ = cut_at_stop(delta, stop)
            j = context.find(kept, pos) if kept else pos
            if j < 0:
                return i
            pos = j + len(kept)
        return len(self.deltas)

    def generate(self, context, stop, max_new, seed=None):
        i = self._position(context, stop)
        if i >= len(self.deltas):
            return Generation("", [], finished=True)
        delta = self.deltas[i]
        if self.honor_stop:
            delta, _ = cut_at_stop(delta, stop)
        return Generation(delta[:max_new], None, finished=i == len(self.deltas) - 1)


def load_replay(path) -> list[str] | dict[str, list[str]]:
    """A replay file is JSON: a list of deltas, or ``{case_id: [deltas]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "deltas" in data and isinstance(data["deltas"], list):
        return data["deltas"]
    return data


class SampledScriptPolicy:
    """Picks one of several scripts from the episode seed, then replays it."""

    def __init__(self, scripts: Sequence[Sequence[str]], probs: Sequence[float] | None = None):
        self.scripts = [ScriptedPolicy(s) for s in scripts]
        self.probs = None if probs is None else np.asarray(probs, dtype=float)

    def choose(self, seed: int | None) -> int:
        rng = np.random.default_rng(seed)
        return int(rng.choice(len(self.scripts), p=self.probs))

    def generate(self, context, stop, max_new, seed=None):
        index = self.choose(seed)
        gen = self.scripts[index].generate(context, stop, max_new, seed)
        p = 1.0 / len(self.scripts) if self.probs is None else float(self.probs[index])
        gen.logprobs = [math.log(p)]
        return gen


@dataclass
class ToyAgentPolicy:
    """A random agent over a phenotype and disease vocabulary.

    Each call writes a reason block and then one action; the step's randomness
    comes from (seed, len(context)), so episodes replay exactly under a seed.
    """

    phenotypes: Sequence[str]
    diseases: Sequence[str]
    action_probs: dict = field(default_factory=lambda: {
        "lookup": 0.15, "match": 0.35, "search": 0.15, "diagnose": 0.35})
    sources: Sequence[str] = ("WIKI", "PMC", "BOOK")

    def count_tokens(self, text: str) -> int:
        return len(text.split())

    def generate(self, context, stop, max_new, seed=None):
        rng = np.random.default_rng([seed or 0, len(context)])
        actions = list(self.action_probs)
        probs = np.asarray([self.action_probs[a] for a in actions], dtype=float)
        probs /= probs.sum()
        a = int(rng.choice(len(actions), p=probs))
        action = actions[a]
        logprobs = [math.log(probs[a])]

        def pick(pool: Sequence[str], lo: int, hi: int) -> list[str]:
            n = int(rng.integers(lo, min(hi, len(pool)) + 1))
            idx = rng.choice(len(pool), size=n, replace=False)
            logprobs.append(-math.log(math.comb(len(pool), n)))
            return [pool[i] for i in idx]

        thought = " ".join(pick(list(self.phenotypes) + list(self.diseases), 2, 5))
        text = f"<reason> considering {thought} </reason>\n"
        finished = False
        if action == "lookup":
            text += f"<lookup> {', '.join(pick(self.diseases, 1, 3))} </lookup>"
        elif action == "match":
            text += f"<match> {', '.join(pick(self.phenotypes, 2, 5))} </match>"
        elif action == "search":
            src = self.sources[int(rng.integers(len(self.sources)))]
            logprobs.append(-math.log(len(self.sources)))
            text += f"<search> |{src}| {', '.join(pick(self.phenotypes, 1, 3))} </search>"
        else:
            names = pick(self.diseases, 1, 5)
            text += "<diagnose> " + ", ".join(f"\\textbf{{{d}}}" for d in names) + " </diagnose>"
            finished = True
        return Generation(text[:max_new], logprobs, finished)


class RemotePolicy:
    """JSON-over-HTTP client: POST {context, stop, max_new, seed} -> {delta, finished, logprobs}."""

    def __init__(self, url: str, timeout: float = 60.0, retries: int = 2, backoff: float = 0.5,
                 client=None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.client = client  # optional httpx.Client

    def generate(self, context, stop, max_new, seed=None):
        import httpx

        body = {"context": context, "stop": list(stop), "max_new": max_new}
        if seed is not None:
            body["seed"] = seed
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                post = self.client.post if self.client is not None else httpx.post
                resp = post(self.url, json=body, timeout=self.timeout)
                resp.raise_for_status()
                data = resp.json()
                return Generation(str(data.get("delta", "")), data.get("logprobs"),
                                  bool(data.get("finished", False)))
            except (httpx.HTTPError, ValueError, AttributeError) as exc:
                last = exc
                log.warning("policy request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise PolicyTransportError(f"policy at {self.url} unreachable: {last}")
