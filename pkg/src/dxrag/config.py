"""Run configuration: a JSON file validated against a fixed schema.

Unknown keys and type errors are all collected and reported together.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .metrics import MATCHER_MODES, DiseaseMatcher
from .prompts import MODES
from .retrieval.env import EnvConfig
from .reward import RewardConfig, RewardWeights, stage_weights
from .rollout import LENGTH_UNITS, RolloutConfig
from .transcript import RULES, FormatLimits


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


NUM = (int, float)

# section -> key -> accepted python types (None allowed where the default is None)
SCHEMA: dict[str, dict[str, tuple]] = {
    "corpus": {"store": (str, type(None)), "guideline": (str, type(None)),
               "patients": (str, type(None)), "knowledge": (str, type(None)),
               "cases": (str, type(None)), "strict": (bool,)},
    "env": {"tau": NUM, "k_pheno": (int,), "top_n": (int,), "top_k": (int,), "doc_budget": (int,),
            "k1": NUM, "b": NUM, "refer_phenotypes": (int,), "url": (str, type(None))},
    "limits": {"max_match": (int,), "max_search": (int,), "max_lookup": (int,),
               "max_diagnoses": (int,), "max_lookup_diseases": (int,),
               "max_search_queries": (int,), "gating": (list,)},
    "reward": {"k": NUM, "max_n": (int,), "diag_root": (bool,), "dedupe_match_in_combo": (bool,),
               "stage": (int,), "weights": (dict, type(None)),
               "matcher": (str,), "matcher_threshold": NUM},
    "rollout": {"l_max": (int,), "max_new": (int,), "group_size": (int,),
                "enforce_limits": (bool,), "length_unit": (str,), "jobs": (int,)},
    "toy": {"iters": (int,), "G": (int,), "beta": NUM, "lr": NUM, "temperature": NUM,
            "schedule": (str,)},
}
TOP_LEVEL = {"policy": (str,), "mode": (str,), "adversarial": (bool,), "seed": (int,)}

DEFAULTS: dict[str, Any] = {
    "policy": "toy",
    "mode": "agentic",
    "adversarial": False,
    "seed": 0,
    "corpus": {"store": None, "guideline": None, "patients": None, "knowledge": None,
               "cases": None, "strict": False},
    "env": {"tau": 0.5, "k_pheno": 10, "top_n": 20, "top_k": 3, "doc_budget": 1000,
            "k1": 1.5, "b": 0.75, "refer_phenotypes": 5, "url": None},
    "limits": FormatLimits().to_dict(),
    "reward": {"k": 3.0, "max_n": 6, "diag_root": True, "dedupe_match_in_combo": False,
               "stage": 4, "weights": None, "matcher": "normalized_exact", "matcher_threshold": 0.6},
    "rollout": {"l_max": 8192, "max_new": 1024, "group_size": 1,
                "enforce_limits": False, "length_unit": "chars", "jobs": 1},
    "toy": {"iters": 200, "G": 8, "beta": 0.01, "lr": 0.5, "temperature": 1.0, "schedule": "staged"},
}


def _type_ok(value, types: tuple) -> bool:
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def validate_config(data: Any) -> list[str]:
    """Every schema problem in ``data`` (empty when valid)."""
    if not isinstance(data, dict):
        return ["config must be a JSON object"]
    problems = []
    for key, value in data.items():
        if key in TOP_LEVEL:
            if not _type_ok(value, TOP_LEVEL[key]):
                problems.append(f"{key}: expected {TOP_LEVEL[key][0].__name__}")
            continue
        if key not in SCHEMA:
            problems.append(f"unknown key '{key}'")
            continue
        if not isinstance(value, dict):
            problems.append(f"{key}: expected an object")
            continue
        for sub, v in value.items():
            if sub not in SCHEMA[key]:
                problems.append(f"unknown key '{key}.{sub}'")
            elif not _type_ok(v, SCHEMA[key][sub]):
                problems.append(f"{key}.{sub}: expected {SCHEMA[key][sub][0].__name__}")
    if not problems:
        problems += _semantic_problems(merge(DEFAULTS, data))
    return problems


def _semantic_problems(cfg: dict) -> list[str]:
    out = []
    if cfg["mode"] not in MODES:
        out.append(f"mode: must be one of {list(MODES)}")
    policy = cfg["policy"]
    if not (policy == "toy" or policy.startswith(("scripted:", "remote:"))):
        out.append("policy: must be 'toy', 'scripted:<file>' or 'remote:<url>'")
    if cfg["reward"]["stage"] not in (1, 2, 3, 4):
        out.append("reward.stage: must be 1, 2, 3 or 4")
    if cfg["reward"]["matcher"] not in MATCHER_MODES:
        out.append(f"reward.matcher: must be one of {list(MATCHER_MODES)}")
    if cfg["reward"]["k"] <= 0:
        out.append("reward.k: must be positive")
    weights = cfg["reward"]["weights"]
    if weights is not None:
        try:
            RewardWeights.from_dict(weights)
        except (KeyError, TypeError, ValueError) as exc:
            out.append(f"reward.weights: {exc}")
    unknown_rules = set(cfg["limits"]["gating"]) - set(RULES)
    if unknown_rules:
        out.append(f"limits.gating: unknown rules {sorted(unknown_rules)}")
    if cfg["rollout"]["length_unit"] not in LENGTH_UNITS:
        out.append(f"rollout.length_unit: must be one of {list(LENGTH_UNITS)}")
    for key in ("l_max", "max_new", "group_size", "jobs"):
        if cfg["rollout"][key] < 1:
            out.append(f"rollout.{key}: must be at least 1")
    if not 0 <= cfg["env"]["tau"]:
        out.append("env.tau: must be non-negative")
    if cfg["toy"]["schedule"] not in ("staged", "stage4"):
        out.append("toy.schedule: must be 'staged' or 'stage4'")
    if cfg["toy"]["G"] < 2:
        out.append("toy.G: must be at least 2")
    return out


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "weights":
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, data: dict | None = None) -> "RunConfig":
        data = data or {}
        problems = validate_config(data)
        if problems:
            raise ConfigError(problems)
        return cls(merge(DEFAULTS, data))

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError([f"cannot read config {path}: {exc}"])
            except ValueError as exc:
                raise ConfigError([f"config {path} is not valid JSON: {exc}"])
            if not isinstance(data, dict):
                raise ConfigError(["config must be a JSON object"])
        return cls.from_dict(merge(data, overrides or {}))

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    @property
    def limits(self) -> FormatLimits:
        return FormatLimits.from_dict(self.data["limits"])

    @property
    def weights(self) -> RewardWeights:
        w = self.data["reward"]["weights"]
        return RewardWeights.from_dict(w) if w is not None else stage_weights(self.data["reward"]["stage"])

    @property
    def matcher(self) -> DiseaseMatcher:
        r = self.data["reward"]
        return DiseaseMatcher(r["matcher"], r["matcher_threshold"])

    @property
    def reward_config(self) -> RewardConfig:
        r = self.data["reward"]
        return RewardConfig(k=float(r["k"]), max_n=r["max_n"], diag_root=r["diag_root"],
                            dedupe_match_in_combo=r["dedupe_match_in_combo"],
                            matcher=self.matcher, limits=self.limits)

    @property
    def env_config(self) -> EnvConfig:
        e = {k: v for k, v in self.data["env"].items() if k != "url"}
        return EnvConfig(**e)

    @property
    def rollout_config(self) -> RolloutConfig:
        r = self.data["rollout"]
        return RolloutConfig(l_max=r["l_max"], max_new=r["max_new"], mode=self.data["mode"],
                             enforce_limits=r["enforce_limits"], length_unit=r["length_unit"])


def prune_none(overrides: dict) -> dict:
    """Drop None leaves so unset CLI flags do not override file values."""
    out = {}
    for key, value in overrides.items():
        if isinstance(value, dict):
            inner = prune_none(value)
            if inner:
                out[key] = inner
        elif value is not None:
            out[key] = value
    return out
