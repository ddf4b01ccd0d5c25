"""Group-relative policy optimization: advantages, KL penalty, the objective,
and a small trainer for categorical toy policies.

The objective is the plain form
    L = mean_i mean_t ( -A_i * log pi(c_it) + beta * KL_t )
with no importance ratio or clipping.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .reward import RewardWeights, StageSchedule

STD_GUARD = 1e-12
PROB_FLOOR = 1e-12


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / std with the population std; a flat group gives zeros."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("advantage normalization needs a group of at least 2 rewards")
    sigma = r.std()
    if sigma < STD_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def kl_term(dist_cur, dist_ref) -> np.ndarray:
    """Exact KL(cur || ref) over the last axis, with both floored at 1e-12."""
    p = np.maximum(np.asarray(dist_cur, dtype=float), PROB_FLOOR)
    q = np.maximum(np.asarray(dist_ref, dtype=float), PROB_FLOOR)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def kl_est(logp_cur, logp_ref) -> np.ndarray:
    """Per-token sampled estimate logp_cur - logp_ref (unbiased in expectation)."""
    return np.asarray(logp_cur, dtype=float) - np.asarray(logp_ref, dtype=float)


@dataclass
class GroupBatch:
    prompt_id: str
    completions: list[Sequence[int]]
    rewards: Sequence[float]
    logp_cur: list[Sequence[float]]
    logp_old: list[Sequence[float]] | None = None
    logp_ref: list[Sequence[float]] | None = None
    dist_cur: list[np.ndarray] | None = None  # per completion: (T, V)
    dist_ref: list[np.ndarray] | None = None

    def __post_init__(self):
        g = len(self.completions)
        if len(self.rewards) != g or len(self.logp_cur) != g:
            raise ValueError("rewards and logp_cur need one entry per completion")
        for name in ("logp_cur", "logp_old", "logp_ref"):
            arrays = getattr(self, name)
            if arrays is None:
                continue
            for c, a in zip(self.completions, arrays):
                if len(a) != len(c):
                    raise ValueError(f"{name} is not aligned with its completion")
        for name in ("dist_cur", "dist_ref"):
            arrays = getattr(self, name)
            if arrays is None:
                continue
            for c, d in zip(self.completions, arrays):
                if np.shape(d)[0] != len(c):
                    raise ValueError(f"{name} is not aligned with its completion")

    @property
    def group_size(self) -> int:
        return len(self.completions)

    def kl(self) -> tuple[list[np.ndarray], str]:
        """Per-token KL for every completion and the estimator used."""
        if self.dist_cur is not None and self.dist_ref is not None:
            return [kl_term(c, r) for c, r in zip(self.dist_cur, self.dist_ref)], "exact"
        if self.logp_ref is not None:
            return [kl_est(c, r) for c, r in zip(self.logp_cur, self.logp_ref)], "sampled"
        return [np.zeros(len(c)) for c in self.completions], "none"


def grpo_objective(batch: GroupBatch, beta: float = 0.01,
                   advantages: Sequence[float] | None = None) -> float:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    adv = group_advantages(batch.rewards) if advantages is None else np.asarray(advantages, dtype=float)
    kls, _ = batch.kl()
    per_completion = []
    for a, logp, kl in zip(adv, batch.logp_cur, kls):
        logp = np.asarray(logp, dtype=float)
        if logp.size == 0:
            per_completion.append(0.0)
            continue
        per_completion.append(float(np.mean(-a * logp + beta * kl)))
    return float(np.mean(per_completion))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class ToyPolicy:
    """Categorical policy softmax(logits / temperature) over a finite vocabulary."""

    logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float).copy()
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits / self.temperature)

    def log_probs(self) -> np.ndarray:
        z = self.logits / self.temperature
        return z - (z.max() + np.log(np.exp(z - z.max()).sum()))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.logits.size, size=size, p=self.probs)


def toy_loss(logits, temperature: float, choices: Sequence[int], advantages: Sequence[float],
             beta: float, ref_probs) -> float:
    """GRPO objective for single-token completions drawn from a toy policy."""
    pol = ToyPolicy(logits, temperature)
    logp = pol.log_probs()
    adv = np.asarray(advantages, dtype=float)
    kl = float(kl_term(pol.probs, ref_probs))
    return float(np.mean(-adv * logp[np.asarray(choices)]) + beta * kl)


def toy_grad(logits, temperature: float, choices: Sequence[int], advantages: Sequence[float],
             beta: float, ref_probs) -> np.ndarray:
    """Analytic gradient of :func:`toy_loss` with respect to the logits."""
    pol = ToyPolicy(logits, temperature)
    p = pol.probs
    adv = np.asarray(advantages, dtype=float)
    g = np.zeros_like(p)
    for c, a in zip(choices, adv):
        onehot = np.zeros_like(p)
        onehot[c] = 1.0
        g -= a * (onehot - p)
    g /= len(adv)
    pf = np.maximum(p, PROB_FLOOR)
    q = np.maximum(np.asarray(ref_probs, dtype=float), PROB_FLOOR)
    log_ratio = np.log(pf) - np.log(q)
    kl = float(np.sum(pf * log_ratio))
    g += beta * p * (log_ratio - kl)
    return g / temperature


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)
    final_probs: list[float] = field(default_factory=list)

    FIELDS = ("iteration", "stage", "w_s", "w_m", "w_d", "mean_reward", "sample_reward",
              "loss", "kl", "p_max")

    def mean_rewards(self) -> np.ndarray:
        return np.asarray([r["mean_reward"] for r in self.rows])

    def per_stage(self) -> dict[int, dict]:
        out: dict[int, dict] = {}
        for r in self.rows:
            s = out.setdefault(r["stage"], {"iterations": 0, "mean_reward": 0.0,
                                            "weights": (r["w_s"], r["w_m"], r["w_d"])})
            s["iterations"] += 1
            s["mean_reward"] += r["mean_reward"]
        for s in out.values():
            s["mean_reward"] /= s["iterations"]
        return out

    def summary(self) -> dict:
        m = self.mean_rewards()
        if m.size == 0:
            return {"iterations": 0}
        first, last = float(m[0]), float(m[-1])
        return {
            "iterations": int(m.size),
            "first_mean_reward": first,
            "last_mean_reward": last,
            "relative_gain": (last - first) / abs(first) if first else None,
            "final_p_max": max(self.final_probs) if self.final_probs else None,
            "argmax": int(np.argmax(self.final_probs)) if self.final_probs else None,
            "per_stage": {str(k): v for k, v in self.per_stage().items()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: r[k] for k in self.FIELDS})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "final_probs": self.final_probs,
                           "summary": self.summary()}, sort_keys=True)


RewardFn = Callable[[int, RewardWeights], float]


def train_toy(policy: ToyPolicy, reward_fn: RewardFn,
              schedule: StageSchedule | RewardWeights = StageSchedule(),
              iters: int = 200, G: int = 8, beta: float = 0.01, lr: float = 0.5,
              seed: int = 0, ref_probs=None) -> TrainTrace:
    """Train ``policy`` in place by gradient descent on the GRPO objective.

    ``reward_fn(index, weights)`` scores vocabulary element ``index``. A
    :class:`StageSchedule` splits the iterations evenly over its stages; fixed
    :class:`RewardWeights` are logged as stage 0. The reference policy is the
    starting policy unless ``ref_probs`` is given. ``mean_reward`` in the trace
    is the exact expected reward under the current policy.
    """
    if G < 2:
        raise ValueError("G must be at least 2")
    rng = np.random.default_rng(seed)
    ref = policy.probs if ref_probs is None else np.asarray(ref_probs, dtype=float)
    vocab = policy.logits.size
    table: dict[RewardWeights, np.ndarray] = {}
    trace = TrainTrace()
    for it in range(iters):
        if isinstance(schedule, StageSchedule):
            stage = schedule.stage_of(it, iters)
            w = schedule.weights(stage)
        else:
            stage, w = 0, schedule
        if w not in table:
            table[w] = np.asarray([reward_fn(v, w) for v in range(vocab)], dtype=float)
        rewards_all = table[w]
        p = policy.probs
        mean_reward = float(p @ rewards_all)
        if math.isnan(mean_reward):
            raise TrainingDiverged(f"mean reward became NaN at iteration {it}")
        choices = policy.sample(rng, G)
        rewards = rewards_all[choices]
        adv = group_advantages(rewards)
        loss = toy_loss(policy.logits, policy.temperature, choices, adv, beta, ref)
        kl = float(kl_term(p, ref))
        trace.rows.append({
            "iteration": it, "stage": stage, "w_s": w.w_s, "w_m": w.w_m, "w_d": w.w_d,
            "mean_reward": mean_reward, "sample_reward": float(rewards.mean()),
            "loss": loss, "kl": kl, "p_max": float(p.max()),
        })
        grad = toy_grad(policy.logits, policy.temperature, choices, adv, beta, ref)
        policy.logits = policy.logits - lr * grad
        if not np.all(np.isfinite(policy.logits)):
            raise TrainingDiverged(f"logits became non-finite at iteration {it}")
    trace.final_probs = [float(x) for x in policy.probs]
    return trace
