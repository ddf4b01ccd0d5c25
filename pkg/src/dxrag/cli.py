"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .config import ConfigError, RunConfig, prune_none
from .corpus import CorpusError, DiagnosticCase
from .metrics import MATCHER_MODES, DiseaseMatcher, render_text, report
from .policies import RemotePolicy, ScriptedPolicy, ToyAgentPolicy, load_replay
from .retrieval.env import DiagnosticEnvironment, adversarial_wrap
from .reward import RewardBreakdown, StageSchedule, score, stage_weights
from .rollout import gate_policy_passive, run_batch
from .text import split_list
from .transcript import FormatLimits, validate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
log = logging.getLogger("dxrag")


class DataError(Exception):
    pass


def _read_jsonl(path) -> list[dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{n}: invalid JSON: {exc}")
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{n}: expected a JSON object")
        out.append(rec)
    return out


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") or not text else text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") or not text else text + "\n")


def _print_config(cfg: RunConfig) -> None:
    print(cfg.to_json(), file=sys.stderr)


def _load_config(args, overrides: dict) -> RunConfig:
    overrides = prune_none(overrides)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = RunConfig.load(getattr(args, "config", None), overrides)
    _print_config(cfg)
    return cfg


def _load_corpora(cfg: RunConfig):
    c = cfg["corpus"]
    if c["store"]:
        return corpus_mod.load_store_dir(c["store"], c["strict"])
    if c["guideline"] and c["patients"] and c["knowledge"]:
        return corpus_mod.load_corpora(c["guideline"], c["patients"], c["knowledge"], c["strict"])
    raise ConfigError(["corpus: give corpus.store or all of corpus.guideline/patients/knowledge"])


def _make_env(cfg: RunConfig, corpora=None):
    if cfg["env"]["url"]:
        from .service import RemoteEnvironment

        return RemoteEnvironment(cfg["env"]["url"], cfg.env_config)
    return DiagnosticEnvironment(corpora if corpora is not None else _load_corpora(cfg), cfg.env_config)


def cmd_ingest(args) -> int:
    corpora = corpus_mod.load_corpora(args.guideline, args.patients, args.knowledge, args.strict)
    out = corpus_mod.save_store_dir(corpora, args.out)
    summary = {
        "store": str(out),
        "counts": {"guideline": len(corpora.guideline), "patients": len(corpora.patients),
                   "knowledge": len(corpora.knowledge)},
        "skipped": {"guideline": corpora.guideline.skipped, "patients": corpora.patients.skipped,
                    "knowledge": corpora.knowledge.skipped},
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_serve(args) -> int:
    import os

    from .service import ENV_STORE, ENV_SUMMARIZER, TOOLS, RemoteSummarizer, ServiceConfig, serve

    cfg = _load_config(args, {"corpus": {"store": args.store or os.environ.get(ENV_STORE)}})
    only = tuple(args.only.split(",")) if args.only else TOOLS
    try:
        service_config = ServiceConfig(max_batch=args.max_batch, timeout=args.timeout,
                                       workers=args.workers, only=only)
    except ValueError as exc:
        raise ConfigError([str(exc)])
    url = args.summarizer_url or os.environ.get(ENV_SUMMARIZER)
    if args.summarizer == "remote" and not url:
        raise ConfigError(["--summarizer remote needs --summarizer-url or $" + ENV_SUMMARIZER])
    summarizer = RemoteSummarizer(url, args.timeout) if args.summarizer == "remote" else None

    def factory():
        corpora = _load_corpora(cfg)
        return DiagnosticEnvironment(corpora, cfg.env_config, summarizer=summarizer)

    serve(factory, args.host, args.port, service_config)
    return EXIT_OK


def _policy_vocab(cases, corpora) -> tuple[list[str], list[str]]:
    phenotypes = sorted({p for c in cases for p in split_list(c.presentation_text)})
    diseases = sorted({e.disease_name for e in corpora.guideline.items}) if corpora else []
    diseases = diseases or sorted({g for c in cases for g in c.ground_truth_diagnoses})
    return phenotypes or ["fever"], diseases


def cmd_rollout(args) -> int:
    cfg = _load_config(args, {
        "policy": args.policy, "mode": args.mode, "adversarial": args.adversarial or None,
        "corpus": {"store": args.store, "cases": args.cases},
        "env": {"url": args.env_url},
        "reward": {"stage": args.stage},
        "rollout": {"l_max": args.l_max, "group_size": args.group_size, "jobs": args.jobs},
    })
    if not cfg["corpus"]["cases"]:
        raise ConfigError(["corpus.cases (or --cases) is required"])
    cases = corpus_mod.ingest_cases(cfg["corpus"]["cases"], strict=True).items
    corpora = None if cfg["env"]["url"] else _load_corpora(cfg)
    env = _make_env(cfg, corpora)
    if cfg["adversarial"]:
        if corpora is None:
            raise ConfigError(["adversarial mode needs a local store"])
        env = adversarial_wrap(env, cfg["seed"], cfg.matcher)

    spec = cfg["policy"]
    plans: list[tuple[list[DiagnosticCase], object]]
    if spec.startswith("scripted:"):
        try:
            replay = load_replay(spec.split(":", 1)[1])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read replay file: {exc}")
        if isinstance(replay, dict):
            missing = [c.case_id for c in cases if c.case_id not in replay]
            if missing:
                raise DataError(f"replay file has no script for cases {missing}")
            plans = [([c], ScriptedPolicy(replay[c.case_id])) for c in cases]
        else:
            plans = [(list(cases), ScriptedPolicy(replay))]
    elif spec.startswith("remote:"):
        plans = [(list(cases), RemotePolicy(spec.split(":", 1)[1]))]
    else:
        plans = [(list(cases), ToyAgentPolicy(*_policy_vocab(cases, corpora)))]

    rc = cfg.rollout_config
    length_fn = None
    if rc.length_unit == "provider_tokens":
        counters = [getattr(p, "count_tokens", None) for _, p in plans]
        if not all(counters):
            raise ConfigError(["rollout.length_unit=provider_tokens needs a policy with a tokenizer"])
        length_fn = counters[0]

    lines, errors = [], 0
    for plan_cases, policy in plans:
        batches = run_batch(plan_cases, policy, env, cfg.limits, None, cfg["rollout"]["group_size"],
                            base_seed=cfg["seed"], jobs=cfg["rollout"]["jobs"], config=rc,
                            weights=cfg.weights, reward_config=cfg.reward_config, length_fn=length_fn)
        for batch in batches:
            for ep, err in zip(batch.episodes, batch.errors):
                if ep is None:
                    errors += 1
                    log.error("case %s failed: %s", batch.case.case_id, err)
                else:
                    lines.append(ep.to_json())
    _emit("\n".join(lines), args.out)
    return EXIT_RUNTIME if errors else EXIT_OK


def rescore_record(rec: dict, gt, cfg: RunConfig) -> RewardBreakdown:
    breakdown = score(rec["completion"], gt, cfg.weights, cfg.reward_config)
    if rec.get("policy_passive"):
        breakdown = gate_policy_passive(breakdown)
    return breakdown


def cmd_reward(args) -> int:
    cfg = _load_config(args, {"reward": {"stage": args.stage, "k": args.k, "max_n": args.max_n,
                                         "dedupe_match_in_combo": args.dedupe_match or None}})
    records = _read_jsonl(args.transcripts)
    truth: dict[str, list[str]] = {}
    if args.gt:
        for c in corpus_mod.ingest_cases(args.gt, strict=True).items:
            truth[c.case_id] = list(c.ground_truth_diagnoses)
    out = []
    for n, rec in enumerate(records, 1):
        if "completion" not in rec:
            raise DataError(f"{args.transcripts}:{n}: record lacks 'completion'")
        gt = truth.get(rec.get("case_id")) or rec.get("ground_truth")
        if not gt:
            raise DataError(f"{args.transcripts}:{n}: no ground truth for case {rec.get('case_id')!r}")
        breakdown = rescore_record(rec, gt, cfg)
        out.append(json.dumps({"case_id": rec.get("case_id"), "sample": rec.get("sample"),
                               "reward": breakdown.to_dict()}, sort_keys=True))
    _emit("\n".join(out), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ns = [int(x) for x in args.n.split(",") if x.strip()]
    except ValueError:
        raise ConfigError([f"--n must be comma-separated integers, got {args.n!r}"])
    cfg = _load_config(args, {"reward": {"matcher": args.matcher}})
    results = _read_jsonl(args.results)
    rep = report(results, ns, args.hit_n, cfg.matcher)
    _emit(render_text(rep) if args.format == "text" else json.dumps(rep, sort_keys=True, indent=2), args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    import numpy as np

    from .grpo import ToyPolicy, train_toy
    from .toy import toy_vocabulary

    cfg = _load_config(args, {"toy": {"iters": args.iters, "G": args.G, "beta": args.beta,
                                      "lr": args.lr, "schedule": args.schedule}})
    t = cfg["toy"]
    vocab = toy_vocabulary()
    policy = ToyPolicy(np.zeros(len(vocab.transcripts)), t["temperature"])
    schedule = StageSchedule() if t["schedule"] == "staged" else stage_weights(4)
    trace = train_toy(policy, vocab.reward_fn(cfg.reward_config), schedule, t["iters"], t["G"],
                      t["beta"], t["lr"], cfg["seed"])
    if args.trace:
        text = trace.to_csv() if args.trace.endswith(".csv") else trace.to_json()
        Path(args.trace).write_text(text, encoding="utf-8")
    print(json.dumps(trace.summary(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_validate(args) -> int:
    limits = FormatLimits.strict() if args.strict else FormatLimits()
    out = []
    for rec in _read_jsonl(args.transcripts):
        if "completion" not in rec:
            raise DataError("every record needs a 'completion'")
        rep = validate(rec["completion"], limits)
        out.append(json.dumps({"case_id": rec.get("case_id"), **rep.to_dict()}, sort_keys=True))
    _emit("\n".join(out), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dxrag", description="Agentic retrieval diagnosis toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file (default stdout)")

    sp = sub.add_parser("ingest", help="validate raw corpora and write a store directory")
    sp.add_argument("--guideline", required=True)
    sp.add_argument("--patients", required=True)
    sp.add_argument("--knowledge", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--strict", action="store_true")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("serve", help="run the retrieval service")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--store")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--only", help="comma-separated subset of lookup,match,search,summarize")
    sp.add_argument("--max-batch", type=int, default=64)
    sp.add_argument("--timeout", type=float, default=30.0)
    sp.add_argument("--workers", type=int, default=8)
    sp.add_argument("--summarizer", choices=("stub", "remote"), default="stub")
    sp.add_argument("--summarizer-url")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("rollout", help="run episodes and write results as JSON lines")
    common(sp)
    sp.add_argument("--policy", help="toy | scripted:<replay.json> | remote:<url>")
    sp.add_argument("--mode", choices=("agentic", "vanilla", "rag_free"))
    sp.add_argument("--cases")
    sp.add_argument("--store")
    sp.add_argument("--env-url", help="use a running service instead of a local store")
    sp.add_argument("--stage", type=int)
    sp.add_argument("--l-max", type=int)
    sp.add_argument("--group-size", type=int)
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--adversarial", action="store_true")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("reward", help="score transcripts offline")
    common(sp)
    sp.add_argument("--transcripts", required=True)
    sp.add_argument("--gt", help="cases JSONL supplying ground truth by case_id")
    sp.add_argument("--stage", type=int)
    sp.add_argument("--k", type=float)
    sp.add_argument("--max-n", type=int)
    sp.add_argument("--dedupe-match", action="store_true")
    sp.set_defaults(func=cmd_reward)

    sp = sub.add_parser("eval", help="metrics report over rollout results")
    common(sp)
    sp.add_argument("--results", required=True)
    sp.add_argument("--n", default="1,5")
    sp.add_argument("--hit-n", type=int, default=20)
    sp.add_argument("--matcher", choices=MATCHER_MODES)
    sp.add_argument("--format", choices=("json", "text"), default="json")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("train-toy", help="toy GRPO training over canned transcripts")
    common(sp)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--G", type=int)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--schedule", choices=("staged", "stage4"))
    sp.add_argument("--trace", help="write the trace (.csv or .json)")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("validate", help="format report for each transcript")
    sp.add_argument("--transcripts", required=True)
    sp.add_argument("--strict", action="store_true", help="make every rule gating")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
