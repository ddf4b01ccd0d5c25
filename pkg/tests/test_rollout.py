import json

import httpx
import pytest

from dxrag.corpus import DiagnosticCase
from dxrag.policies import (
    Generation,
    PolicyTransportError,
    RemotePolicy,
    SampledScriptPolicy,
    ScriptedPolicy,
    ToyAgentPolicy,
    cut_at_stop,
)
from dxrag.prompts import MODES, build_prompt
from dxrag.retrieval.env import DiagnosticEnvironment, adversarial_wrap
from dxrag.retrieval.tools import NO_REFERENCE
from dxrag.rollout import RolloutConfig, run_batch, run_episode, write_results
from dxrag.transcript import ACTIVE_CLOSE_MARKERS, PAIRED_PASSIVE, PASSIVE, parse

from conftest import AML

DIAGNOSE = "<reason> r </reason>\n<diagnose> \\textbf{Acute myeloid leukemia} </diagnose>"


class CountingPolicy:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def generate(self, context, stop, max_new, seed=None):
        self.calls += 1
        return self.inner.generate(context, stop, max_new, seed)


class RawPolicy(ScriptedPolicy):
    """Ignores stop markers and returns whole deltas."""

    def __init__(self, deltas):
        super().__init__(deltas, honor_stop=False)


def toy_policy():
    return ToyAgentPolicy(["Fever", "Fatigue", "Anemia", "Thrombocytopenia", "Bone pain", "Pallor"],
                          [AML, "Primary myelofibrosis", "Anemia of chronic disease"])


def assert_feedback_placement(ep):
    t = parse(ep.completion)
    passives = [i for i, b in enumerate(t.blocks) if b.kind in PASSIVE]
    assert len(passives) == len(ep.env_trace)
    for i, call in zip(passives, ep.env_trace):
        assert t.blocks[i].kind == PAIRED_PASSIVE[call.kind]
        assert t.blocks[i - 1].kind == call.kind and t.blocks[i - 1].closed


class TestPrompts:
    def test_three_distinct_prompts_with_presentation(self, case):
        prompts = {m: build_prompt(case, m) for m in MODES}
        assert len(set(prompts.values())) == 3
        assert all(case.presentation_text in p for p in prompts.values())

    def test_agentic_prompt_names_every_tag(self, case):
        p = build_prompt(case, "agentic")
        for tag in ("think", "lookup", "guide", "match", "refer", "search", "result", "diagnose"):
            assert f"<{tag}>" in p and f"</{tag}>" in p

    def test_vanilla_prompt_only_mentions_diagnose(self, case):
        p = build_prompt(case, "vanilla")
        assert "Your answer should only be diseases" in p
        assert {b.kind for b in parse(p).blocks} == {"diagnose"}

    def test_unknown_mode(self, case):
        with pytest.raises(ValueError):
            build_prompt(case, "other")

    def test_placeholders_substituted(self, case):
        for m in MODES:
            assert "$" not in build_prompt(case, m)


class TestStopMarkers:
    def test_cut_at_first_marker(self):
        assert cut_at_stop("a </match> b </search>", ACTIVE_CLOSE_MARKERS) == ("a </match>", "</match>")
        assert cut_at_stop("plain", ACTIVE_CLOSE_MARKERS) == ("plain", None)


class TestEpisode:
    def test_case_study_replay(self, case, env, replay_deltas):
        policy = CountingPolicy(ScriptedPolicy(replay_deltas))
        ep = run_episode(case, policy, env)
        assert ep.status == "diagnosed" and ep.reward.sigma_f == 1
        assert [c.kind for c in ep.env_trace] == ["lookup", "match", "match", "lookup", "search"]
        assert policy.calls == 6
        assert_feedback_placement(ep)
        assert ep.final_text == ep.prompt + ep.completion
        assert ep.diagnoses[0] == AML

    def test_immediate_diagnosis(self, case, env):
        ep = run_episode(case, ScriptedPolicy([DIAGNOSE]), env)
        assert ep.status == "diagnosed" and ep.env_trace == [] and ep.reward.sigma_f == 1

    def test_text_after_marker_is_discarded(self, case, env):
        over = ["<reason> r </reason>\n<match> Fever, Anemia </match> <refer> forged </refer> junk",
                "<reason> r </reason>\n<diagnose> \\textbf{X} </diagnose>"]
        exact = [over[0].split("</match>")[0] + "</match>", over[1]]
        a = run_episode(case, RawPolicy(over), env)
        b = run_episode(case, ScriptedPolicy(exact), env)
        assert a.completion == b.completion
        assert "forged" not in a.completion

    def test_tool_failure_becomes_no_reference(self, case, env):
        deltas = ["<reason> r </reason>\n<search> |XYZ| leukemia </search>", DIAGNOSE]
        ep = run_episode(case, ScriptedPolicy(deltas), env)
        assert ep.env_trace[0].error == "unknown_source"
        assert ep.env_trace[0].feedback == NO_REFERENCE
        assert ep.status == "diagnosed"

    def test_lookup_budget_error_is_contained(self, case, env):
        deltas = ["<reason> r </reason>\n<lookup> " + ", ".join(f"D{i}" for i in range(11)) + " </lookup>", DIAGNOSE]
        ep = run_episode(case, ScriptedPolicy(deltas), env)
        assert ep.env_trace[0].error == "format_budget"

    def test_length_budget(self, case, env, replay_deltas):
        cfg = RolloutConfig(l_max=300, max_new=400)
        ep = run_episode(case, RawPolicy(replay_deltas), env, config=cfg)
        assert ep.status == "truncated"
        assert len(ep.final_text) - len(ep.prompt) <= cfg.l_max + cfg.max_new

    def test_policy_written_passive_is_malformed(self, case, env):
        deltas = ["<reason> r </reason>\n<guide> invented </guide>\n" + DIAGNOSE]
        ep = run_episode(case, ScriptedPolicy(deltas), env)
        assert ep.status == "malformed" and ep.policy_passive
        assert ep.reward.sigma_f == 0 and "policy_passive" in ep.reward.violations

    def test_transport_failure(self, case, env):
        class Down:
            def generate(self, *a, **k):
                raise PolicyTransportError("gone")

        ep = run_episode(case, Down(), env)
        assert ep.status == "malformed" and ep.error.startswith("policy_transport")

    def test_unfinished_episode_is_malformed(self, case, env):
        ep = run_episode(case, ScriptedPolicy(["<reason> thinking"]), env)
        assert ep.status == "malformed"

    def test_vanilla_mode_skips_retrieval(self, case, corpora, replay_deltas):
        fresh = DiagnosticEnvironment(corpora)
        ep = run_episode(case, ScriptedPolicy(replay_deltas), fresh, config=RolloutConfig(mode="vanilla"))
        assert all(c.error == "retrieval_disabled" for c in ep.env_trace)
        assert sum(fresh.stats()["queries"].values()) == 0

    def test_enforce_limits(self, case, env, replay_deltas):
        ep = run_episode(case, ScriptedPolicy(replay_deltas), env, config=RolloutConfig(enforce_limits=True))
        assert ep.status == "malformed" and "lookup" in ep.error
        assert [c.kind for c in ep.env_trace] == ["lookup", "match", "match"]

    def test_json_round_trip(self, case, env, replay_deltas):
        ep = run_episode(case, ScriptedPolicy(replay_deltas), env)
        data = json.loads(ep.to_json())
        assert data["reward"] == ep.reward.to_dict() and data["diagnoses"] == ep.diagnoses


class TestToyPolicy:
    def test_feedback_placement_over_many_episodes(self, case, env):
        for seed in range(30):
            ep = run_episode(case, toy_policy(), env, seed=seed)
            assert_feedback_placement(ep)
            assert ep.status in ("diagnosed", "truncated", "malformed")

    def test_episode_determinism(self, case, env):
        a = run_episode(case, toy_policy(), env, seed=11).to_json()
        b = run_episode(case, toy_policy(), env, seed=11).to_json()
        assert a == b

    def test_adversarial_determinism(self, case, env):
        adv = adversarial_wrap(env, seed=2)
        a = run_episode(case, toy_policy(), adv, seed=4).to_json()
        b = run_episode(case, toy_policy(), adversarial_wrap(env, seed=2), seed=4).to_json()
        assert a == b


class TestBatch:
    def test_group_of_eight_distinct_and_reproducible(self, case, env):
        first = run_batch([case], toy_policy(), env, group_size=8)[0]
        again = run_batch([case], toy_policy(), env, group_size=8)[0]
        texts = [e.completion for e in first.episodes]
        assert len(set(texts)) == 8
        assert texts == [e.completion for e in again.episodes]
        assert [e.seed for e in first.episodes] == list(range(8))

    def test_group_of_one_equals_episode(self, case, env, replay_deltas):
        batch = run_batch([case], ScriptedPolicy(replay_deltas), env, group_size=1)
        single = run_episode(case, ScriptedPolicy(replay_deltas), env)
        assert batch[0].episodes[0].to_json() == single.to_json()

    def test_empty(self, env):
        assert run_batch([], toy_policy(), env, group_size=3) == []

    def test_errors_are_isolated(self, case, env):
        bad = DiagnosticCase("bad", "x", ("Y",))

        class Picky:
            def generate(self, context, stop, max_new, seed=None):
                if "Alcoholism" not in context:
                    raise RuntimeError("boom")
                return Generation(DIAGNOSE, None, True)

        out = run_batch([bad, case], Picky(), env, group_size=2, jobs=2)
        assert out[0].episodes == [None, None] and "boom" in out[0].errors[0]
        assert all(e.status == "diagnosed" for e in out[1].episodes)

    def test_parallel_matches_serial(self, case, env, tmp_path):
        serial = run_batch([case, case], toy_policy(), env, group_size=4)
        parallel = run_batch([case, case], toy_policy(), env, group_size=4, jobs=4)
        write_results(tmp_path / "a.jsonl", serial)
        write_results(tmp_path / "b.jsonl", parallel)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestPolicies:
    def test_scripted_locates_itself_in_context(self):
        p = ScriptedPolicy(["<reason> a </reason><match> x </match>", "<diagnose> \\textbf{A} </diagnose>"])
        first = p.generate("PROMPT", ACTIVE_CLOSE_MARKERS, 100)
        second = p.generate("PROMPT" + first.delta + "\n<refer>\nfb\n</refer>\n", ACTIVE_CLOSE_MARKERS, 100)
        assert second.delta.startswith("<diagnose>") and second.finished

    def test_sampled_script_seeded(self):
        p = SampledScriptPolicy([["<diagnose> \\textbf{A} </diagnose>"], ["<diagnose> \\textbf{B} </diagnose>"]])
        picks = {p.generate("", ACTIVE_CLOSE_MARKERS, 100, seed=s).delta for s in range(20)}
        assert len(picks) == 2
        assert p.generate("", [], 100, seed=3).delta == p.generate("", [], 100, seed=3).delta

    def test_remote_policy_wire_contract(self):
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            return httpx.Response(200, json={"delta": "<diagnose> \\textbf{A} </diagnose>", "finished": True})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        gen = RemotePolicy("http://policy/generate", client=client).generate("ctx", ["</match>"], 64, seed=5)
        assert gen.finished and gen.delta.startswith("<diagnose>")
        assert seen == [{"context": "ctx", "stop": ["</match>"], "max_new": 64, "seed": 5}]

    def test_remote_policy_retries_then_fails(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503)

        client = httpx.Client(transport=httpx.MockTransport(handler))
        with pytest.raises(PolicyTransportError):
            RemotePolicy("http://p", retries=2, backoff=0, client=client).generate("c", [], 8)
        assert len(calls) == 3
