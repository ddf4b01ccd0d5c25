import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dxrag.reward import (
    RewardBreakdown,
    RewardConfig,
    RewardWeights,
    StageSchedule,
    combine,
    refer_diagnoses,
    score,
    stage_weights,
    token_coverage,
)

from reward_cases import AML, CASES


class TestHandTable:
    @pytest.mark.parametrize("name,text,gt,weights,config,expected", CASES, ids=[c[0] for c in CASES])
    def test_case(self, name, text, gt, weights, config, expected):
        b = score(text, gt, weights, config)
        got = (b.sigma_f, b.rwd_m, b.rwd_s, b.rwd_d, b.combined)
        assert got[0] == expected[0]
        for g, e in zip(got[1:], expected[1:]):
            assert g == pytest.approx(e, abs=1e-9)

    def test_case_study(self, case_study_text):
        b = score(case_study_text, [AML])
        assert (b.sigma_f, b.n_match, b.hit) == (1, 2, True)
        assert b.rwd_m == pytest.approx(0.3) and b.rwd_s == 0.0
        assert b.rwd_d == pytest.approx(1.1) and b.combined == pytest.approx(0.53)


class TestPieces:
    def test_token_coverage_counts_each_diagnosis(self):
        assert token_coverage([AML, "Anemia"], ["leukemia", "anemia"]) == pytest.approx(2 / 4)

    def test_refer_parsing(self):
        text = "\\textbf{Highly relevant:} Acute myeloid leukemia (bone pain, fever), CMML...\nOther (x (y))"
        assert refer_diagnoses(text) == ["Highly relevant", "Acute myeloid leukemia", "CMML", "Other"]

    def test_combine_gate(self):
        assert combine(0, 1, 1, 1, stage_weights(4)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-0.3, 0.4), st.floats(0, 1), st.floats(0, 1.6), st.integers(1, 4))
    def test_combined_in_unit_interval(self, m, s, d, stage):
        assert 0.0 <= combine(1, m, s, d, stage_weights(stage)) <= 1.0

    def test_breakdown_round_trip(self, case_study_text):
        b = score(case_study_text, [AML])
        assert RewardBreakdown.from_dict(json.loads(b.to_json())) == b

    def test_config_round_trip(self):
        cfg = RewardConfig(k=2.0, dedupe_match_in_combo=True)
        assert RewardConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestSchedule:
    def test_stage_weights_exact(self):
        got = [(w.w_s, w.w_m, w.w_d) for w in (stage_weights(s) for s in (1, 2, 3, 4))]
        assert got == [(0.9, 0.05, 0.05), (0.05, 0.9, 0.05), (0.05, 0.05, 0.9), (0.3, 0.3, 0.4)]

    def test_bad_stage(self):
        with pytest.raises(ValueError):
            stage_weights(5)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            RewardWeights(1.2, 0, 0)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            StageSchedule((stage_weights(2), stage_weights(1), stage_weights(3), stage_weights(4)))

    def test_even_split(self):
        sched = StageSchedule()
        assert [sched.stage_of(i, 8) for i in range(8)] == [1, 1, 2, 2, 3, 3, 4, 4]
