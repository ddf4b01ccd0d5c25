"""Hand-evaluated reward fixtures.

Each expected value is written out from the reward definitions with literal
numbers; none is produced by running the engine.
"""

from dxrag.reward import RewardConfig, stage_weights

AML = "Acute myeloid leukemia"
R = "<reason> r </reason>"


def M(phen, refer):
    return f"<match> {phen} </match>\n<refer> {refer} </refer>"


def S(queries, source="PMC"):
    return f"<search> |{source}| {queries} </search>\n<result> x </result>"


def D(*names):
    return "<diagnose> " + ", ".join(f"\\textbf{{{n}}}" for n in names) + " </diagnose>"


def J(*parts):
    return "\n".join(parts)


HIT = "Acute myeloid leukemia (Fever, Anemia)"
MISS = "Aplastic anemia (Pallor)"
CUBE = (2 / 3) ** (1 / 3)  # 0.87358...
QUARTER = (1 / 4) ** (1 / 3)

S4 = stage_weights(4)  # M 0.3, S 0.3, D 0.4

# name, transcript, gt, weights, config, (sigma_f, rwd_m, rwd_s, rwd_d, combined)
CASES = [
    ("match hit at 0.5 - 0.1",
     J(R, M("Fever, Anemia", HIT), R, D(AML)), [AML], S4, RewardConfig(),
     (1, 0.4, 0.0, 0.2 + 0.6 + 0.4, 0.3 * 0.4 + 0.4 * 1.2)),
    ("cube root of two thirds",
     J(R, S("myeloid leukemia"), R, D("Chronic myeloid leukemia")), [AML], S4, RewardConfig(),
     (1, 0.0, CUBE, 0.2 + 0.6 * CUBE, 0.3 * CUBE + 0.4 * (0.2 + 0.6 * CUBE))),
    ("clip at one",
     J(R, M("Fever, Anemia", HIT), R, S("acute myeloid leukemia"), R, D(AML)), [AML], stage_weights(3),
     RewardConfig(), (1, 0.4, 1.0, 1.2, 1.0)),
    ("all three rewards at stage four",
     J(R, M("Fever, Anemia", HIT), R, S("acute myeloid leukemia"), R, D(AML)), [AML], S4, RewardConfig(),
     (1, 0.4, 1.0, 1.2, 0.9)),
    ("diversity failure zeroes match and diagnosis",
     J(R, M("Fever, Anemia", HIT), R, M("Anemia, fever", HIT), R, D(AML)), [AML], S4, RewardConfig(),
     (1, 0.0, 0.0, 0.0, 0.0)),
    ("format gate",
     J(R, M("Fever, Anemia", HIT), "loose text", D(AML)), [AML], S4, RewardConfig(),
     (0, 0.4, 0.0, 1.2, 0.0)),
    ("three matches, one hit",
     J(R, M("Fever", MISS), R, M("Anemia, Pallor", MISS), R, M("Fever, Bone pain", HIT), R, D(AML)), [AML], S4,
     RewardConfig(), (1, 0.2, 0.0, 1.0, 0.3 * 0.2 + 0.4 * 1.0)),
    ("miss with wrong diagnosis",
     J(R, M("Fever", MISS), R, D("Aplastic anemia")), [AML], S4, RewardConfig(),
     (1, -0.1, 0.0, 0.1, 0.3 * -0.1 + 0.4 * 0.1)),
    ("negative total clipped at zero",
     J(R, M("Fever", MISS), R, M("Pallor, Rash", MISS), R, D("Aplastic anemia")), [AML], S4, RewardConfig(),
     (1, -0.2, 0.0, 0.0, 0.0)),
    ("too many search queries for max_n",
     J(R, S("acute, myeloid, leukemia"), R, D(AML)), [AML], S4, RewardConfig(max_n=2),
     (1, 0.0, 0.0, 0.8, 0.4 * 0.8)),
    ("search without result",
     J(R, "<search> |PMC| acute myeloid leukemia </search>", R, D(AML)), [AML], S4, RewardConfig(),
     (1, 0.0, 0.0, 0.8, 0.32)),
    ("four matches break the structure",
     J(*[J(R, M(f"Fever, P{i}", HIT)) for i in range(4)], R, D(AML)), [AML], S4, RewardConfig(),
     (0, 0.0, 0.0, 0.0, 0.0)),
    ("two ground truths, one quarter coverage",
     J(R, D("Anemia")), [AML, "Anemia"], S4, RewardConfig(),
     (1, 0.0, 0.0, 0.2 + 0.6 * QUARTER, 0.4 * (0.2 + 0.6 * QUARTER))),
    ("stage one weights",
     J(R, M("Fever, Anemia", HIT), R, D(AML)), [AML], stage_weights(1), RewardConfig(),
     (1, 0.4, 0.0, 1.2, 0.05 * 0.4 + 0.05 * 1.2)),
    ("match term dropped from the sum",
     J(R, M("Fever, Anemia", HIT), R, D(AML)), [AML], S4, RewardConfig(dedupe_match_in_combo=True),
     (1, 0.4, 0.0, 1.2, 0.4 * 1.2)),
    ("linear diagnosis similarity",
     J(R, D("Chronic myeloid leukemia")), [AML], S4, RewardConfig(diag_root=False),
     (1, 0.0, 0.0, 0.2 + 0.6 * (2 / 3), 0.4 * (0.2 + 0.6 * (2 / 3)))),
]
