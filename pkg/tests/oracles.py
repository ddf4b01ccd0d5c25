"""Brute-force reference implementations used to check the engine.

Written separately from the package code: nothing here imports from dxrag
except the embedder, whose output both sides consume.
"""

import math
import re
from collections import Counter

WORD = re.compile(r"[^\W_]+")


def words(text):
    return WORD.findall(text.lower())


def bm25_brute(docs, query, k1=1.5, b=0.75):
    """[(doc_id, score)] for every document with a positive score, best first."""
    toks = [words(text) for _, text in docs]
    n_docs = len(docs)
    avgdl = sum(len(t) for t in toks) / n_docs
    df = Counter()
    for t in toks:
        for w in set(t):
            df[w] += 1
    out = []
    for (doc_id, _), t in zip(docs, toks):
        tf = Counter(t)
        s = 0.0
        hit = False
        for w in words(query):
            if tf[w] == 0:
                continue
            hit = True
            idf = math.log((n_docs - df[w] + 0.5) / (df[w] + 0.5) + 1.0)
            s += idf * tf[w] * (k1 + 1) / (tf[w] + k1 * (1 - b + b * len(t) / avgdl))
        if hit:
            out.append((doc_id, s))
    out.sort(key=lambda x: (-x[1], x[0]))
    return out


def cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return max(-1.0, min(1.0, dot / (nu * nv)))


def sim_brute(query, phenotypes, vec, pair_cache=None):
    """Mean over query terms of the best cosine against the record's terms."""
    cache = {} if pair_cache is None else pair_cache

    def cos(q, p):
        if (q, p) not in cache:
            cache[q, p] = cosine(vec(q), vec(p))
        return cache[q, p]

    return sum(max(cos(q, p) for p in phenotypes) for q in query) / len(query)


def match_brute(query, records, vec, top_n=20):
    cache = {}
    scored = [(r.record_id, sim_brute(query, r.phenotypes, vec, cache)) for r in records]
    scored.sort(key=lambda x: (-round(x[1], 12), x[0]))
    return scored[:top_n]


# -- format gate -------------------------------------------------------------

NAMES = "reason|think|lookup|guide|match|refer|search|result|diagnose"
TAG = re.compile(r"<(/?)(" + NAMES + r")>")
OWNER = {"guide": "lookup", "refer": "match", "result": "search"}


def bold_items(text):
    items, i = [], 0
    key = "\\textbf{"
    while True:
        j = text.find(key, i)
        if j == -1:
            return items
        depth, k = 1, j + len(key)
        while k < len(text) and depth > 0:
            depth += {"{": 1, "}": -1}.get(text[k], 0)
            k += 1
        if depth > 0:
            i = j + len(key)
            continue
        if text[j + len(key):k - 1].strip():
            items.append(text[j + len(key):k - 1])
        i = k


def segment(text):
    """Blocks as dicts plus stray closing tags, by a single left-to-right scan."""
    blocks, stray, open_ = [], [], None
    for m in TAG.finditer(text):
        closing, name = m.group(1) == "/", m.group(2)
        name = "reason" if name == "think" else name
        if open_ is not None:
            if closing and name == open_["kind"]:
                open_.update(closed=True, end=m.end(), body=text[open_["body_start"]:m.start()])
                blocks.append(open_)
                open_ = None
                continue
            open_.update(closed=False, end=m.start(), body=text[open_["body_start"]:m.start()])
            blocks.append(open_)
            open_ = None
        if closing:
            stray.append((m.start(), m.end()))
        else:
            open_ = {"kind": name, "start": m.start(), "body_start": m.end()}
    if open_ is not None:
        open_.update(closed=False, end=len(text), body=text[open_["body_start"]:])
        blocks.append(open_)
    return blocks, stray


def gate_predicates(text, max_match=3, max_search=2, max_diag=5, max_queries=3):
    """Each gating rule evaluated on its own; True means the rule holds."""
    tags = [(m.group(1) == "/", "reason" if m.group(2) == "think" else m.group(2), m.start())
            for m in TAG.finditer(text)]
    opens = lambda k: sum(1 for c, n, _ in tags if n == k and not c)  # noqa: E731
    closes = lambda k: sum(1 for c, n, _ in tags if n == k and c)  # noqa: E731
    blocks, stray = segment(text)

    ok = {}
    ok["R1"] = opens("diagnose") == 1 and closes("diagnose") == 1
    first_open = next((p for c, n, p in tags if n == "diagnose" and not c), None)
    first_close = next((p for c, n, p in tags if n == "diagnose" and c), None)
    ok["R2"] = not (first_open is not None and first_close is not None and first_close < first_open)
    diag = [b for b in blocks if b["kind"] == "diagnose" and b["closed"]]
    ok["R3"] = all(len(bold_items(b["body"])) > 0 for b in diag)
    ok["R4"] = all(len(bold_items(b["body"])) <= max_diag for b in diag)
    ok["R5"] = opens("match") <= max_match
    ok["R6"] = (opens("search") == closes("search") and not stray
                and all(b["closed"] for b in blocks))
    r7 = True
    for i, b in enumerate(blocks):
        after = blocks[i + 1] if i + 1 < len(blocks) else None
        before = blocks[i - 1] if i > 0 else None
        if b["kind"] == "match" and not (after and after["kind"] == "refer" and after["closed"]):
            r7 = False
        if b["kind"] in OWNER and not (before and before["kind"] == OWNER[b["kind"]] and before["closed"]):
            r7 = False
    ok["R7"] = r7
    r9 = opens("search") <= max_search
    for b in blocks:
        if b["kind"] == "search" and b["closed"]:
            m = re.fullmatch(r"\s*\|(WIKI|PMC|BOOK)\|(.*)", b["body"], re.DOTALL)
            if not m:
                r9 = False
            else:
                n = len([q for q in m.group(2).split(",") if q.strip()])
                r9 = r9 and 1 <= n <= max_queries
    ok["R9"] = r9
    covered = sorted([(b["start"], b["end"]) for b in blocks] + stray)
    outside, pos = [], 0
    for s, e in covered:
        outside.append(text[pos:s])
        pos = max(pos, e)
    outside.append(text[pos:])
    ok["R10"] = "".join(outside).strip() == ""
    return ok


def sigma_f_oracle(text, **limits):
    return int(all(gate_predicates(text, **limits).values()))
