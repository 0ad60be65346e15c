"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

from __future__ import annotations

import json
import math
import os
import random
import re
import shutil
import time
from fractions import Fraction
from pathlib import Path

import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from entityfact.cli import cli
from entityfact.evidence import EvidenceBundle, FetchedText, Page
from entityfact.factuality import (
    EXTRACTION_PROMPT,
    VERIFICATION_PROMPT,
    AtomicFact,
    EvidenceConfig,
    build_index,
    evaluate_generation,
    rank_paragraphs,
    render_context,
)
from entityfact.http import HttpClient
from entityfact.llm import ChatEndpointConfig, GenerationRecord, MockChat, record_fixture, split_sentences
from entityfact.popularity import partition_tiers
from entityfact.probes import (
    AttributeCheck,
    aggregate_errors,
    extract_length_mentions,
    from_km,
    lex_tokens,
    to_km,
    vocab_growth,
)
from entityfact.sampler import Candidate, SamplingPlan, sample
from entityfact.wikitext import segment_paragraphs, strip_wikitext

from fakewiki import FakeWiki, write_config

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def report(capsys):
    """Run a criterion body; print exactly one PASS/FAIL line either way."""

    def run(number: int, title: str, body):
        try:
            detail = body()
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nACCEPTANCE {number} FAIL: {title}: {type(exc).__name__}: {exc}")
            raise
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} PASS: {title}" + (f" ({detail})" if detail else ""))

    return run


# --- 1 ---------------------------------------------------------------------

def _zipf_views(rng: random.Random, n: int = 1000) -> list[tuple[str, int]]:
    ranks = list(range(1, n + 1))
    rng.shuffle(ranks)
    return [(f"Q{100 + i}", int(1e7 / r ** 1.1 * rng.uniform(0.5, 1.5))) for i, r in enumerate(ranks)]


def _prefix_oracle(values: list[tuple[str, int]]) -> tuple[int, int]:
    """Minimal prefixes reaching 1/3 and 2/3 of the total, in exact arithmetic."""
    ranked = sorted(values, key=lambda qv: (-qv[1], int(qv[0][1:])))
    total = sum(v for _, v in ranked)
    cum, head, head_torso = 0, None, None
    for i, (_, v) in enumerate(ranked, 1):
        cum += v
        if head is None and Fraction(cum, total) >= Fraction(1, 3):
            head = i
        if head_torso is None and Fraction(cum, total) >= Fraction(2, 3):
            head_torso = i
    return head, head_torso


def test_criterion_1_tier_partition_properties(report):
    def body():
        rng = random.Random(1)
        views = _zipf_views(rng)
        t0 = time.perf_counter()
        ta = partition_tiers(views)
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"partition took {elapsed:.3f}s"

        total = sum(v for _, v in views)
        values = [v for _, v in ta.ranking]
        head_sum = sum(values[:ta.head_size])
        ht = ta.head_size + ta.torso_size
        assert 3 * head_sum >= total and 3 * (head_sum - values[ta.head_size - 1]) < total
        assert 3 * sum(values[:ht]) >= 2 * total and 3 * (sum(values[:ht]) - values[ht - 1]) < 2 * total
        assert (ta.head_size, ht) == _prefix_oracle(views)

        t0 = time.perf_counter()
        for trial in range(100):
            trng = random.Random(1000 + trial)
            vals = _zipf_views(trng)
            base = partition_tiers(vals)
            assert (base.head_size, base.head_size + base.torso_size) == _prefix_oracle(vals)
            c = trng.choice([trng.randint(2, 1000), 2.0 ** trng.randint(-10, 10), trng.uniform(0.01, 100)])
            scaled = partition_tiers([(q, v * c) for q, v in vals])
            assert scaled.tiers == base.tiers
            shuffled = list(vals)
            trng.shuffle(shuffled)
            perm = partition_tiers(shuffled)
            assert perm.tiers == base.tiers and perm.ranking == base.ranking
        trials = time.perf_counter() - t0
        return (f"head={ta.head_size} torso={ta.torso_size} tail={ta.tail_size}, "
                f"partition {elapsed * 1000:.1f} ms, 100 trials {trials:.2f} s")

    report(1, "tier partition: minimal-prefix bounds, scale invariance, permutation determinism, <1 s", body)


# --- 2 ---------------------------------------------------------------------

def _pool(sizes: dict[str, int]) -> tuple[list[Candidate], dict[str, str]]:
    regions = ["Africa", "Americas", "AAO", "Europe", "Unknown"]
    pool, tiers = [], {}
    n = 1
    for tier, size in sizes.items():
        for _ in range(size):
            qid = f"Q{n}"
            pool.append(Candidate(qid, regions[n % 5], {"en": f"T{n}"}, {}, {"en": 5000}, {"en": False}))
            tiers[qid] = tier
            n += 1
    return pool, tiers


def test_criterion_2_quota_reallocation(report):
    def body():
        plan = SamplingPlan(seed=2024)
        got = []
        for sizes, expected in (({"Head": 81, "Torso": 250, "Tail": 5000}, (81, 200, 719)),
                                ({"Head": 20, "Torso": 92, "Tail": 5000}, (20, 92, 888))):
            pool, tiers = _pool(sizes)
            counts = sample(pool, tiers, plan).counts()["tier"]
            result = (counts["Head"], counts["Torso"], counts["Tail"])
            assert result == expected, f"{sizes} -> {result}, expected {expected}"
            got.append("/".join(map(str, result)))
        return ", ".join(got)

    report(2, "quota reallocation reproduces 81/200/719 and 20/92/888", body)


# --- 3 ---------------------------------------------------------------------

EDOUARD_TEXT = ("Although it never attained hurricane strength, Edouard brought heavy rainfall, localized "
                "flooding, and gusty winds across coastal Texas and Louisiana.")
# fact -> supported under (one-page, +search, +links)
EDOUARD_FACTS = {
    "Tropical Storm Edouard brought gusty winds.": (True, True, True),
    "Tropical Storm Edouard never attained hurricane strength.": (False, False, True),
    "Tropical Storm Edouard brought localized flooding.": (False, True, True),
    "Tropical Storm Edouard brought heavy rainfall.": (False, True, True),
}


def _page(title: str, source: str, text: str) -> Page:
    return Page.build(FetchedText(title, text), "en", source)


def edouard_bundle() -> EvidenceBundle:
    entity = _page("Tropical Storm Edouard (2020)", "entity_page",
                   "Tropical Storm Edouard was a short-lived tropical cyclone of the Atlantic season.\n\n"
                   "Gusty winds were observed along the coast as Edouard moved offshore.")
    search = [
        _page("Flooding in Texas", "search_hit",
              "Localized flooding affected coastal Texas after several tropical systems passed nearby."),
        _page("Gulf Coast rainfall records", "search_hit",
              "Heavy rainfall totals were reported across Louisiana during the storm season."),
    ]
    inlinks = [_page("Atlantic storm season summary", "inlink",
                     "Edouard remained a tropical storm and never reached hurricane strength before dissipating.")]
    return EvidenceBundle("Q99000001", "en", "Tail", entity, search, inlinks, "2025-01-01")


def test_criterion_3_edouard_worked_example(report, tmp_path):
    def body():
        extractor = ChatEndpointConfig(name="extractor", base_url="mock://store", model="m")
        judge = ChatEndpointConfig(name="judge", base_url="mock://store", model="m")
        bundle = edouard_bundle()
        gen = GenerationRecord("Q99000001", "en", "Tell me about Tropical Storm Edouard.", EDOUARD_TEXT,
                               "gpt", 1, "", "disasters", "Tail", "Americas")
        store: dict[str, str] = {}
        title = bundle.entity_page.title
        sentence = split_sentences(EDOUARD_TEXT)[0]
        record_fixture(store, [("user", EXTRACTION_PROMPT.format(
            title=title, text=EDOUARD_TEXT, window=sentence, sentence=sentence))],
            extractor, "\n".join(f"- {f}" for f in EDOUARD_FACTS))
        configs = list(EvidenceConfig)
        # scripted judge: one fixed answer per (statement, evidence configuration)
        for col, config in enumerate(configs):
            index = build_index(bundle, config)
            for i, (fact, marks) in enumerate(EDOUARD_FACTS.items()):
                paragraphs = rank_paragraphs(AtomicFact(gen.qid, "en", i, fact), index, 5)
                prompt = VERIFICATION_PROMPT.format(title=title, context=render_context(paragraphs), fact=fact)
                record_fixture(store, [("user", prompt)], judge, "True" if marks[col] else "False")
        path = tmp_path / "store.json"
        path.write_text(json.dumps(store), encoding="utf-8")
        extractor = extractor.model_copy(update={"base_url": f"mock://store?path={path}"})
        judge = judge.model_copy(update={"base_url": f"mock://store?path={path}"})

        http = HttpClient(handlers={"mock": MockChat()})
        result = evaluate_generation(gen, bundle, configs, extractor, judge, http)
        assert [f.text for f in result.facts] == list(EDOUARD_FACTS)
        precision = {r.evidence: r.precision for r in result.results}
        assert precision == {"one-page": 0.25, "search": 0.75, "links": 1.0}, precision
        return ", ".join(f"{k}={v:.2f}" for k, v in precision.items())

    report(3, "Edouard per-config precision 0.25 / 0.75 / 1.00", body)


# --- 4 ---------------------------------------------------------------------

VOCAB = [f"w{i}" for i in range(30)]


def _oracle_scores(docs: list[str], query: str, k1: float = 1.2, b: float = 0.75) -> list[float]:
    """Score every paragraph directly from the formula, no index."""
    toks = [re.findall(r"[a-z0-9]+", d.lower()) for d in docs]
    n = len(docs)
    avgdl = sum(len(t) for t in toks) / n
    terms = sorted(set(re.findall(r"[a-z0-9]+", query.lower())))
    out = []
    for t_doc in toks:
        s = 0.0
        for term in terms:
            df = sum(1 for t in toks if term in t)
            if df == 0 or term not in t_doc:
                continue
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            tf = t_doc.count(term)
            s += idf * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * len(t_doc) / avgdl))
        out.append(s)
    return out


def test_criterion_4_bm25_oracle_equivalence(report):
    def body():
        rng = random.Random(4)
        compared = 0
        for _ in range(200):
            n = rng.randint(1, 50)
            docs = [" ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 25))) for _ in range(n)]
            query = " ".join(rng.choice(VOCAB + ["zz"]) for _ in range(rng.randint(1, 8)))
            pages = [Page("P", "en", "entity_page", "\n\n".join(docs), docs)]
            index = build_index(EvidenceBundle("Q1", "en", "Head", pages[0]), EvidenceConfig.ONE_PAGE)
            assert [r.text for r in index.refs] == docs
            oracle = _oracle_scores(docs, query)
            expected = sorted(range(n), key=lambda i: (-oracle[i], i))
            for k in (5, n):
                got = rank_paragraphs(query, index, k)
                assert [r.position for r in got] == expected[:k]
                for r in got:
                    assert abs(r.score - oracle[r.position]) <= 1e-9
                compared += len(got)
        return f"200 corpora, {compared} ranked paragraphs compared"

    report(4, "BM25 ranking equals the exhaustive scorer (1e-9, same order)", body)


# --- 5 ---------------------------------------------------------------------

def test_criterion_5_rmse_mape_oracle(report):
    def body():
        rng = random.Random(5)
        for _ in range(100):
            n = rng.randint(1, 20)
            pairs = [(rng.uniform(0.1, 5000), rng.uniform(0.1, 5000)) for _ in range(n)]
            s = aggregate_errors(AttributeCheck(f"Q{i}", p, t) for i, (p, t) in enumerate(pairs))
            rmse = math.sqrt(sum((p - t) ** 2 for p, t in pairs) / n)
            mape = sum(100 * abs(p - t) / t for p, t in pairs) / n
            assert s.count == n
            assert abs(s.rmse_km - rmse) <= 1e-9 * max(1.0, rmse)
            assert abs(s.mape_pct - mape) <= 1e-9 * max(1.0, mape)
        hand = aggregate_errors([AttributeCheck("a", 110, 100), AttributeCheck("b", 180, 200)])
        assert round(hand.rmse_km, 4) == 15.8114 and abs(hand.mape_pct - 10.0) <= 1e-9
        return f"hand case RMSE={hand.rmse_km:.4f} MAPE={hand.mape_pct:.1f}"

    report(5, "RMSE/MAPE match the direct formulas; hand case 15.8114 / 10.0", body)


# --- 6 ---------------------------------------------------------------------

def test_criterion_6_unit_conversion(report):
    def body():
        rng = random.Random(6)
        worst = 0.0
        for _ in range(1000):
            km = rng.uniform(1e-3, 1e5)
            back = to_km(from_km(km, "mile"), "mile")
            worst = max(worst, abs(back - km) / km)
            miles = rng.uniform(1e-3, 1e5)
            worst = max(worst, abs(from_km(to_km(miles, "mile"), "mile") - miles) / miles)
        assert worst < 1e-9
        (m,) = extract_length_mentions("The river is 156 miles long.")
        assert m.unit == "mile" and round(m.normalized_km, 5) == 251.05766
        assert abs(m.normalized_km - 156 * 1.609344) < 1e-9
        return f"worst round-trip error {worst:.1e}, 156 miles = {m.normalized_km:.5f} km"

    report(6, "mile/km round trip < 1e-9; 156 miles = 251.05766 km", body)


# --- 7 ---------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(list("abcdefghij")) | st.text(min_size=1, max_size=3), max_size=400),
       st.integers(min_value=1, max_value=7))
def _heaps_invariants(tokens, stride):
    curve = vocab_growth(tokens, stride)
    full = vocab_growth(tokens, 1)
    vs = [v for _, v in full.checkpoints]
    assert all(n_v[1] <= n_v[0] for n_v in full.checkpoints)
    assert all(0 <= b - a <= 1 for a, b in zip([0] + vs, vs))
    assert [n for n, _ in full.checkpoints] == list(range(1, len(tokens) + 1))
    for (n, v) in curve.checkpoints:
        assert v == vs[n - 1]


def test_criterion_7_heaps_invariants(report):
    def body():
        _heaps_invariants()
        text = (FIXTURES / "natural_text.txt").read_text(encoding="utf-8")
        tokens = lex_tokens(text, "en")
        assert len(tokens) >= 50_000
        curve = vocab_growth(tokens, 1000)
        assert curve.beta is not None and 0 < curve.beta < 1
        return f"{len(tokens)} tokens, beta={curve.beta:.3f}, K={curve.k:.2f}"

    report(7, "Heaps invariants hold; natural-text beta in (0, 1)", body)


# --- 8 ---------------------------------------------------------------------

def test_criterion_8_wikitext_stripper(report):
    def body():
        pages = [json.loads(l) for l in (FIXTURES / "wikitext_corpus.jsonl").read_text(encoding="utf-8").splitlines()]
        assert len(pages) == 100
        for p in pages:
            once = strip_wikitext(p["wikitext"])
            assert strip_wikitext(once) == once, p["title"]
            assert len(once) <= len(p["wikitext"]), p["title"]
        assert strip_wikitext("plain sentence.") == "plain sentence."
        assert strip_wikitext("the [[Rio Grande|river]] flows") == "the river flows"
        assert strip_wikitext("fact{{cite web|...}} here") == "fact here"
        assert segment_paragraphs("A\n\nB") == ["A\nB"]
        assert segment_paragraphs("") == []
        return "100 pages idempotent and non-lengthening; rewrite examples exact"

    report(8, "wikitext stripper idempotent, non-lengthening, examples exact", body)


# --- 9 ---------------------------------------------------------------------

def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_end_to_end_replay(report, tmp_path):
    def body():
        record = tmp_path / "record"
        record.mkdir()
        write_config(record / "run.yaml", "out", "cache")
        res = CliRunner().invoke(cli, ["--config", str(record / "run.yaml"), "all"], obj={"transport": FakeWiki()})
        assert res.exit_code == 0, res.output

        def offline(*args, **kwargs):
            raise AssertionError("network access during replay")

        trees = []
        # two "machines": different absolute locations for config, cache and output
        for machine in ("machine-a", "machine-b/nested/dir"):
            root = tmp_path / machine
            root.mkdir(parents=True)
            shutil.copytree(record / "cache", root / "http-cache")
            write_config(root / "run.yaml", "results", "http-cache")
            for _ in range(2):
                shutil.rmtree(root / "results", ignore_errors=True)
                res = CliRunner().invoke(cli, ["--config", str(root / "run.yaml"), "--replay", "all"],
                                         obj={"transport": offline})
                assert res.exit_code == 0, res.output
                trees.append(_tree(root / "results"))
        assert all(t.keys() == trees[0].keys() for t in trees)
        diffs = sorted({k for t in trees[1:] for k in t if t[k] != trees[0][k]})
        assert not diffs, f"differing files: {diffs[:5]}"
        assert any(k.startswith("report/") for k in trees[0])
        return f"{len(trees[0])} files byte-identical across 4 replay runs on 2 locations"

    report(9, "end-to-end replay determinism", body)


# --- 10 --------------------------------------------------------------------

@pytest.mark.online
def test_criterion_10_online_head_sizes(report, tmp_path, capsys):
    """Live check, never gating: head sizes are reported next to the reference 81 / 267."""
    if os.environ.get("ENTITYFACT_ONLINE") != "1":
        with capsys.disabled():
            print("\nACCEPTANCE 10 SKIP: live head sizes (set ENTITYFACT_ONLINE=1 to run)")
        pytest.skip("set ENTITYFACT_ONLINE=1 to run the live head-size check")
    from entityfact.config import load_config
    from entityfact.pipeline import Context, RunOptions, run_stage

    cfg = tmp_path / "online.yaml"
    cfg.write_text(ONLINE_CONFIG, encoding="utf-8")

    def body():
        ctx = Context(load_config(cfg), RunOptions())
        for stage in ("ingest", "stats", "tier"):
            run_stage(ctx, stage)
        parts = []
        for name, reference in (("rivers", 81), ("cars", 267)):
            b = json.loads((ctx.out / "tier" / name / "boundaries.json").read_text(encoding="utf-8"))
            parts.append(f"{name}: head={b['head_size']} (reference {reference}, diff {b['head_size'] - reference:+d})")
        return ", ".join(parts)

    report(10, "live head sizes reported, not asserted", body)


ONLINE_CONFIG = """
snapshot: "2025-01-01"
languages: [en]
classes:
  - {name: rivers, class_qid: Q4022, attribute_props: [P2043]}
  - {name: cars, class_qid: Q3231690, via_prop: P176}
window: {start: "2024-01", end: "2024-12"}
http: {max_workers: 4, min_interval: 0.05}
cache_dir: cache
out_dir: out
"""
