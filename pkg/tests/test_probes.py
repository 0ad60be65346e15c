import csv
import io
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from entityfact.probes import (
    AttributeCheck,
    HeapsCurve,
    LengthMention,
    aggregate_errors,
    build_check,
    checks_csv,
    curves_csv,
    extract_length_mentions,
    fits_csv,
    from_km,
    lex_tokens,
    plot_curves,
    select_candidate,
    sources_disagree,
    to_km,
    vocab_growth,
)


# --- mentions ---------------------------------------------------------------

def test_thousands_separator():
    (m,) = extract_length_mentions("It is approximately 1,885 km long.")
    assert (m.value, m.unit, m.normalized_km) == (1885.0, "km", 1885.0)


def test_miles_are_converted():
    (m,) = extract_length_mentions("156 miles")
    assert round(m.normalized_km, 5) == 251.05766


def test_year_is_not_a_length():
    assert extract_length_mentions("founded in 1950") == []


@pytest.mark.parametrize("text,value,unit", [
    ("a 12.5-kilometre stretch", 12.5, "km"),
    ("runs 40 kilometers", 40.0, "km"),
    ("about 7 mi", 7.0, "mile"),
    ("全长6300公里", 6300.0, "km"),
    ("长约500千米", 500.0, "km"),
    ("约100英里", 100.0, "mile"),
])
def test_unit_aliases(text, value, unit):
    (m,) = extract_length_mentions(text)
    assert (m.value, m.unit) == (value, unit)


def test_words_that_merely_start_with_a_unit_do_not_match():
    assert extract_length_mentions("5 minutes and 3 kmh") == []


def test_offsets_are_recorded_in_order():
    text = "A 10 km branch joins a 200 km river."
    ms = extract_length_mentions(text)
    assert [m.value for m in ms] == [10.0, 200.0]
    assert text[ms[1].offset:ms[1].end] == "200 km"


def test_mention_rejects_nonpositive_values():
    with pytest.raises(ValueError):
        LengthMention(0, "km", 0)


# --- candidate selection ----------------------------------------------------

def test_cue_adjacent_mention_wins():
    text = "Its tributary is 30 km. The river has a length of 420 km."
    ms = extract_length_mentions(text)
    assert select_candidate(ms, text).value == 420.0


def test_single_and_empty():
    text = "It runs 5 km."
    (m,) = extract_length_mentions(text)
    assert select_candidate([m], text) is m
    assert select_candidate([], text) is None


def test_no_cue_takes_first():
    text = "Between 10 km and 20 km."
    assert select_candidate(extract_length_mentions(text), text).value == 10.0


# --- checks and aggregation -------------------------------------------------

def test_no_prediction_excludes_the_entity():
    assert build_check("Q1", "A famous river.", 100.0) is None
    assert build_check("Q1", "It is 5 km long.", None) is None


def test_source_disagreement_is_flagged():
    # reference value off by a factor of ~100 from the entity page
    c = build_check("Q1", "The river is 156 miles long.", 2.57, source_text="The river is 156 miles long.")
    assert c.disagreement and c.source_km == pytest.approx(251.057664)
    assert not build_check("Q1", "It is 250 km long.", 251.0, source_text="It is 251 km long.").disagreement


def test_corrections_override_reference():
    c = build_check("Q1", "It is 250 km long.", 2.57, corrections={"Q1": 251.0})
    assert c.true_km == 251.0 and c.corrected


def test_sources_disagree_rule():
    assert sources_disagree(100, 112)  # gap measured against the larger value
    assert not sources_disagree(100, 109)
    assert not sources_disagree(None, 5)


def test_error_examples():
    exact = aggregate_errors([AttributeCheck("a", 10, 10), AttributeCheck("b", 3, 3)])
    assert (exact.rmse_km, exact.mape_pct) == (0.0, 0.0)
    hand = aggregate_errors([AttributeCheck("a", 110, 100), AttributeCheck("b", 180, 200)])
    assert hand.rmse_km == pytest.approx(15.8114, abs=5e-5) and hand.mape_pct == pytest.approx(10.0)
    single = aggregate_errors([AttributeCheck("a", 50, 100)])
    assert (single.count, single.rmse_km, single.mape_pct) == (1, 50.0, 50.0)
    assert aggregate_errors([]) is None


def test_reference_must_be_positive():
    with pytest.raises(ValueError):
        AttributeCheck("a", 1, 0)


pairs = st.lists(st.tuples(st.floats(0.1, 1e4), st.floats(0.1, 1e4)), min_size=1, max_size=20)


@given(pairs, st.floats(0.01, 100), st.randoms(use_true_random=False))
def test_errors_are_permutation_invariant_and_scale_covariant(ps, c, rnd):
    base = aggregate_errors(AttributeCheck(str(i), p, t) for i, (p, t) in enumerate(ps))
    shuffled = list(ps)
    rnd.shuffle(shuffled)
    perm = aggregate_errors(AttributeCheck(str(i), p, t) for i, (p, t) in enumerate(shuffled))
    assert perm.rmse_km == pytest.approx(base.rmse_km, rel=1e-12, abs=1e-12)
    assert perm.mape_pct == pytest.approx(base.mape_pct, rel=1e-12, abs=1e-12)
    scaled = aggregate_errors(AttributeCheck(str(i), p * c, t * c) for i, (p, t) in enumerate(ps))
    assert scaled.rmse_km == pytest.approx(base.rmse_km * c, rel=1e-9, abs=1e-9)
    assert scaled.mape_pct == pytest.approx(base.mape_pct, rel=1e-9, abs=1e-9)


@given(st.floats(1e-6, 1e7))
def test_unit_round_trip(km):
    assert abs(to_km(from_km(km, "mile"), "mile") - km) / km < 1e-9
    assert to_km(1, "m") == 0.001


def test_checks_csv_columns():
    rows = list(csv.DictReader(io.StringIO(checks_csv([AttributeCheck("Q1", 110, 100, "Head", "m")]))))
    assert rows[0]["pct_error"] == "10.000000" and rows[0]["disagreement"] == "0"


# --- vocabulary growth ------------------------------------------------------

def test_hand_counted_curve():
    assert vocab_growth("a b a c".split(), 1).checkpoints == [(1, 1), (2, 2), (3, 2), (4, 3)]


def test_identical_tokens():
    assert {v for _, v in vocab_growth(["x"] * 50, 1).checkpoints} == {1}


def test_all_new_tokens_fit_beta_one():
    curve = vocab_growth([str(i) for i in range(200)], 10)
    assert all(n == v for n, v in curve.checkpoints)
    assert curve.beta == pytest.approx(1.0, abs=1e-9) and curve.k == pytest.approx(1.0, abs=1e-9)


def test_short_stream_has_no_fit():
    curve = vocab_growth(list("abcdefg"), 1)
    assert curve.beta is None and curve.k is None


def test_final_count_is_always_a_checkpoint():
    assert vocab_growth(list("abcab"), 2).checkpoints == [(2, 2), (4, 3), (5, 3)]


@given(st.lists(st.sampled_from("abcdefgh"), max_size=300), st.integers(1, 20))
def test_heaps_invariants(tokens, stride):
    pts = vocab_growth(tokens, stride).checkpoints
    assert all(v <= n for n, v in pts)
    assert all(v2 >= v1 and v2 - v1 <= n2 - n1 for (n1, v1), (n2, v2) in zip(pts, pts[1:]))


def test_tokenizers():
    assert lex_tokens("The river's Delta, 3 km!") == ["the", "river", "s", "delta", "3", "km"]
    assert lex_tokens("长江，全长。", "zh") == ["长", "江", "全", "长"]


def test_csv_outputs_and_deterministic_svg(tmp_path):
    curve = vocab_growth([str(i % 37) for i in range(400)], 20, label="rivers/Head")
    assert curves_csv([curve]).splitlines()[1].startswith("rivers/Head,20,")
    assert "rivers/Head" in fits_csv([curve])
    empty = HeapsCurve([], label="none")
    plot_curves([curve, empty], tmp_path / "a.svg", "t")
    plot_curves([curve, empty], tmp_path / "b.svg", "t")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes() and b"<svg" in a
