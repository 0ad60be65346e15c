"""River-length probe (generated lengths vs. Wikidata) and vocabulary-growth curves."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNIT_FACTORS = {"km": 1.0, "mile": 1.609344, "m": 0.001}
_UNIT_ALIASES = {
    "km": "km", "kilometre": "km", "kilometres": "km", "kilometer": "km", "kilometers": "km",
    "公里": "km", "千米": "km",
    "mi": "mile", "mile": "mile", "miles": "mile", "英里": "mile",
}
_NUMBER = r"(?<![\d.,])(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?"
_UNITS_LATIN = r"kilometres|kilometers|kilometre|kilometer|km|miles|mile|mi"
_MENTION = re.compile(
    _NUMBER + r"(?:\s*(?:-\s*)?(" + _UNITS_LATIN + r")\b|\s*(公里|千米|英里))",
    re.I,
)
_CUE = re.compile(r"\blength\b|\blong\b|\bstretches\b|\bflows for\b|全长", re.I)
DISAGREEMENT_TOLERANCE = 0.10


def to_km(value: float, unit: str) -> float:
    return value * UNIT_FACTORS[unit]


def from_km(km: float, unit: str) -> float:
    return km / UNIT_FACTORS[unit]


@dataclass
class LengthMention:
    value: float
    unit: str
    offset: int
    end: int = 0

    def __post_init__(self):
        if self.unit not in UNIT_FACTORS:
            raise ValueError(f"unknown unit {self.unit!r}")
        if not self.value > 0:
            raise ValueError("length must be positive")

    @property
    def normalized_km(self) -> float:
        return to_km(self.value, self.unit)


def extract_length_mentions(text: str, language: str = "en") -> list[LengthMention]:
    """Numbers directly followed by a length unit, in text order. Zero values are skipped."""
    out = []
    for m in _MENTION.finditer(text):
        value = float(m.group(1).replace(",", "") + (m.group(2) or ""))
        unit = _UNIT_ALIASES[(m.group(3) or m.group(4)).lower()]
        if value > 0:
            out.append(LengthMention(value, unit, m.start(), m.end()))
    return out


def select_candidate(mentions: Sequence[LengthMention], text: str) -> LengthMention | None:
    """Mention closest to a length cue; the first mention when there is no cue."""
    if not mentions:
        return None
    cues = [(c.start(), c.end()) for c in _CUE.finditer(text)]
    if not cues:
        return mentions[0]

    def distance(m: LengthMention) -> int:
        end = m.end or m.offset
        return min(max(cs - end, m.offset - ce, 0) for cs, ce in cues)

    # min() keeps the earliest mention on ties
    return min(mentions, key=distance)


@dataclass
class AttributeCheck:
    qid: str
    predicted_km: float
    true_km: float
    tier: str = ""
    model: str = ""
    source_km: float | None = None
    disagreement: bool = False
    corrected: bool = False

    def __post_init__(self):
        if not self.true_km > 0:
            raise ValueError(f"{self.qid}: reference length must be positive")

    @property
    def abs_error_km(self) -> float:
        return abs(self.predicted_km - self.true_km)

    @property
    def pct_error(self) -> float:
        return 100.0 * self.abs_error_km / self.true_km


def sources_disagree(a_km: float | None, b_km: float | None, tolerance: float = DISAGREEMENT_TOLERANCE) -> bool:
    if a_km is None or b_km is None or a_km <= 0 or b_km <= 0:
        return False
    return abs(a_km - b_km) / max(a_km, b_km) > tolerance


def build_check(
    qid: str,
    generation: str,
    true_km: float | None,
    *,
    tier: str = "",
    model: str = "",
    source_text: str | None = None,
    corrections: dict[str, float] | None = None,
) -> AttributeCheck | None:
    """None when the generation names no length or the reference is missing."""
    corrected = False
    if corrections and qid in corrections:
        true_km, corrected = corrections[qid], True
    if true_km is None or true_km <= 0:
        return None
    pred = select_candidate(extract_length_mentions(generation), generation)
    if pred is None:
        return None
    source_km = None
    if source_text:
        cand = select_candidate(extract_length_mentions(source_text), source_text)
        source_km = cand.normalized_km if cand else None
    return AttributeCheck(qid, pred.normalized_km, true_km, tier, model, source_km,
                          corrected or sources_disagree(source_km, true_km), corrected)


@dataclass
class ErrorSummary:
    count: int
    rmse_km: float
    mape_pct: float


def aggregate_errors(checks: Iterable[AttributeCheck]) -> ErrorSummary | None:
    checks = list(checks)
    if not checks:
        return None
    pred = np.array([c.predicted_km for c in checks], dtype=float)
    true = np.array([c.true_km for c in checks], dtype=float)
    rmse = math.sqrt(float(np.mean((pred - true) ** 2)))
    mape = float(np.mean(100.0 * np.abs(pred - true) / true))
    return ErrorSummary(len(checks), rmse, mape)


def checks_csv(checks: Sequence[AttributeCheck]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "qid", "tier", "predicted_km", "true_km", "abs_error_km", "pct_error",
                "source_km", "disagreement", "corrected"])
    for c in checks:
        w.writerow([c.model, c.qid, c.tier, f"{c.predicted_km:.6f}", f"{c.true_km:.6f}",
                    f"{c.abs_error_km:.6f}", f"{c.pct_error:.6f}",
                    "" if c.source_km is None else f"{c.source_km:.6f}", int(c.disagreement), int(c.corrected)])
    return buf.getvalue()


# --- vocabulary growth -----------------------------------------------------

_WORD = re.compile(r"[^\W_]+")
MIN_FIT_POINTS = 10


def lex_tokens(text: str, language: str = "en") -> list[str]:
    """English: lowercase alphanumeric runs. Chinese: single non-space, non-punctuation characters."""
    if language == "zh":
        return [c for c in text if c.isalnum()]
    return _WORD.findall(text.lower())


@dataclass
class HeapsCurve:
    checkpoints: list[tuple[int, int]]
    k: float | None = None
    beta: float | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)


def vocab_growth(tokens: Iterable[str], stride: int = 1000, label: str = "") -> HeapsCurve:
    """V(n) at every ``stride`` tokens (plus the final count), with a log-log fit
    V = K n^beta when at least ten checkpoints exist."""
    if stride < 1:
        raise ValueError("stride must be positive")
    seen: set[str] = set()
    points: list[tuple[int, int]] = []
    n = 0
    for n, tok in enumerate(tokens, 1):
        seen.add(tok)
        if n % stride == 0:
            points.append((n, len(seen)))
    if n and (not points or points[-1][0] != n):
        points.append((n, len(seen)))
    curve = HeapsCurve(points, label=label)
    if len(points) >= MIN_FIT_POINTS:
        x = np.log([p[0] for p in points])
        y = np.log([p[1] for p in points])
        beta, log_k = np.polyfit(x, y, 1)
        curve.k, curve.beta = float(math.exp(log_k)), float(beta)
    return curve


def curves_csv(curves: Sequence[HeapsCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["curve", "n_tokens", "vocabulary"])
    for c in curves:
        for n, v in c.checkpoints:
            w.writerow([c.label, n, v])
    return buf.getvalue()


def fits_csv(curves: Sequence[HeapsCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["curve", "points", "K", "beta"])
    for c in curves:
        w.writerow([c.label, len(c.checkpoints), "" if c.k is None else f"{c.k:.6f}",
                    "" if c.beta is None else f"{c.beta:.6f}"])
    return buf.getvalue()


def plot_curves(curves: Sequence[HeapsCurve], path, title: str = "") -> None:
    """Write a deterministic SVG (fixed hash salt, no date metadata)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "entityfact", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for c in curves:
            if c.checkpoints:
                ax.plot([p[0] for p in c.checkpoints], [p[1] for p in c.checkpoints], label=c.label)
        ax.set_xlabel("tokens")
        ax.set_ylabel("unique tokens")
        if title:
            ax.set_title(title)
        if any(c.checkpoints for c in curves):
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
