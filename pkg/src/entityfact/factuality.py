"""Atomic-fact extraction, evidence ranking, fact verification and
factual-precision aggregation."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .bm25 import BM25Index
from .evidence import EvidenceBundle
from .http import HttpClient
from .llm import (
    CONTEXT_MARKER,
    STATEMENT_MARKER,
    TARGET_MARKER,
    ChatEndpointConfig,
    EndpointError,
    GenerationRecord,
    chat,
    split_sentences,
)
from .ingest import REGIONS
from .popularity import TIERS

logger = logging.getLogger(__name__)

EXTRACTION_PROMPT = """Break the target sentence into independent atomic facts. Each fact must be a short, \
self-contained statement that can be checked on its own: name the subject explicitly instead of using \
pronouns, and do not merge several claims into one line. Write one fact per line, starting with "- ". \
Output nothing else.

Subject: {title}

Full response:
{text}

Passage around the target sentence:
{window}

""" + TARGET_MARKER + """
{sentence}"""

VERIFICATION_PROMPT = """Decide whether the statement about {title} is supported by at least one of \
the evidence paragraphs.

""" + CONTEXT_MARKER + """
{context}

""" + STATEMENT_MARKER + """
{fact}

Answer with exactly one word: True or False."""

_LIST_ITEM = re.compile(r"^\s*(?:[-*•‣]|\d+[.)])\s+(.+?)\s*$")
_VERDICT = re.compile(r"\b(true|false)\b", re.I)


class EvidenceConfig(str, Enum):
    ONE_PAGE = "one-page"
    PLUS_SEARCH = "search"
    PLUS_LINKS = "links"


class Label(str, Enum):
    SUPPORTED = "Supported"
    NOT_SUPPORTED = "NotSupported"
    ABSTAIN = "Abstain"


class EvidenceConfigError(ValueError):
    pass


@dataclass
class AtomicFact:
    qid: str
    language: str
    index: int
    text: str
    sentence: int = 0


@dataclass
class ParagraphRef:
    page: str
    source: str
    position: int
    score: float
    text: str = ""


@dataclass
class Verdict:
    qid: str
    language: str
    fact_index: int
    fact: str
    label: Label
    evidence: EvidenceConfig
    paragraphs: list[ParagraphRef]
    raw: str = ""
    error: str | None = None
    model: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.value
        d["evidence"] = self.evidence.value
        for p in d["paragraphs"]:
            p.pop("text", None)
        return d


# --- extraction ------------------------------------------------------------

def parse_fact_lines(reply: str) -> list[str]:
    facts = []
    for line in reply.splitlines():
        m = _LIST_ITEM.match(line)
        if m and m.group(1).strip():
            facts.append(m.group(1).strip())
    return facts


def extract_facts(
    generation: GenerationRecord,
    extractor: ChatEndpointConfig,
    http: HttpClient,
    title: str = "",
    template: str = EXTRACTION_PROMPT,
) -> list[AtomicFact]:
    """One extractor call per sentence, showing the neighbouring sentences and the
    full response as context. Facts keep source order."""
    if not generation.response or not generation.response.strip():
        raise ValueError(f"{generation.qid}: empty generation")
    sentences = split_sentences(generation.response, generation.language)
    facts: list[AtomicFact] = []
    for i, sentence in enumerate(sentences):
        window = " ".join(sentences[max(0, i - 1):i + 2])
        prompt = template.format(title=title or generation.qid, text=generation.response.strip(),
                                 window=window, sentence=sentence)
        for text in parse_fact_lines(chat([("user", prompt)], extractor, http)):
            facts.append(AtomicFact(generation.qid, generation.language, len(facts), text, i))
    return facts


# --- retrieval -------------------------------------------------------------

@dataclass
class ParagraphIndex:
    refs: list[ParagraphRef]
    bm25: BM25Index
    title: str = ""

    def __len__(self) -> int:
        return len(self.refs)


def build_index(bundle: EvidenceBundle, config: EvidenceConfig, k1: float = 1.2, b: float = 0.75) -> ParagraphIndex:
    config = EvidenceConfig(config)
    pages = [bundle.entity_page]
    if config in (EvidenceConfig.PLUS_SEARCH, EvidenceConfig.PLUS_LINKS):
        pages += bundle.search_pages
    if config is EvidenceConfig.PLUS_LINKS:
        if bundle.tier != "Tail":
            raise EvidenceConfigError(f"{bundle.qid}: linked-page evidence is only defined for tail entities")
        pages += bundle.inlink_pages
    refs = [ParagraphRef(p.title, p.source, pos, 0.0, text)
            for p in pages for pos, text in enumerate(p.paragraphs)]
    return ParagraphIndex(refs, BM25Index([r.text for r in refs], k1, b), bundle.entity_page.title)


def rank_paragraphs(fact: AtomicFact | str, index: ParagraphIndex, k: int = 5) -> list[ParagraphRef]:
    query = fact.text if isinstance(fact, AtomicFact) else fact
    return [
        ParagraphRef(index.refs[i].page, index.refs[i].source, index.refs[i].position, score, index.refs[i].text)
        for i, score in index.bm25.top_k(query, k)
    ]


# --- verification ----------------------------------------------------------

def parse_verdict(raw: str) -> Label:
    m = _VERDICT.search(raw or "")
    if not m:
        return Label.ABSTAIN
    return Label.SUPPORTED if m.group(1).lower() == "true" else Label.NOT_SUPPORTED


def render_context(paragraphs: Sequence[ParagraphRef]) -> str:
    return "\n\n".join(f"Title: {p.page}\nText: {p.text}" for p in paragraphs)


def verify_fact(
    fact: AtomicFact,
    paragraphs: Sequence[ParagraphRef],
    judge: ChatEndpointConfig,
    http: HttpClient,
    config: EvidenceConfig = EvidenceConfig.ONE_PAGE,
    title: str = "",
    template: str = VERIFICATION_PROMPT,
) -> Verdict:
    if not paragraphs:
        raise ValueError("verification needs at least one paragraph")
    paragraphs = list(paragraphs)[:5]
    prompt = template.format(title=title or fact.qid, context=render_context(paragraphs), fact=fact.text)
    try:
        raw = chat([("user", prompt)], judge, http)
    except EndpointError as exc:
        return Verdict(fact.qid, fact.language, fact.index, fact.text, Label.ABSTAIN, EvidenceConfig(config),
                       paragraphs, "", str(exc))
    return Verdict(fact.qid, fact.language, fact.index, fact.text, parse_verdict(raw), EvidenceConfig(config),
                   paragraphs, raw)


# --- scoring ---------------------------------------------------------------

@dataclass
class EntityScore:
    precision: float
    facts: int
    supported: int
    abstained: int


def score_entity(verdicts: Iterable[Verdict]) -> EntityScore | None:
    """Supported / all verdicts; abstentions stay in the denominator. None if empty."""
    verdicts = list(verdicts)
    if not verdicts:
        return None
    supported = sum(1 for v in verdicts if v.label is Label.SUPPORTED)
    abstained = sum(1 for v in verdicts if v.label is Label.ABSTAIN)
    return EntityScore(supported / len(verdicts), len(verdicts), supported, abstained)


@dataclass
class EntityResult:
    qid: str
    model: str
    language: str
    domain: str
    tier: str
    region: str
    evidence: str
    precision: float
    facts: int
    supported: int
    abstained: int


@dataclass
class Evaluation:
    facts: list[AtomicFact] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)
    results: list[EntityResult] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


def evaluate_generation(
    generation: GenerationRecord,
    bundle: EvidenceBundle,
    configs: Iterable[EvidenceConfig],
    extractor: ChatEndpointConfig,
    judge: ChatEndpointConfig,
    http: HttpClient,
    *,
    k: int = 5,
    extraction_template: str = EXTRACTION_PROMPT,
    verification_template: str = VERIFICATION_PROMPT,
    bm25_k1: float = 1.2,
    bm25_b: float = 0.75,
) -> Evaluation:
    out = Evaluation()
    title = bundle.entity_page.title
    try:
        facts = extract_facts(generation, extractor, http, title, extraction_template)
    except EndpointError as exc:
        out.flags.append(f"{generation.qid}/{generation.language}: extraction failed: {exc}")
        return out
    out.facts = facts
    if not facts:
        out.flags.append(f"{generation.qid}/{generation.language}: no facts extracted")
        return out
    for config in configs:
        config = EvidenceConfig(config)
        if config is EvidenceConfig.PLUS_LINKS and bundle.tier != "Tail":
            continue
        index = build_index(bundle, config, bm25_k1, bm25_b)
        if not len(index):
            out.flags.append(f"{generation.qid}/{generation.language}/{config.value}: empty evidence")
            continue
        verdicts = []
        for fact in facts:
            v = verify_fact(fact, rank_paragraphs(fact, index, k), judge, http, config, title,
                            verification_template)
            v.model = generation.model
            verdicts.append(v)
        out.verdicts.extend(verdicts)
        score = score_entity(verdicts)
        out.results.append(EntityResult(
            generation.qid, generation.model, generation.language, generation.class_name,
            generation.tier, generation.region, config.value,
            score.precision, score.facts, score.supported, score.abstained,
        ))
    return out


# --- aggregation -----------------------------------------------------------

DIMS = ("model", "language", "domain", "tier", "region", "evidence")
MISSING = "–"


@dataclass
class GroupStat:
    key: dict[str, str]
    entities: int
    facts: int
    supported: int
    abstained: int
    macro: float | None
    micro: float | None


def aggregate(results: Iterable[EntityResult], dims: Sequence[str] = DIMS) -> list[GroupStat]:
    """Macro (mean of per-entity precision) and micro (pooled facts) per group."""
    groups: dict[tuple, list[EntityResult]] = {}
    for r in results:
        groups.setdefault(tuple(getattr(r, d) for d in dims), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        facts = sum(m.facts for m in members)
        supported = sum(m.supported for m in members)
        out.append(GroupStat(
            dict(zip(dims, key)), len(members), facts, supported, sum(m.abstained for m in members),
            sum(m.precision for m in members) / len(members),
            supported / facts if facts else None,
        ))
    return out


def group_mean(results: Iterable[EntityResult], **filters: str) -> float | None:
    vals = [r.precision for r in results if all(getattr(r, k) == v for k, v in filters.items())]
    return sum(vals) / len(vals) if vals else None


def fmt_cell(value: float | None, digits: int = 2) -> str:
    return MISSING if value is None else f"{value:.{digits}f}"


def report_csv(results: Sequence[EntityResult], dims: Sequence[str] = DIMS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*dims, "entities", "facts", "supported", "abstained", "macro_precision", "micro_precision"])
    for g in aggregate(results, dims):
        w.writerow([*g.key.values(), g.entities, g.facts, g.supported, g.abstained,
                    f"{g.macro:.6f}", "" if g.micro is None else f"{g.micro:.6f}"])
    return buf.getvalue()


TABLE_ROWS = [
    ("Head", {"tier": "Head", "evidence": "one-page"}),
    ("  +search", {"tier": "Head", "evidence": "search"}),
    ("Torso", {"tier": "Torso", "evidence": "one-page"}),
    ("  +search", {"tier": "Torso", "evidence": "search"}),
    ("Tail", {"tier": "Tail", "evidence": "one-page"}),
    ("  +search", {"tier": "Tail", "evidence": "search"}),
    ("  +linked pages", {"tier": "Tail", "evidence": "links"}),
    *[(r, {"region": r, "evidence": "one-page"}) for r in REGIONS],
    ("Total", {"evidence": "one-page"}),
]


def report_markdown(results: Sequence[EntityResult], domains: Sequence[str], models: Sequence[str],
                    languages: Sequence[str]) -> str:
    """Macro factual precision laid out with tier/region rows and domain x model columns."""
    lines = ["Factual precision (macro average over entities; evidence ranked by BM25).", ""]
    cols = [(d, m) for d in domains for m in models]
    for lang in languages:
        lines.append(f"### {lang}")
        lines.append("")
        lines.append("| | " + " | ".join(f"{d} / {m}" for d, m in cols) + " |")
        lines.append("|---|" + "---|" * len(cols))
        for label, filt in TABLE_ROWS:
            cells = [fmt_cell(group_mean(results, language=lang, domain=d, model=m, **filt)) for d, m in cols]
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def tiers_for(results: Iterable[EntityResult]) -> list[str]:
    present = {r.tier for r in results}
    return [t for t in TIERS if t in present]
