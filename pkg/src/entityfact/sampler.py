"""Draw the dataset from a tiered base class: eligibility filters, tier quotas
with deficit reallocation to the tail, and round-robin region balancing."""

from __future__ import annotations

import logging
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

from .ingest import REGIONS, qid_sort_key
from .popularity import TIERS

logger = logging.getLogger(__name__)

PAREN_SUFFIX = re.compile(r"\s*\([^()]*\)\s*$")


@dataclass
class SamplingPlan:
    quotas: dict[str, int] = field(default_factory=lambda: {"Head": 100, "Torso": 200, "Tail": 700})
    min_page_chars: int = 200
    exclude_stubs: bool = True
    region_uniform: bool = True
    seed: int = 0
    pivot_language: str = "en"

    def __post_init__(self):
        if any(q < 0 for q in self.quotas.values()):
            raise ValueError("quotas must be non-negative")
        if set(self.quotas) - set(TIERS):
            raise ValueError(f"unknown tiers in quotas: {sorted(set(self.quotas) - set(TIERS))}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class Candidate:
    """One base-class entity as the sampler sees it."""

    qid: str
    region: str = "Unknown"
    titles: dict[str, str] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)
    page_chars: dict[str, int] = field(default_factory=dict)
    stub: dict[str, bool] = field(default_factory=dict)


@dataclass
class SampleMember:
    qid: str
    class_name: str
    tier: str
    region: str
    titles: dict[str, str]
    labels: dict[str, str]
    base_name: str | None = None
    namesakes: int = 1


@dataclass
class SampleSet:
    class_name: str
    members: list[SampleMember]
    plan: SamplingPlan
    warnings: list[str] = field(default_factory=list)

    def counts(self, languages: Sequence[str] = ()) -> dict:
        """Table of tier and region counts; per-language counts of members with a page."""
        table = {
            "tier": {t: sum(1 for m in self.members if m.tier == t) for t in TIERS},
            "region": {r: sum(1 for m in self.members if m.region == r) for r in REGIONS},
            "total": len(self.members),
        }
        for lang in languages:
            sub = [m for m in self.members if lang in m.titles]
            table[f"with_{lang}_page"] = {
                "tier": {t: sum(1 for m in sub if m.tier == t) for t in TIERS},
                "region": {r: sum(1 for m in sub if m.region == r) for r in REGIONS},
                "total": len(sub),
            }
        return table

    def to_json(self) -> dict:
        return {"class_name": self.class_name, "members": [asdict(m) for m in self.members],
                "plan": asdict(self.plan), "warnings": list(self.warnings)}

    @classmethod
    def from_json(cls, d: dict) -> "SampleSet":
        return cls(d["class_name"], [SampleMember(**m) for m in d["members"]],
                   SamplingPlan(**d["plan"]), list(d.get("warnings", [])))


class SeededRng:
    """MT19937 (stdlib ``random``) seeded with a 64-bit integer.

    Only ``getrandbits`` is used, whose output stream is fixed by the algorithm,
    so draws agree across platforms and Python versions.
    """

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        k = n.bit_length()
        while True:
            r = self._rng.getrandbits(k)
            if r < n:
                return r

    def shuffle(self, items: list) -> list:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def is_eligible(c: Candidate, plan: SamplingPlan) -> bool:
    lang = plan.pivot_language
    if lang not in c.titles:
        return False
    if plan.exclude_stubs and c.stub.get(lang, False):
        return False
    return c.page_chars.get(lang, 0) >= plan.min_page_chars


def filter_eligible(pool: Iterable[Candidate], plan: SamplingPlan) -> list[Candidate]:
    return [c for c in pool if is_eligible(c, plan)]


def _draw(members: list[Candidate], quota: int, plan: SamplingPlan, rng: SeededRng) -> list[Candidate]:
    members = sorted(members, key=lambda c: qid_sort_key(c.qid))
    if quota >= len(members):
        return members
    if not plan.region_uniform:
        return rng.shuffle(members)[:quota]
    queues = {r: rng.shuffle([c for c in members if c.region == r]) for r in REGIONS}
    picked: list[Candidate] = []
    while len(picked) < quota:
        for r in REGIONS:
            if queues[r] and len(picked) < quota:
                picked.append(queues[r].pop(0))
    return picked


def _ordered(members: list[Candidate]) -> list[Candidate]:
    order = {r: i for i, r in enumerate(REGIONS)}
    return sorted(members, key=lambda c: (order.get(c.region, len(order)), qid_sort_key(c.qid)))


def sample(eligible: Sequence[Candidate], tiers: dict[str, str], plan: SamplingPlan,
           class_name: str = "") -> SampleSet:
    """Fill Head, then Torso, then Tail. A tier smaller than its quota is taken whole
    and its deficit moves to the Tail quota."""
    missing = [c.qid for c in eligible if c.qid not in tiers]
    if missing:
        raise ValueError(f"{len(missing)} eligible entities have no tier, e.g. {missing[:3]}")
    rng = SeededRng(plan.seed)
    quotas = {t: plan.quotas.get(t, 0) for t in TIERS}
    warnings = []
    chosen: dict[str, list[Candidate]] = {}
    for tier in TIERS:
        members = [c for c in eligible if tiers[c.qid] == tier]
        if tier != "Tail" and len(members) < quotas[tier]:
            quotas["Tail"] += quotas[tier] - len(members)
        chosen[tier] = _draw(members, quotas[tier], plan, rng)
    total_quota = sum(plan.quotas.get(t, 0) for t in TIERS)
    n = sum(len(v) for v in chosen.values())
    if n < total_quota:
        msg = f"{class_name or 'class'}: shortfall, {n} entities sampled for a total quota of {total_quota}"
        warnings.append(msg)
        logger.warning(msg)
    members = [
        SampleMember(c.qid, class_name, tier, c.region, dict(c.titles), dict(c.labels))
        for tier in TIERS
        for c in _ordered(chosen[tier])
    ]
    return SampleSet(class_name, members, plan, warnings)


def base_name(title: str) -> str:
    return PAREN_SUFFIX.sub("", title).strip()


def annotate_ambiguity(sample_set: SampleSet, pool: Iterable[Candidate]) -> SampleSet:
    lang = sample_set.plan.pivot_language
    counts = Counter(base_name(c.titles[lang]) for c in pool if lang in c.titles)
    members = []
    for m in sample_set.members:
        title = m.titles.get(lang)
        if title is None:
            members.append(m)
            continue
        b = base_name(title)
        members.append(replace(m, base_name=b, namesakes=max(1, counts.get(b, 0))))
    return replace(sample_set, members=members)
