"""Head/torso/tail partition by cumulative popularity share, and correlation
between popularity proxies."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .ingest import qid_sort_key

TIERS = ("Head", "Torso", "Tail")


class PartitionError(ValueError):
    pass


class UndefinedCorrelation(ValueError):
    pass


@dataclass
class TierAssignment:
    metric: str
    tiers: dict[str, str]
    # (qid, value) in rank order, rank 1 first
    ranking: list[tuple[str, float]]
    head_size: int
    torso_size: int
    head_share: float
    head_torso_share: float
    total: float

    @property
    def tail_size(self) -> int:
        return len(self.ranking) - self.head_size - self.torso_size

    def members(self, tier: str) -> list[str]:
        return [q for q, _ in self.ranking if self.tiers[q] == tier]

    def boundaries(self) -> dict:
        return {
            "metric": self.metric,
            "total": self.total,
            "head_size": self.head_size,
            "torso_size": self.torso_size,
            "tail_size": self.tail_size,
            "head_share": self.head_share,
            "head_torso_share": self.head_torso_share,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["qid", self.metric, "tier", "rank"])
        for rank, (qid, value) in enumerate(self.ranking, 1):
            w.writerow([qid, _num(value), self.tiers[qid], rank])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, boundaries: dict) -> "TierAssignment":
        rows = list(csv.reader(io.StringIO(text)))
        metric = rows[0][1]
        ranking = [(r[0], float(r[1])) for r in rows[1:]]
        tiers = {r[0]: r[2] for r in rows[1:]}
        return cls(metric, tiers, ranking, boundaries["head_size"], boundaries["torso_size"],
                   boundaries["head_share"], boundaries["head_torso_share"], boundaries["total"])


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def partition_tiers(entities: Iterable[tuple[str, float]], metric: str = "en_pageviews") -> TierAssignment:
    """Split entities into Head/Torso/Tail by cumulative share of ``metric``.

    Entities are ranked by descending value, ties by ascending numeric QID.
    Head is the shortest prefix holding at least a third of the total; Head and
    Torso together the shortest prefix holding at least two thirds.
    """
    items = list(entities)
    if any(v < 0 for _, v in items):
        raise PartitionError("metric values must be non-negative")
    ranking = sorted(items, key=lambda qv: (-qv[1], qid_sort_key(qv[0])))
    total = math.fsum(v for _, v in ranking)
    if total <= 0:
        raise PartitionError(f"metric {metric!r} is zero for every entity; no meaningful partition")

    head = head_torso = None
    cum = 0.0
    for i, (_, v) in enumerate(ranking, 1):
        cum += v
        if head is None and 3 * cum >= total:
            head = i
        if head_torso is None and 3 * cum >= 2 * total:
            head_torso = i
            break
    head_torso = head_torso or len(ranking)
    head = head or head_torso

    tiers = {}
    for i, (qid, _) in enumerate(ranking):
        tiers[qid] = "Head" if i < head else "Torso" if i < head_torso else "Tail"
    if len(tiers) != len(ranking):
        raise PartitionError("duplicate QIDs in input")
    return TierAssignment(
        metric=metric,
        tiers=tiers,
        ranking=[(q, v) for q, v in ranking],
        head_size=head,
        torso_size=head_torso - head,
        head_share=math.fsum(v for _, v in ranking[:head]) / total,
        head_torso_share=math.fsum(v for _, v in ranking[:head_torso]) / total,
        total=total,
    )


def correlate(a: Sequence[float], b: Sequence[float], method: str = "spearman") -> float:
    """Spearman rank correlation (average ranks for ties) or Pearson on log1p values."""
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape:
        raise ValueError("vectors must have equal length")
    if x.size < 3:
        raise ValueError("need at least 3 paired observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    if method == "spearman":
        r = stats.spearmanr(x, y).statistic
    elif method == "pearson_log":
        if np.any(x < 0) or np.any(y < 0):
            raise ValueError("pearson_log needs non-negative values")
        r = stats.pearsonr(np.log1p(x), np.log1p(y)).statistic
    else:
        raise ValueError(f"unknown correlation method {method!r}")
    return float(min(1.0, max(-1.0, r)))


@dataclass
class CorrelationReport:
    class_name: str
    method: str
    metrics: list[str]
    matrix: list[list[float | None]]
    support: list[list[int]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.metrics])
        for name, row in zip(self.metrics, self.matrix):
            w.writerow([name, *("" if v is None else f"{v:.4f}" for v in row)])
        return buf.getvalue()


def correlation_matrix(
    class_name: str,
    columns: dict[str, dict[str, float]],
    method: str = "spearman",
) -> CorrelationReport:
    """Pairwise coefficients over ``columns`` (metric -> {qid: value}).

    Each pair uses the entities that have both metrics; undefined pairs are None.
    """
    names = list(columns)
    n = len(names)
    matrix: list[list[float | None]] = [[None] * n for _ in range(n)]
    support = [[0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            common = sorted(set(columns[names[i]]) & set(columns[names[j]]), key=qid_sort_key)
            support[i][j] = support[j][i] = len(common)
            if i == j:
                matrix[i][i] = 1.0 if len(common) >= 3 else None
                continue
            try:
                r = correlate([columns[names[i]][q] for q in common], [columns[names[j]][q] for q in common], method)
            except ValueError:
                r = None
            matrix[i][j] = matrix[j][i] = r
    return CorrelationReport(class_name, method, names, matrix, support)
