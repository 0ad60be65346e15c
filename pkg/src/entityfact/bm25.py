"""Okapi BM25 over a fixed paragraph list, with an inverted index."""

from __future__ import annotations

import math
import re
from collections import Counter

_CJK = "぀-ヿ㐀-䶿一-鿿豈-﫿가-힯"
_TOKEN = re.compile(rf"[{_CJK}]+|(?:(?![{_CJK}])[^\W_])+")
_CJK_RUN = re.compile(rf"^[{_CJK}]+$")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs; CJK runs also contribute character bigrams."""
    out: list[str] = []
    for tok in _TOKEN.findall(text.lower()):
        out.append(tok)
        if len(tok) > 1 and _CJK_RUN.match(tok):
            out.extend(tok[i:i + 2] for i in range(len(tok) - 1))
    return out


class BM25Index:
    def __init__(self, docs: list[str], k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.n = len(docs)
        tokens = [tokenize(d) for d in docs]
        self.doc_len = [len(t) for t in tokens]
        self.avgdl = sum(self.doc_len) / self.n if self.n else 0.0
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for i, toks in enumerate(tokens):
            for term, tf in Counter(toks).items():
                self.postings.setdefault(term, []).append((i, tf))

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log((self.n - df + 0.5) / (df + 0.5) + 1)

    def scores(self, query: str) -> list[float]:
        out = [0.0] * self.n
        k1, b = self.k1, self.b
        for term in sorted(set(tokenize(query))):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for i, tf in plist:
                norm = 1 - b + b * self.doc_len[i] / self.avgdl if self.avgdl else 1.0
                out[i] += idf * (tf * (k1 + 1)) / (tf + k1 * norm)
        return out

    def top_k(self, query: str, k: int) -> list[tuple[int, float]]:
        """Best ``k`` documents; equal scores keep document order."""
        s = self.scores(query)
        order = sorted(range(self.n), key=lambda i: (-s[i], i))
        return [(i, s[i]) for i in order[:k]]
