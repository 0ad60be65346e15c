"""Per-language Wikipedia popularity signals: pageviews, inlinks, edits,
page length and the stub flag."""

from __future__ import annotations

import calendar
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Any, Iterator
from urllib.parse import quote

from .http import HttpClient, NotFoundError

logger = logging.getLogger(__name__)

PAGEVIEWS_URL = (
    "https://wikimedia.org/api/rest_v1/metrics/pageviews/per-article/"
    "{project}/all-access/user/{title}/monthly/{start}/{end}"
)
ACTION_API_URL = "https://{lang}.wikipedia.org/w/api.php"


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    """Inclusive range of calendar months, given as first days of months."""

    start: date
    end: date

    @classmethod
    def year(cls, year: int) -> "Window":
        return cls(date(year, 1, 1), date(year, 12, 1))

    @classmethod
    def parse(cls, start: str, end: str) -> "Window":
        s = date.fromisoformat(start if len(start) > 7 else start + "-01")
        e = date.fromisoformat(end if len(end) > 7 else end + "-01")
        return cls(s.replace(day=1), e.replace(day=1))

    def months(self) -> list[str]:
        """Month keys as YYYYMM."""
        out = []
        y, m = self.start.year, self.start.month
        while (y, m) <= (self.end.year, self.end.month):
            out.append(f"{y:04d}{m:02d}")
            y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        return out

    def as_list(self) -> list[str]:
        return [self.start.isoformat(), self.end.isoformat()]


@dataclass
class LanguageStats:
    pageviews: int
    inlinks: int
    edits: int
    page_length_chars: int
    is_stub: bool


@dataclass
class PopularityProfile:
    qid: str
    window: list[str]
    triple_count: int
    languages: dict[str, LanguageStats] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PopularityProfile":
        return cls(d["qid"], d["window"], d["triple_count"],
                   {k: LanguageStats(**v) for k, v in d["languages"].items()})

    def metric(self, name: str) -> float | None:
        """Look up ``<lang>_<signal>`` (e.g. ``en_pageviews``) or ``triples``."""
        if name == "triples":
            return self.triple_count
        lang, _, signal = name.partition("_")
        stats = self.languages.get(lang)
        if stats is None:
            return None
        return getattr(stats, signal)


def is_stub_marker(templates: list[str], categories: list[str]) -> bool:
    for t in templates:
        if _strip_ns(t).strip().lower().endswith("-stub"):
            return True
    return any("stub" in _strip_ns(c).lower() for c in categories)


def _strip_ns(title: str) -> str:
    return title.split(":", 1)[1] if ":" in title else title


@dataclass
class Wikipedia:
    """MediaWiki action API plus the pageviews REST API for one language edition."""

    http: HttpClient
    lang: str = "en"
    api_url: str | None = None
    pageviews_url: str = PAGEVIEWS_URL

    def __post_init__(self):
        if self.api_url is None:
            self.api_url = ACTION_API_URL.format(lang=self.lang)

    @property
    def project(self) -> str:
        return f"{self.lang}.wikipedia"

    def query(self, **params: Any) -> Iterator[dict]:
        """Run an action=query request following ``continue`` to completion."""
        base = {"action": "query", "format": "json", "formatversion": "2", **params}
        cont: dict[str, str] = {}
        while True:
            data = self.http.get(self.api_url, params={**base, **cont}).json()
            if "error" in data:
                raise NotFoundError(f"{self.lang}: API error {data['error'].get('code')}: {data['error'].get('info')}")
            yield data
            if "continue" not in data:
                return
            cont = data["continue"]

    def _single_page(self, data: dict, title: str) -> dict:
        pages = data.get("query", {}).get("pages", [])
        if not pages or pages[0].get("missing") or pages[0].get("invalid"):
            raise NotFoundError(f"{self.project}: page {title!r} not found")
        return pages[0]

    def fetch_pageviews(self, title: str, window: Window, allow_gaps: bool = False) -> int:
        months = window.months()
        if not months:
            raise WindowError("window covers zero months")
        end_day = calendar.monthrange(int(months[-1][:4]), int(months[-1][4:]))[1]
        url = self.pageviews_url.format(
            project=self.project,
            title=quote(title.replace(" ", "_"), safe=""),
            start=f"{months[0]}0100",
            end=f"{months[-1]}{end_day:02d}00",
        )
        items = self.http.get(url).json().get("items", [])
        per_month = {it["timestamp"][:6]: int(it["views"]) for it in items}
        gaps = [m for m in months if m not in per_month]
        if gaps and not allow_gaps:
            raise WindowError(f"pageviews for {title!r} missing months {gaps}")
        return sum(per_month.get(m, 0) for m in months)

    def fetch_inlinks(self, title: str) -> int:
        total = 0
        for data in self.query(list="backlinks", bltitle=title, blnamespace=0, bllimit="max"):
            total += len(data.get("query", {}).get("backlinks", []))
        return total

    def inlink_titles(self, title: str, limit: int | None = None) -> list[str]:
        out: list[str] = []
        for data in self.query(list="backlinks", bltitle=title, blnamespace=0, bllimit="max"):
            out.extend(b["title"] for b in data.get("query", {}).get("backlinks", []))
            if limit is not None and len(out) >= limit:
                return out[:limit]
        return out

    def fetch_edits(self, title: str) -> int:
        # all edits, bots included
        total = 0
        for data in self.query(prop="revisions", titles=title, rvprop="ids", rvlimit="max"):
            page = self._single_page(data, title)
            total += len(page.get("revisions", []))
        return total

    def fetch_page_length(self, title: str) -> int:
        data = next(self.query(prop="info", titles=title))
        return int(self._single_page(data, title).get("length", 0))

    def detect_stub(self, title: str) -> bool:
        templates: list[str] = []
        categories: list[str] = []
        for data in self.query(prop="templates|categories", titles=title, tllimit="max", cllimit="max"):
            page = self._single_page(data, title)
            templates += [t["title"] for t in page.get("templates", [])]
            categories += [c["title"] for c in page.get("categories", [])]
        return is_stub_marker(templates, categories)

    def language_stats(self, title: str, window: Window) -> LanguageStats:
        return LanguageStats(
            pageviews=self.fetch_pageviews(title, window),
            inlinks=self.fetch_inlinks(title),
            edits=self.fetch_edits(title),
            page_length_chars=self.fetch_page_length(title),
            is_stub=self.detect_stub(title),
        )


def collect_profiles(
    records: list,
    wikis: dict[str, Wikipedia],
    window: Window,
    max_workers: int = 4,
) -> tuple[list[PopularityProfile], list[str]]:
    """Profiles for every record, ordered like ``records``. Returns (profiles, warnings)."""
    warnings: list[str] = []

    def one(rec) -> PopularityProfile:
        prof = PopularityProfile(rec.qid, window.as_list(), rec.triple_count)
        for lang, wiki in wikis.items():
            title = rec.wiki_titles.get(lang)
            if not title:
                continue
            try:
                prof.languages[lang] = wiki.language_stats(title, window)
            except (NotFoundError, WindowError) as exc:
                warnings.append(f"{rec.qid}/{lang}: {exc}")
                logger.warning("%s/%s: %s", rec.qid, lang, exc)
        return prof

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        profiles = list(pool.map(one, records))
    return profiles, sorted(warnings)
