"""Evidence bundles (entity page, search hits, inlinking pages as paragraphized
plain text) and the on-disk dataset format."""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .http import NotFoundError, TransportError
from .sampler import SampleMember, SampleSet, SamplingPlan
from .wikistats import Wikipedia
from .wikitext import MIN_PARAGRAPH_CHARS, segment_paragraphs, strip_wikitext_flagged

logger = logging.getLogger(__name__)

SOURCES = ("entity_page", "search_hit", "inlink")
DATASET_FORMAT = 1


class DatasetError(Exception):
    pass


@dataclass
class FetchedText:
    title: str
    text: str
    redirect_from: str | None = None
    lossy: bool = False


@dataclass
class Page:
    title: str
    language: str
    source: str
    plaintext: str
    paragraphs: list[str]
    redirect_from: str | None = None
    lossy: bool = False

    @classmethod
    def build(cls, fetched: FetchedText, language: str, source: str,
              min_chars: int = MIN_PARAGRAPH_CHARS) -> "Page":
        return cls(fetched.title, language, source, fetched.text,
                   segment_paragraphs(fetched.text, min_chars), fetched.redirect_from, fetched.lossy)

    def meta(self) -> dict:
        return {"title": self.title, "redirect_from": self.redirect_from, "lossy": self.lossy}


@dataclass
class EvidenceBundle:
    qid: str
    language: str
    tier: str
    entity_page: Page
    search_pages: list[Page] = field(default_factory=list)
    inlink_pages: list[Page] = field(default_factory=list)
    collected_at: str = ""
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.search_pages) > 10:
            raise ValueError("at most 10 search pages per bundle")
        if self.inlink_pages and self.tier != "Tail":
            raise ValueError(f"{self.qid}: inlink pages are only collected for tail entities")

    def pages(self, source: str) -> list[Page]:
        return {"entity_page": [self.entity_page], "search_hit": self.search_pages,
                "inlink": self.inlink_pages}[source]


def fetch_plaintext(wiki: Wikipedia, title: str) -> FetchedText:
    """Plain-text extract of the whole page; falls back to stripping wikitext."""
    data = next(wiki.query(prop="extracts", explaintext=1, exsectionformat="plain",
                           redirects=1, titles=title))
    query = data.get("query", {})
    redirects = query.get("redirects", [])
    resolved = redirects[0]["to"] if redirects else title
    page = wiki._single_page(data, title)
    resolved = page.get("title", resolved)
    redirect_from = title if redirects else None
    extract = page.get("extract") or ""
    if extract.strip():
        return FetchedText(resolved, extract, redirect_from, False)

    data = next(wiki.query(prop="revisions", rvprop="content", rvslots="main", titles=resolved))
    page = wiki._single_page(data, resolved)
    revs = page.get("revisions") or [{}]
    source = revs[0].get("slots", {}).get("main", {}).get("content", "")
    text, _ = strip_wikitext_flagged(source)
    return FetchedText(resolved, text, redirect_from, True)


def search_titles(wiki: Wikipedia, query: str) -> list[str]:
    # default parameters: srlimit=10, namespace 0
    data = next(wiki.query(list="search", srsearch=query))
    return [hit["title"] for hit in data.get("query", {}).get("search", [])]


def collect_bundle(
    member: SampleMember,
    language: str,
    wiki: Wikipedia,
    *,
    collected_at: str = "",
    inlink_cap: int = 200,
    min_chars: int = MIN_PARAGRAPH_CHARS,
) -> EvidenceBundle:
    title = member.titles.get(language)
    if not title:
        raise ValueError(f"{member.qid} has no {language} page")
    flags: list[str] = []
    entity = Page.build(fetch_plaintext(wiki, title), language, "entity_page", min_chars)
    if entity.lossy:
        flags.append("entity_page_parsed_from_wikitext")
    seen = {title, entity.title}

    def fetch_many(titles: Iterable[str], source: str) -> list[Page]:
        pages = []
        for t in titles:
            if t in seen:
                continue
            seen.add(t)
            try:
                fetched = fetch_plaintext(wiki, t)
            except (NotFoundError, TransportError) as exc:
                flags.append(f"{source}_fetch_failed:{t}")
                logger.warning("%s/%s: could not fetch %s %r: %s", member.qid, language, source, t, exc)
                continue
            if fetched.title in seen and fetched.title != t:
                continue
            seen.add(fetched.title)
            pages.append(Page.build(fetched, language, source, min_chars))
        return pages

    try:
        hits = search_titles(wiki, title)
    except (NotFoundError, TransportError) as exc:
        flags.append("search_failed")
        logger.warning("%s/%s: search failed: %s", member.qid, language, exc)
        hits = []
    search_pages = fetch_many(hits[:10], "search_hit")

    inlink_pages: list[Page] = []
    if member.tier == "Tail":
        try:
            linking = wiki.inlink_titles(entity.title, limit=inlink_cap)
        except (NotFoundError, TransportError) as exc:
            flags.append("inlinks_failed")
            logger.warning("%s/%s: backlinks failed: %s", member.qid, language, exc)
            linking = []
        inlink_pages = fetch_many(linking, "inlink")
    return EvidenceBundle(member.qid, language, member.tier, entity, search_pages, inlink_pages,
                          collected_at, flags)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _read_text(path: Path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_dataset(
    samples: list[SampleSet],
    bundles: Mapping[tuple[str, str], EvidenceBundle],
    path: str | os.PathLike,
    *,
    min_chars: int = MIN_PARAGRAPH_CHARS,
    extra: dict | None = None,
    languages: Iterable[str] = (),
) -> None:
    """Write the dataset directory atomically (build in a temp dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        manifest = {
            "format": DATASET_FORMAT,
            "paragraph_min_chars": min_chars,
            "classes": {
                s.class_name: {"plan": asdict(s.plan), "warnings": s.warnings,
                               "counts": s.counts(list(languages))}
                for s in samples
            },
            **({"extra": extra} if extra else {}),
        }
        _write_text(tmp / "manifest.json", json.dumps(manifest, sort_keys=True, ensure_ascii=False, indent=2) + "\n")
        by_qid: dict[str, list[EvidenceBundle]] = {}
        for key in sorted(bundles):
            by_qid.setdefault(key[0], []).append(bundles[key])
        lines = []
        for s in samples:
            for m in s.members:
                evidence = {}
                for b in by_qid.get(m.qid, []):
                    qid, lang = b.qid, b.language
                    pages_meta = {}
                    for source in SOURCES:
                        metas = []
                        for n, page in enumerate(b.pages(source)):
                            _write_text(tmp / "evidence" / qid / lang / source / f"{n}.txt", page.plaintext)
                            metas.append(page.meta())
                        pages_meta[source] = metas
                    evidence[lang] = {"collected_at": b.collected_at, "flags": b.flags, "pages": pages_meta}
                lines.append(_dump({**asdict(m), "evidence": evidence}))
        _write_text(tmp / "entities.jsonl", "".join(line + "\n" for line in lines))
        if path.exists():
            old = path.parent / f".{path.name}.old-{os.getpid()}"
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_dataset(path: str | os.PathLike) -> tuple[list[SampleSet], dict[tuple[str, str], EvidenceBundle]]:
    path = Path(path)
    try:
        manifest = json.loads(_read_text(path / "manifest.json"))
        min_chars = int(manifest["paragraph_min_chars"])
        classes = manifest["classes"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot load dataset manifest in {path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")

    samples = {name: SampleSet(name, [], SamplingPlan(**info["plan"]), list(info.get("warnings", [])))
               for name, info in classes.items()}
    bundles: dict[tuple[str, str], EvidenceBundle] = {}
    try:
        lines = _read_text(path / "entities.jsonl").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read entities.jsonl: {exc}") from exc
    for line in lines:
        row = json.loads(line)
        evidence = row.pop("evidence", {})
        member = SampleMember(**row)
        if member.class_name not in samples:
            raise DatasetError(f"{member.qid}: class {member.class_name!r} missing from manifest")
        samples[member.class_name].members.append(member)
        for lang, info in evidence.items():
            base = path / "evidence" / member.qid / lang
            if not base.is_dir():
                raise DatasetError(f"missing evidence directory for {member.qid} ({lang}): {base}")
            pages: dict[str, list[Page]] = {}
            for source in SOURCES:
                pages[source] = []
                for n, meta in enumerate(info["pages"].get(source, [])):
                    f = base / source / f"{n}.txt"
                    if not f.is_file():
                        raise DatasetError(f"missing evidence file for {member.qid}: {f}")
                    fetched = FetchedText(meta["title"], _read_text(f), meta.get("redirect_from"),
                                          meta.get("lossy", False))
                    pages[source].append(Page.build(fetched, lang, source, min_chars))
            if len(pages["entity_page"]) != 1:
                raise DatasetError(f"{member.qid} ({lang}): expected exactly one entity page")
            bundles[(member.qid, lang)] = EvidenceBundle(
                member.qid, lang, member.tier, pages["entity_page"][0], pages["search_hit"],
                pages["inlink"], info.get("collected_at", ""), list(info.get("flags", [])))
    return list(samples.values()), bundles
