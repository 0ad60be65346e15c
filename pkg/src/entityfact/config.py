"""Run configuration: a YAML file validated by pydantic.

Relative paths resolve against the config file's directory. Secrets never live
in the file; endpoints name an environment variable holding their API key.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .factuality import EXTRACTION_PROMPT, VERIFICATION_PROMPT, EvidenceConfig
from .ingest import DEFAULT_TEMPLATE, PID_RE, QID_RE, WIKIDATA_API, WIKIDATA_SPARQL, ClassSpec
from .llm import ChatEndpointConfig
from .popularity import TIERS
from .sampler import SamplingPlan
from .wikistats import ACTION_API_URL, PAGEVIEWS_URL, Window


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClassConfig(_Strict):
    name: str = Field(pattern=r"^[A-Za-z0-9_-]+$")
    class_qid: str
    attribute_props: list[str] = []
    location_props: list[str] = ["P17"]
    via_prop: str | None = None
    membership: str = "wdt:P31"
    sparql_template: str = DEFAULT_TEMPLATE
    # per-language generation prompt overrides, e.g. {"en": "Tell me about the {title}."}
    prompts: dict[str, str] = {}

    @field_validator("class_qid")
    @classmethod
    def _qid(cls, v: str) -> str:
        if not QID_RE.match(v):
            raise ValueError(f"class_qid must look like Q123, got {v!r}")
        return v

    @field_validator("attribute_props", "location_props")
    @classmethod
    def _pids(cls, v: list[str]) -> list[str]:
        for pid in v:
            if not PID_RE.match(pid):
                raise ValueError(f"bad property id {pid!r}")
        return v

    def spec(self, languages: list[str]) -> ClassSpec:
        return ClassSpec(self.class_qid, self.name, list(languages), list(self.attribute_props),
                         list(self.location_props), self.via_prop, self.membership, self.sparql_template)


class WindowConfig(_Strict):
    start: str = "2024-01"
    end: str = "2024-12"

    def window(self) -> Window:
        w = Window.parse(self.start, self.end)
        if w.end < w.start:
            raise ValueError("window end precedes start")
        return w


class PlanConfig(_Strict):
    quotas: dict[str, int] = {"Head": 100, "Torso": 200, "Tail": 700}
    min_page_chars: int = Field(200, ge=0)
    exclude_stubs: bool = True
    region_uniform: bool = True
    seed: int = Field(0, ge=0, lt=2**64)
    pivot_language: str = "en"

    @field_validator("quotas")
    @classmethod
    def _tiers(cls, v: dict[str, int]) -> dict[str, int]:
        unknown = set(v) - set(TIERS)
        if unknown:
            raise ValueError(f"unknown tiers {sorted(unknown)}")
        if any(q < 0 for q in v.values()):
            raise ValueError("quotas must be non-negative")
        return v

    def plan(self) -> SamplingPlan:
        return SamplingPlan(dict(self.quotas), self.min_page_chars, self.exclude_stubs,
                            self.region_uniform, self.seed, self.pivot_language)


class EndpointsConfig(_Strict):
    generation: list[ChatEndpointConfig] = []
    extractor: ChatEndpointConfig | None = None
    judge: ChatEndpointConfig | None = None

    @model_validator(mode="after")
    def _unique(self):
        names = [e.name for e in self.generation]
        if len(names) != len(set(names)):
            raise ValueError("generation endpoint names must be unique")
        for n in names:
            if not n or "/" in n or n.startswith("."):
                raise ValueError(f"endpoint name {n!r} is not usable as a directory name")
        return self


class WikidataConfig(_Strict):
    sparql_url: str = WIKIDATA_SPARQL
    api_url: str = WIKIDATA_API
    page_size: int = Field(10_000, gt=0)


class WikipediaConfig(_Strict):
    api_url: str = ACTION_API_URL
    pageviews_url: str = PAGEVIEWS_URL


class HttpConfig(_Strict):
    max_workers: int = Field(4, ge=1, le=64)
    min_interval: float = Field(0.0, ge=0)
    timeout: float = Field(60.0, gt=0)
    max_attempts: int = Field(3, ge=1, le=10)
    backoff: float = Field(1.0, ge=0)
    user_agent: str | None = None


class EvidenceSettings(_Strict):
    inlink_cap: int = Field(200, ge=0)
    paragraph_min_chars: int = Field(40, ge=1)


class EvalConfig(_Strict):
    evidence_configs: list[EvidenceConfig] = list(EvidenceConfig)
    top_k: int = Field(5, ge=1, le=5)
    bm25_k1: float = Field(1.2, gt=0)
    bm25_b: float = Field(0.75, ge=0, le=1)
    extraction_prompt: str = EXTRACTION_PROMPT
    verification_prompt: str = VERIFICATION_PROMPT


class ProbeConfig(_Strict):
    length_class: str | None = None
    length_prop: str = "P2043"
    length_language: str = "en"
    corrections: str | None = None
    heaps_stride: int = Field(1000, ge=1)


class RunConfig(_Strict):
    snapshot: str = Field(description="ISO date stamped on every artifact; keeps outputs reproducible")
    languages: list[str] = ["en"]
    classes: list[ClassConfig]
    window: WindowConfig = WindowConfig()
    popularity_metric: str = "en_pageviews"
    correlation_method: str = Field("spearman", pattern="^(spearman|pearson_log)$")
    plan: PlanConfig = PlanConfig()
    endpoints: EndpointsConfig = EndpointsConfig()
    evaluation: EvalConfig = EvalConfig()
    evidence: EvidenceSettings = EvidenceSettings()
    probes: ProbeConfig = ProbeConfig()
    wikidata: WikidataConfig = WikidataConfig()
    wikipedia: WikipediaConfig = WikipediaConfig()
    http: HttpConfig = HttpConfig()
    region_table: str | None = None
    cache_dir: str = "cache"
    out_dir: str = "out"

    @model_validator(mode="after")
    def _check(self):
        if not self.languages:
            raise ValueError("languages must be non-empty")
        names = [c.name for c in self.classes]
        if not names:
            raise ValueError("at least one class is required")
        if len(names) != len(set(names)):
            raise ValueError("class names must be unique")
        if self.plan.pivot_language not in self.languages:
            raise ValueError("plan.pivot_language must be one of languages")
        if self.probes.length_class is not None and self.probes.length_class not in names:
            raise ValueError(f"probes.length_class {self.probes.length_class!r} is not a configured class")
        self.window.window()
        return self

    def class_config(self, name: str) -> ClassConfig:
        for c in self.classes:
            if c.name == name:
                return c
        raise ConfigError(f"unknown class {name!r}; configured: {[c.name for c in self.classes]}")


# config sections each stage's outputs depend on (cumulative along the pipeline)
_STAGE_SECTIONS = {
    "ingest": ["snapshot", "languages", "classes", "wikidata", "region_table"],
    "stats": ["window", "wikipedia"],
    "tier": ["popularity_metric", "correlation_method"],
    "sample": ["plan"],
    "evidence": ["evidence"],
    "generate": ["endpoints.generation"],
    "evaluate": ["endpoints.extractor", "endpoints.judge", "evaluation"],
    "probe-lengths": ["probes"],
    "probe-lex": ["probes"],
    "report": [],
}
_UPSTREAM = {
    "ingest": [],
    "stats": ["ingest"],
    "tier": ["stats"],
    "sample": ["tier"],
    "evidence": ["sample"],
    "generate": ["sample"],
    "evaluate": ["evidence", "generate"],
    "probe-lengths": ["evidence", "generate"],
    "probe-lex": ["generate"],
    "report": ["evaluate", "probe-lengths", "probe-lex"],
}
STAGES = tuple(_STAGE_SECTIONS)


def _closure(stage: str) -> list[str]:
    seen: list[str] = []

    def walk(s: str):
        for up in _UPSTREAM[s]:
            walk(up)
        if s not in seen:
            seen.append(s)

    walk(stage)
    return seen


def _section(raw: dict, dotted: str) -> Any:
    cur: Any = raw
    for part in dotted.split("."):
        cur = cur.get(part) if isinstance(cur, dict) else None
    return cur


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class LoadedConfig:
    """A validated RunConfig plus the canonical form used for hashing."""

    def __init__(self, config: RunConfig, base_dir: Path, file_digests: dict[str, str] | None = None):
        self.config = config
        self.base_dir = base_dir
        self.file_digests = file_digests or {}
        # paths are machine-specific; hash the normalized config without them
        raw = config.model_dump(mode="json", exclude={"cache_dir", "out_dir"})
        raw["region_table"] = self.file_digests.get("region_table", "builtin")
        if raw["probes"].get("corrections"):
            raw["probes"]["corrections"] = self.file_digests.get("corrections")
        for ep in raw["endpoints"]["generation"]:
            ep["base_url"] = self._hashable_url(ep["base_url"])
        for role in ("extractor", "judge"):
            if raw["endpoints"].get(role):
                raw["endpoints"][role]["base_url"] = self._hashable_url(raw["endpoints"][role]["base_url"])
        self._hashable = raw

    def _hashable_url(self, url: str) -> str:
        # mock stores are identified by content, not location
        if url.startswith("mock://store"):
            return "mock://store#" + self.file_digests.get(url, "")
        return url

    @property
    def config_hash(self) -> str:
        return _digest(self._hashable)

    def stage_hash(self, stage: str) -> str:
        parts = {}
        for s in _closure(stage):
            for sec in _STAGE_SECTIONS[s]:
                parts[sec] = _section(self._hashable, sec)
        return _digest(parts)

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(os.path.expanduser(value))
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def out_dir(self) -> Path:
        return self.path(self.config.out_dir)

    @property
    def cache_dir(self) -> Path:
        return self.path(self.config.cache_dir)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_mock_url(url: str, base: Path, digests: dict[str, str]) -> str:
    from urllib.parse import parse_qs, urlencode, urlsplit, urlunsplit

    parts = urlsplit(url)
    if parts.scheme != "mock" or parts.netloc != "store":
        return url
    path = parse_qs(parts.query).get("path", [""])[0]
    if not path:
        raise ConfigError(f"mock store URL needs ?path=FILE: {url}")
    p = Path(path) if Path(path).is_absolute() else base / path
    if not p.is_file():
        raise ConfigError(f"mock store file not found: {p}")
    resolved = urlunsplit(parts._replace(query=urlencode({"path": str(p)})))
    digests[url] = digests[resolved] = _file_digest(p)
    return resolved


def load_config(path: str | os.PathLike, overrides: dict[str, Any] | None = None) -> LoadedConfig:
    """Load, apply CLI overrides (``seed``, ``out_dir``), validate, and hash."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        raw.setdefault("plan", {})["seed"] = overrides["seed"]
    if overrides.get("out_dir") is not None:
        raw["out_dir"] = str(Path(overrides["out_dir"]).resolve())
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc

    base = path.resolve().parent
    digests: dict[str, str] = {}
    for label, value in (("region_table", config.region_table), ("corrections", config.probes.corrections)):
        if value:
            p = Path(value) if Path(value).is_absolute() else base / value
            if not p.is_file():
                raise ConfigError(f"{label} file not found: {p}")
            digests[label] = _file_digest(p)
    for ep in config.endpoints.generation:
        ep.base_url = _resolve_mock_url(ep.base_url, base, digests)
    for role in ("extractor", "judge"):
        ep = getattr(config.endpoints, role)
        if ep is not None:
            ep.base_url = _resolve_mock_url(ep.base_url, base, digests)
    return LoadedConfig(config, base, digests)

