"""Stage runners. Each stage reads upstream artifacts under the output
directory, writes its own artifact directory atomically, and records a
``run_manifest.json`` with config hashes and file checksums."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .config import ConfigError, LoadedConfig
from .evidence import DatasetError, EvidenceBundle, collect_bundle, read_dataset, write_dataset
from .factuality import (
    EntityResult,
    EvidenceConfig,
    aggregate,
    evaluate_generation,
    fmt_cell,
    report_csv,
    report_markdown,
)
from .http import HttpClient, NotFoundError, RateLimiter, ResponseCache, RetryPolicy, Transport
from .ingest import REGIONS, EntityRecord, Wikidata, ingest_class, load_region_table, qid_sort_key
from .llm import EndpointError, GenerationRecord, MockChat, SkipGeneration, generate_description
from .popularity import TIERS, PartitionError, TierAssignment, correlation_matrix, partition_tiers
from .probes import (
    aggregate_errors,
    build_check,
    checks_csv,
    curves_csv,
    fits_csv,
    lex_tokens,
    plot_curves,
    vocab_growth,
)
from .sampler import Candidate, SampleSet, annotate_ambiguity, filter_eligible, sample
from .wikistats import PopularityProfile, Wikipedia, collect_profiles

logger = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"
SIGNALS = ("pageviews", "inlinks", "edits", "page_length_chars")


class DependencyError(Exception):
    pass


@dataclass
class RunOptions:
    replay: bool = False
    force: bool = False
    classes: list[str] | None = None
    languages: list[str] | None = None
    evidence: list[str] | None = None
    # injected transport for the Wikimedia/chat HTTP calls (tests use a fake)
    transport: Transport | None = None


# --- small io helpers ------------------------------------------------------

def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_json(path: Path, obj: Any) -> None:
    write_text(path, json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n")


def write_jsonl(path: Path, rows: Iterable[Any]) -> None:
    write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksums(root: Path, exclude: Iterable[str] = (MANIFEST,)) -> dict[str, str]:
    exclude = set(exclude)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[p.relative_to(root).as_posix()] = sha256_file(p)
    return out


def _csv(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _md_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# --- context ---------------------------------------------------------------

class Context:
    def __init__(self, loaded: LoadedConfig, options: RunOptions | None = None):
        self.loaded = loaded
        self.cfg = loaded.config
        self.opts = options or RunOptions()
        self.out = loaded.out_dir
        self._http: HttpClient | None = None

    @property
    def http(self) -> HttpClient:
        if self._http is None:
            h = self.cfg.http
            snapshot_ts = f"{self.cfg.snapshot}T00:00:00Z"
            kwargs: dict[str, Any] = {}
            if h.user_agent:
                kwargs["user_agent"] = h.user_agent
            self._http = HttpClient(
                cache=ResponseCache(self.loaded.cache_dir),
                replay=self.opts.replay,
                transport=self.opts.transport,
                handlers={"mock": MockChat()},
                retry=RetryPolicy(max_attempts=h.max_attempts, backoff=h.backoff),
                rate_limiter=RateLimiter(h.min_interval),
                local_clock=lambda: snapshot_ts,
                timeout=h.timeout,
                **kwargs,
            )
        return self._http

    def classes(self) -> list[str]:
        names = [c.name for c in self.cfg.classes]
        if self.opts.classes:
            unknown = [c for c in self.opts.classes if c not in names]
            if unknown:
                raise ConfigError(f"unknown class(es) {unknown}; configured: {names}")
            return [c for c in names if c in self.opts.classes]
        return names

    def languages(self) -> list[str]:
        if self.opts.languages:
            unknown = [l for l in self.opts.languages if l not in self.cfg.languages]
            if unknown:
                raise ConfigError(f"language(s) {unknown} not in config languages {self.cfg.languages}")
            return [l for l in self.cfg.languages if l in self.opts.languages]
        return list(self.cfg.languages)

    def evidence_configs(self) -> list[EvidenceConfig]:
        configured = list(self.cfg.evaluation.evidence_configs)
        if self.opts.evidence:
            return [EvidenceConfig(e) for e in self.opts.evidence]
        return configured

    def wiki(self, lang: str) -> Wikipedia:
        wp = self.cfg.wikipedia
        return Wikipedia(self.http, lang, wp.api_url.format(lang=lang), wp.pageviews_url)

    def wikidata(self) -> Wikidata:
        wd = self.cfg.wikidata
        return Wikidata(self.http, wd.api_url, wd.sparql_url)

    # dependency handling

    def require(self, stage: str, rel: str) -> dict:
        """Load the manifest of an upstream artifact, checking its config hash."""
        path = self.out / rel / MANIFEST
        if not path.is_file():
            raise DependencyError(f"missing {rel}/: run `{stage}` first")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        expected = self.loaded.stage_hash(stage)
        if manifest.get("stage_hash") != expected:
            msg = (f"{rel}/ was produced with a different configuration "
                   f"({manifest.get('stage_hash', '?')[:12]} != {expected[:12]}); re-run `{stage}`")
            if not self.opts.force:
                raise DependencyError(msg + " or pass --force to mix artifacts")
            logger.warning("%s (continuing because of --force)", msg)
        return manifest


class StageWriter:
    """Collects a stage's outputs in a temporary directory, then swaps it into place."""

    def __init__(self, ctx: Context, stage: str, rel: str):
        self.ctx = ctx
        self.stage = stage
        self.rel = rel
        self.final = ctx.out / rel
        self.dir = self.final.parent / f".{self.final.name}.tmp-{os.getpid()}"
        self.inputs: dict[str, str] = {}
        self.warnings: list[str] = []
        self.extra: dict[str, Any] = {}
        self._t0 = time.monotonic()

    def __enter__(self) -> "StageWriter":
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        return self

    def use(self, rel_path: str) -> Path:
        """Register an upstream file (relative to the output root) as an input."""
        path = self.ctx.out / rel_path
        if path.is_dir():
            for name, digest in tree_checksums(path, exclude=()).items():
                self.inputs[f"{rel_path}/{name}"] = digest
        else:
            self.inputs[rel_path] = sha256_file(path)
        return path

    def warn(self, msg: str) -> None:
        logger.warning(msg)
        self.warnings.append(msg)

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        cfg = self.ctx.cfg
        manifest = {
            "stage": self.stage,
            "artifact": self.rel,
            "tool_version": __version__,
            "config_hash": self.ctx.loaded.config_hash,
            "stage_hash": self.ctx.loaded.stage_hash(self.stage),
            "seed": cfg.plan.seed,
            "snapshot": cfg.snapshot,
            "filters": {"classes": self.ctx.opts.classes, "languages": self.ctx.opts.languages,
                        "evidence": self.ctx.opts.evidence},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": tree_checksums(self.dir),
            # replays must reproduce byte-identical trees, so no clock readings there
            "wall_time_s": None if self.ctx.opts.replay else round(time.monotonic() - self._t0, 3),
            "warnings": self.warnings,
            **self.extra,
        }
        write_json(self.dir / MANIFEST, manifest)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        if self.final.exists():
            old = self.final.parent / f".{self.final.name}.old-{os.getpid()}"
            os.replace(self.final, old)
            os.replace(self.dir, self.final)
            shutil.rmtree(old)
        else:
            os.replace(self.dir, self.final)
        logger.info("wrote %s", self.final)
        return False


def _pool_map(ctx: Context, fn: Callable, items: Sequence) -> list:
    # order-stable: results come back in input order
    with ThreadPoolExecutor(max_workers=ctx.cfg.http.max_workers) as pool:
        return list(pool.map(fn, items))


# --- loaders ---------------------------------------------------------------

def load_records(ctx: Context, cls: str) -> list[EntityRecord]:
    return [EntityRecord.from_json(r) for r in read_jsonl(ctx.out / "ingest" / cls / "records.jsonl")]


def load_profiles(ctx: Context, cls: str) -> list[PopularityProfile]:
    return [PopularityProfile.from_json(r) for r in read_jsonl(ctx.out / "stats" / cls / "profiles.jsonl")]


def load_tiers(ctx: Context, cls: str) -> TierAssignment:
    base = ctx.out / "tier" / cls
    return TierAssignment.from_csv((base / "tiers.csv").read_text(encoding="utf-8"),
                                   json.loads((base / "boundaries.json").read_text(encoding="utf-8")))


def load_sample(ctx: Context, cls: str) -> SampleSet:
    return SampleSet.from_json(json.loads((ctx.out / "sample" / cls / "sample.json").read_text(encoding="utf-8")))


def load_generations(ctx: Context, model: str) -> list[GenerationRecord]:
    return [GenerationRecord(**r) for r in read_jsonl(ctx.out / "generations" / model / "generations.jsonl")]


def _models(ctx: Context) -> list[str]:
    return [e.name for e in ctx.cfg.endpoints.generation]


# --- stages ----------------------------------------------------------------

def run_ingest(ctx: Context) -> None:
    region_table = load_region_table(str(ctx.loaded.path(ctx.cfg.region_table)) if ctx.cfg.region_table else None)
    wikidata = ctx.wikidata()
    for name in ctx.classes():
        spec = ctx.cfg.class_config(name).spec(ctx.cfg.languages)
        with StageWriter(ctx, "ingest", f"ingest/{name}") as w:
            records, manifest, rows = ingest_class(
                spec, wikidata, snapshot=ctx.cfg.snapshot, region_table=region_table,
                page_size=ctx.cfg.wikidata.page_size, max_workers=ctx.cfg.http.max_workers,
            )
            write_jsonl(w.dir / "records.jsonl", [r.to_json() for r in records])
            write_jsonl(w.dir / "rows.jsonl", rows)
            write_json(w.dir / "ingest.json", manifest.to_json())
            for r in records:
                if r.wiki_titles and r.region == "Unknown":
                    w.warnings.append(f"{r.qid}: region unknown")
            w.extra["counts"] = manifest.counts


def run_stats(ctx: Context) -> None:
    window = ctx.cfg.window.window()
    wikis = {lang: ctx.wiki(lang) for lang in ctx.languages()}
    for name in ctx.classes():
        ctx.require("ingest", f"ingest/{name}")
        with StageWriter(ctx, "stats", f"stats/{name}") as w:
            w.use(f"ingest/{name}/records.jsonl")
            records = [r for r in load_records(ctx, name) if r.wiki_titles]
            profiles, warnings = collect_profiles(records, wikis, window, ctx.cfg.http.max_workers)
            for msg in warnings:
                w.warnings.append(msg)
            write_jsonl(w.dir / "profiles.jsonl", [p.to_json() for p in profiles])


def run_tier(ctx: Context) -> None:
    metric = ctx.cfg.popularity_metric
    for name in ctx.classes():
        ctx.require("stats", f"stats/{name}")
        with StageWriter(ctx, "tier", f"tier/{name}") as w:
            w.use(f"stats/{name}/profiles.jsonl")
            profiles = load_profiles(ctx, name)
            values = [(p.qid, p.metric(metric)) for p in profiles]
            usable = [(q, float(v)) for q, v in values if v is not None]
            if len(usable) < len(values):
                w.warn(f"{name}: {len(values) - len(usable)} entities lack {metric} and are not tiered")
            try:
                tiers = partition_tiers(usable, metric)
            except PartitionError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
            write_text(w.dir / "tiers.csv", tiers.to_csv())
            write_json(w.dir / "boundaries.json", tiers.boundaries())

            columns: dict[str, dict[str, float]] = {}
            for lang in ctx.cfg.languages:
                for sig in SIGNALS:
                    col = {p.qid: float(getattr(p.languages[lang], sig)) for p in profiles if lang in p.languages}
                    if col:
                        columns[f"{lang}_{sig}"] = col
            columns["triples"] = {p.qid: float(p.triple_count) for p in profiles}
            report = correlation_matrix(name, columns, ctx.cfg.correlation_method)
            write_text(w.dir / "correlations.csv", report.to_csv())
            w.extra["boundaries"] = tiers.boundaries()


def _candidates(records: list[EntityRecord], profiles: list[PopularityProfile]) -> list[Candidate]:
    by_qid = {p.qid: p for p in profiles}
    out = []
    for r in records:
        p = by_qid.get(r.qid)
        langs = p.languages if p else {}
        out.append(Candidate(r.qid, r.region, dict(r.wiki_titles), dict(r.labels),
                             {l: s.page_length_chars for l, s in langs.items()},
                             {l: s.is_stub for l, s in langs.items()}))
    return out


def run_sample(ctx: Context) -> None:
    plan = ctx.cfg.plan.plan()
    for name in ctx.classes():
        ctx.require("tier", f"tier/{name}")
        with StageWriter(ctx, "sample", f"sample/{name}") as w:
            for rel in (f"ingest/{name}/records.jsonl", f"stats/{name}/profiles.jsonl",
                        f"tier/{name}/tiers.csv", f"tier/{name}/boundaries.json"):
                w.use(rel)
            tiers = load_tiers(ctx, name)
            pool = _candidates(load_records(ctx, name), load_profiles(ctx, name))
            tiered = [c for c in pool if c.qid in tiers.tiers]
            eligible = filter_eligible(tiered, plan)
            result = annotate_ambiguity(sample(eligible, tiers.tiers, plan, name), tiered)
            for msg in result.warnings:
                w.warnings.append(msg)
            counts = {
                "base": {t: sum(1 for c in tiered if tiers.tiers[c.qid] == t) for t in TIERS},
                "eligible": {t: sum(1 for c in eligible if tiers.tiers[c.qid] == t) for t in TIERS},
                "sample": result.counts(ctx.cfg.languages),
            }
            write_json(w.dir / "sample.json", result.to_json())
            write_jsonl(w.dir / "sample.jsonl", [asdict(m) for m in result.members])
            write_json(w.dir / "counts.json", counts)


def run_evidence(ctx: Context) -> None:
    languages = ctx.languages()
    samples = []
    with StageWriter(ctx, "evidence", "evidence") as w:
        for name in ctx.classes():
            ctx.require("sample", f"sample/{name}")
            w.use(f"sample/{name}/sample.json")
            samples.append(load_sample(ctx, name))
        wikis = {lang: ctx.wiki(lang) for lang in languages}
        jobs = [(m, lang) for s in samples for m in s.members for lang in languages if lang in m.titles]

        def one(job) -> tuple[tuple[str, str], EvidenceBundle | None, str | None]:
            member, lang = job
            try:
                bundle = collect_bundle(member, lang, wikis[lang], collected_at=ctx.cfg.snapshot,
                                        inlink_cap=ctx.cfg.evidence.inlink_cap,
                                        min_chars=ctx.cfg.evidence.paragraph_min_chars)
            except NotFoundError as exc:
                return (member.qid, lang), None, f"{member.qid}/{lang}: entity page unavailable: {exc}"
            return (member.qid, lang), bundle, None

        bundles = {}
        for key, bundle, err in _pool_map(ctx, one, jobs):
            if err:
                w.warn(err)
            else:
                bundles[key] = bundle
                for flag in bundle.flags:
                    w.warnings.append(f"{key[0]}/{key[1]}: {flag}")
        write_dataset(samples, bundles, w.dir / "dataset", min_chars=ctx.cfg.evidence.paragraph_min_chars,
                      languages=ctx.cfg.languages)


def run_generate(ctx: Context) -> None:
    endpoints = ctx.cfg.endpoints.generation
    if not endpoints:
        raise ConfigError("no generation endpoints configured (endpoints.generation)")
    languages = ctx.languages()
    samples = []
    for name in ctx.classes():
        ctx.require("sample", f"sample/{name}")
        samples.append(load_sample(ctx, name))
    for ep in endpoints:
        with StageWriter(ctx, "generate", f"generations/{ep.name}") as w:
            for s in samples:
                w.use(f"sample/{s.class_name}/sample.json")
            jobs = [(s.class_name, m, lang) for s in samples for m in s.members for lang in languages
                    if lang in m.titles]

            def one(job):
                cls, member, lang = job
                prompts = ctx.cfg.class_config(cls).prompts
                try:
                    return generate_description(member, lang, ep, ctx.http, prompts), None
                except (EndpointError, SkipGeneration) as exc:
                    return None, f"{member.qid}/{lang}: {exc}"

            records = []
            for rec, err in _pool_map(ctx, one, jobs):
                if err:
                    w.warn(err)
                else:
                    records.append(rec.to_json())
            write_jsonl(w.dir / "generations.jsonl", records)
            w.extra["endpoint"] = {"name": ep.name, "model": ep.model, "temperature": ep.temperature,
                                   "max_tokens": ep.max_tokens}
            w.extra["prompts"] = {c: ctx.cfg.class_config(c).prompts for c in ctx.classes()}


def _bundles(ctx: Context) -> dict[tuple[str, str], EvidenceBundle]:
    try:
        return read_dataset(ctx.out / "evidence" / "dataset")[1]
    except DatasetError as exc:
        raise DependencyError(f"{exc}; re-run `evidence`") from exc


RESULT_FIELDS = [f for f in EntityResult.__dataclass_fields__]


def run_evaluate(ctx: Context) -> None:
    eps = ctx.cfg.endpoints
    if eps.extractor is None or eps.judge is None:
        raise ConfigError("evaluation needs endpoints.extractor and endpoints.judge")
    ev = ctx.cfg.evaluation
    configs = ctx.evidence_configs()
    ctx.require("evidence", "evidence")
    bundles = _bundles(ctx)
    languages = set(ctx.languages())
    classes = set(ctx.classes())
    for model in _models(ctx):
        ctx.require("generate", f"generations/{model}")
        with StageWriter(ctx, "evaluate", f"eval/{model}") as w:
            w.use(f"generations/{model}/generations.jsonl")
            w.use("evidence/dataset")
            gens = [g for g in load_generations(ctx, model) if g.language in languages and g.class_name in classes]

            def one(gen: GenerationRecord):
                bundle = bundles.get((gen.qid, gen.language))
                if bundle is None:
                    return gen, None
                return gen, evaluate_generation(
                    gen, bundle, configs, eps.extractor, eps.judge, ctx.http, k=ev.top_k,
                    extraction_template=ev.extraction_prompt, verification_template=ev.verification_prompt,
                    bm25_k1=ev.bm25_k1, bm25_b=ev.bm25_b,
                )

            facts, verdicts, results = [], [], []
            for gen, evaluation in _pool_map(ctx, one, gens):
                if evaluation is None:
                    w.warn(f"{gen.qid}/{gen.language}: no evidence bundle; not evaluated")
                    continue
                for flag in evaluation.flags:
                    w.warn(flag)
                facts += [{**asdict(f), "model": model} for f in evaluation.facts]
                verdicts += [{**v.to_json(), "model": model} for v in evaluation.verdicts]
                results += evaluation.results
            write_jsonl(w.dir / "facts.jsonl", facts)
            write_jsonl(w.dir / "verdicts.jsonl", verdicts)
            rows = [RESULT_FIELDS] + [[getattr(r, f) if f != "precision" else f"{r.precision:.6f}"
                                       for f in RESULT_FIELDS] for r in results]
            write_text(w.dir / "scores.csv", _csv(rows))
            write_text(w.dir / "report.csv", report_csv(results))
            write_text(w.dir / "report.md", report_markdown(
                results, ctx.classes(), [model], ctx.languages()))
            abstained = sum(r.abstained for r in results)
            total = sum(r.facts for r in results)
            w.extra["abstain_rate"] = abstained / total if total else None
            w.extra["ranker"] = {"name": "BM25", "k1": ev.bm25_k1, "b": ev.bm25_b, "top_k": ev.top_k}
            w.extra["prompts"] = {"extraction": ev.extraction_prompt, "verification": ev.verification_prompt}
            w.extra["judge"] = eps.judge.model_dump(exclude={"api_key_env"})
            w.extra["extractor"] = eps.extractor.model_dump(exclude={"api_key_env"})


def load_results(path: Path) -> list[EntityResult]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EntityResult(
                row["qid"], row["model"], row["language"], row["domain"], row["tier"], row["region"],
                row["evidence"], float(row["precision"]), int(row["facts"]), int(row["supported"]),
                int(row["abstained"]),
            ))
    return out


def _length_class(ctx: Context) -> str:
    probes = ctx.cfg.probes
    if probes.length_class:
        return probes.length_class
    for c in ctx.cfg.classes:
        if probes.length_prop in c.attribute_props:
            return c.name
    raise ConfigError(f"no class ingests {probes.length_prop}; set probes.length_class")


def load_corrections(path: Path | None) -> dict[str, float]:
    """CSV with columns ``qid,length_km`` overriding known-bad reference values."""
    if path is None:
        return {}
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["qid"]: float(row["length_km"]) for row in csv.DictReader(fh)}


def run_probe_lengths(ctx: Context) -> None:
    probes = ctx.cfg.probes
    cls = _length_class(ctx)
    lang = probes.length_language
    ctx.require("ingest", f"ingest/{cls}")
    ctx.require("evidence", "evidence")
    truth = {}
    for r in load_records(ctx, cls):
        attr = r.attributes.get(probes.length_prop)
        if attr is not None and attr.unit == "km" and isinstance(attr.value, (int, float)):
            truth[r.qid] = float(attr.value)
    corrections = load_corrections(ctx.loaded.path(probes.corrections))
    bundles = _bundles(ctx)
    for model in _models(ctx):
        ctx.require("generate", f"generations/{model}")
        with StageWriter(ctx, "probe-lengths", f"probes/lengths/{model}") as w:
            w.use(f"ingest/{cls}/records.jsonl")
            w.use(f"generations/{model}/generations.jsonl")
            checks, skipped = [], 0
            for g in load_generations(ctx, model):
                if g.class_name != cls or g.language != lang:
                    continue
                bundle = bundles.get((g.qid, lang))
                check = build_check(
                    g.qid, g.response, truth.get(g.qid), tier=g.tier, model=model,
                    source_text=bundle.entity_page.plaintext if bundle else None, corrections=corrections,
                )
                if check is None:
                    skipped += 1
                    continue
                if check.disagreement:
                    w.warnings.append(f"{g.qid}: reference sources disagree "
                                      f"(Wikidata {check.true_km:g} km, page {check.source_km} km)")
                checks.append(check)
            write_text(w.dir / "river_lengths.csv", checks_csv(checks))
            rows = []
            for tier in TIERS:
                s = aggregate_errors(c for c in checks if c.tier == tier)
                if s is not None:
                    rows.append([model, tier, s.count, f"{s.rmse_km:.4f}", f"{s.mape_pct:.4f}"])
            write_text(w.dir / "summary.csv", _csv([["model", "tier", "count", "rmse_km", "mape_pct"], *rows]))
            w.extra["excluded"] = skipped
            w.extra["class"] = cls


def run_probe_lex(ctx: Context) -> None:
    stride = ctx.cfg.probes.heaps_stride
    classes = ctx.classes()
    languages = ctx.languages()
    for model in _models(ctx):
        ctx.require("generate", f"generations/{model}")
        with StageWriter(ctx, "probe-lex", f"probes/lex/{model}") as w:
            w.use(f"generations/{model}/generations.jsonl")
            gens = load_generations(ctx, model)
            curves = []
            for cls in classes:
                order = {m.qid: i for i, m in enumerate(load_sample(ctx, cls).members)} \
                    if (ctx.out / "sample" / cls / "sample.json").is_file() else {}
                for tier in TIERS:
                    tier_curves = []
                    for lang in languages:
                        sel = sorted((g for g in gens if g.class_name == cls and g.tier == tier and g.language == lang),
                                     key=lambda g: (order.get(g.qid, len(order)), qid_sort_key(g.qid)))
                        if not sel:
                            continue
                        tokens = [t for g in sel for t in lex_tokens(g.response, lang)]
                        curve = vocab_growth(tokens, stride, label=f"{cls}/{tier}/{lang}")
                        if curve.beta is None:
                            w.warnings.append(f"{curve.label}: fewer than 10 checkpoints, no fit")
                        tier_curves.append(curve)
                    if tier_curves:
                        plot_curves(tier_curves, w.dir / f"{cls}-{tier}.svg", f"{model}: {cls} / {tier}")
                        curves += tier_curves
            write_text(w.dir / "curves.csv", curves_csv(curves))
            write_text(w.dir / "fits.csv", fits_csv(curves))
            w.extra["stride"] = stride


def _manifest_digest(ctx: Context, rel: str) -> str | None:
    p = ctx.out / rel / MANIFEST
    return sha256_file(p) if p.is_file() else None


def run_report(ctx: Context) -> None:
    classes = ctx.classes()
    languages = ctx.languages()
    for name in classes:
        ctx.require("sample", f"sample/{name}")
    with StageWriter(ctx, "report", "report") as w:
        sources: dict[str, str] = {}

        def source(rel: str) -> str | None:
            d = _manifest_digest(ctx, rel)
            if d:
                sources[f"{rel}/{MANIFEST}"] = d
            return d

        # dataset composition
        rows = []
        for name in classes:
            digest = source(f"sample/{name}")
            counts = json.loads((ctx.out / "sample" / name / "counts.json").read_text(encoding="utf-8"))
            for label, block in [("sample", counts["sample"])] + [
                    (f"with_{l}_page", counts["sample"][f"with_{l}_page"]) for l in ctx.cfg.languages]:
                rows.append([name, label, *[block["tier"][t] for t in TIERS],
                             *[block["region"][r] for r in REGIONS], block["total"], digest])
            rows.append([name, "base_class", *[counts["base"][t] for t in TIERS], *[""] * len(REGIONS),
                         sum(counts["base"].values()), digest])
        header = ["class", "subset", *TIERS, *REGIONS, "total", "source_manifest"]
        write_text(w.dir / "dataset_stats.csv", _csv([header, *rows]))
        write_text(w.dir / "dataset_stats.md", _md_table(header[:-1], [r[:-1] for r in rows]))

        # correlations
        for name in classes:
            p = ctx.out / "tier" / name / "correlations.csv"
            if p.is_file():
                source(f"tier/{name}")
                write_text(w.dir / "correlations" / f"{name}.csv", p.read_text(encoding="utf-8"))

        # factuality
        results: list[EntityResult] = []
        digests = {}
        models = []
        for model in _models(ctx):
            p = ctx.out / "eval" / model / "scores.csv"
            if not p.is_file():
                w.warn(f"no evaluation for {model}; run `evaluate` to include it")
                continue
            digests[model] = source(f"eval/{model}")
            models.append(model)
            results += [r for r in load_results(p) if r.domain in classes and r.language in languages]
        evidence = {e.value for e in ctx.evidence_configs()}
        results = [r for r in results if r.evidence in evidence]
        fact_rows = []
        for g in aggregate(results):
            fact_rows.append([*g.key.values(), g.entities, g.facts, g.supported, g.abstained,
                              f"{g.macro:.6f}", "" if g.micro is None else f"{g.micro:.6f}",
                              digests[g.key["model"]]])
        write_text(w.dir / "report.csv", _csv([
            ["model", "language", "domain", "tier", "region", "evidence", "entities", "facts", "supported",
             "abstained", "macro_precision", "micro_precision", "source_manifest"], *fact_rows]))
        md = report_markdown(results, classes, models, languages)
        md += "\nSources: " + ", ".join(f"{m} eval manifest {d[:12]}" for m, d in digests.items()) + "\n" \
            if digests else "\nNo evaluation results.\n"
        write_text(w.dir / "report.md", md)

        # generation statistics
        gen_rows = []
        for model in models + [m for m in _models(ctx) if m not in models]:
            gp = ctx.out / "generations" / model / "generations.jsonl"
            if not gp.is_file():
                continue
            digest = source(f"generations/{model}")
            gens = load_generations(ctx, model)
            fp = ctx.out / "eval" / model / "facts.jsonl"
            fact_counts: dict[tuple[str, str], int] = {}
            if fp.is_file():
                for f in read_jsonl(fp):
                    fact_counts[(f["qid"], f["language"])] = fact_counts.get((f["qid"], f["language"]), 0) + 1
            for cls in classes:
                for lang in languages:
                    for tier in TIERS:
                        sel = [g for g in gens if g.class_name == cls and g.language == lang and g.tier == tier]
                        if not sel:
                            continue
                        sents = sum(g.sentence_count for g in sel) / len(sel)
                        facts = (sum(fact_counts.get((g.qid, lang), 0) for g in sel) / len(sel)) if fp.is_file() else None
                        gen_rows.append([model, lang, cls, tier, len(sel), f"{sents:.2f}", fmt_cell(facts), digest])
        gheader = ["model", "language", "domain", "tier", "generations", "avg_sentences", "avg_facts",
                   "source_manifest"]
        write_text(w.dir / "generation_stats.csv", _csv([gheader, *gen_rows]))
        write_text(w.dir / "generation_stats.md", _md_table(gheader[:-1], [r[:-1] for r in gen_rows]))

        # river lengths
        len_rows = []
        for model in _models(ctx):
            sp = ctx.out / "probes" / "lengths" / model / "summary.csv"
            if not sp.is_file():
                continue
            digest = source(f"probes/lengths/{model}")
            with open(sp, encoding="utf-8", newline="") as fh:
                for row in csv.DictReader(fh):
                    len_rows.append([row["model"], row["tier"], row["count"], row["rmse_km"], row["mape_pct"], digest])
        lheader = ["model", "tier", "count", "rmse_km", "mape_pct", "source_manifest"]
        write_text(w.dir / "length_errors.csv", _csv([lheader, *len_rows]))
        write_text(w.dir / "length_errors.md", _md_table(["model", "tier", "#", "RMSE (km)", "MAPE (%)"],
                                                  [r[:-1] for r in len_rows]))
        for model in _models(ctx):
            if (ctx.out / "probes" / "lex" / model / MANIFEST).is_file():
                source(f"probes/lex/{model}")
        write_json(w.dir / "sources.json", dict(sorted(sources.items())))


STAGE_RUNNERS: dict[str, Callable[[Context], None]] = {
    "ingest": run_ingest,
    "stats": run_stats,
    "tier": run_tier,
    "sample": run_sample,
    "evidence": run_evidence,
    "generate": run_generate,
    "evaluate": run_evaluate,
    "probe-lengths": run_probe_lengths,
    "probe-lex": run_probe_lex,
    "report": run_report,
}


def run_stage(ctx: Context, stage: str) -> None:
    if stage not in STAGE_RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    logger.info("stage %s", stage)
    STAGE_RUNNERS[stage](ctx)
