"""Extract the instances of a Wikidata class and enrich them with labels,
sitelinks, locations, attributes and triple counts."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from string import Template
from typing import Any, Iterable, Iterator

from .http import HttpClient, NotFoundError, RequestTimeout

logger = logging.getLogger(__name__)

WIKIDATA_SPARQL = "https://query.wikidata.org/sparql"
WIKIDATA_API = "https://www.wikidata.org/w/api.php"
ENTITY_PREFIX = "http://www.wikidata.org/entity/"

REGIONS = ("Africa", "Americas", "AAO", "Europe", "Unknown")

QID_RE = re.compile(r"^Q[1-9][0-9]*$")
PID_RE = re.compile(r"^P[1-9][0-9]*$")

# unit QID -> (factor to the normalized unit, normalized unit)
UNIT_TABLE: dict[str, tuple[float, str]] = {
    "Q828224": (1.0, "km"),          # kilometre
    "Q11573": (0.001, "km"),         # metre
    "Q174728": (1e-5, "km"),         # centimetre
    "Q174789": (1e-6, "km"),         # millimetre
    "Q253276": (1.609344, "km"),     # mile
    "Q3710": (0.0003048, "km"),      # foot
    "Q482798": (0.0009144, "km"),    # yard
    "Q93318": (1.852, "km"),         # nautical mile
    "Q712226": (1.0, "km2"),         # square kilometre
    "Q25343": (1e-6, "km2"),         # square metre
    "Q11570": (1.0, "kg"),           # kilogram
}

DEFAULT_TEMPLATE = """SELECT ?item $select WHERE {
  ?item $membership wd:$class_qid .
$optionals
}
ORDER BY ?item
LIMIT $limit
OFFSET $offset"""


class ValidationError(ValueError):
    pass


@dataclass
class ClassSpec:
    class_qid: str
    name: str
    languages: list[str] = field(default_factory=lambda: ["en"])
    attribute_props: list[str] = field(default_factory=list)
    location_props: list[str] = field(default_factory=lambda: ["P17"])
    # follow this property first and read locations off its target (cars: P176 manufacturer)
    via_prop: str | None = None
    membership: str = "wdt:P31"
    sparql_template: str = DEFAULT_TEMPLATE

    def validate(self) -> None:
        if not isinstance(self.class_qid, str) or not QID_RE.match(self.class_qid):
            raise ValidationError(f"class_qid must look like Q123, got {self.class_qid!r}")
        if not self.languages:
            raise ValidationError("languages must be non-empty")
        for pid in [*self.attribute_props, *self.location_props, *([self.via_prop] if self.via_prop else [])]:
            if not PID_RE.match(pid):
                raise ValidationError(f"bad property id {pid!r}")


@dataclass
class AttributeValue:
    value: float | str
    unit: str | None = None
    raw: str | None = None


@dataclass
class EntityRecord:
    qid: str
    labels: dict[str, str] = field(default_factory=dict)
    wiki_titles: dict[str, str] = field(default_factory=dict)
    location_qids: list[str] = field(default_factory=list)
    region: str = "Unknown"
    attributes: dict[str, AttributeValue] = field(default_factory=dict)
    triple_count: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EntityRecord":
        d = dict(d)
        d["attributes"] = {k: AttributeValue(**v) for k, v in d.get("attributes", {}).items()}
        return cls(**d)


@dataclass
class IngestManifest:
    class_name: str
    snapshot: str
    endpoints: dict[str, str]
    counts: dict[str, Any]
    raw_checksum: str

    def to_json(self) -> dict:
        return asdict(self)


def qid_sort_key(qid: str) -> tuple[int, str]:
    return (int(qid[1:]), qid) if QID_RE.match(qid) else (1 << 62, qid)


def _var(lang: str) -> str:
    return re.sub(r"[^A-Za-z0-9]", "_", lang)


def build_query(spec: ClassSpec) -> str:
    """Render the class query; ``$limit`` and ``$offset`` stay as placeholders."""
    spec.validate()
    select = " ".join(f"?label_{_var(l)} ?title_{_var(l)}" for l in spec.languages)
    optionals = "\n".join(
        f'  OPTIONAL {{ ?item rdfs:label ?label_{_var(l)} . FILTER(LANG(?label_{_var(l)}) = "{l}") }}\n'
        f"  OPTIONAL {{ ?sitelink_{_var(l)} schema:about ?item ; "
        f"schema:isPartOf <https://{l}.wikipedia.org/> ; schema:name ?title_{_var(l)} . }}"
        for l in spec.languages
    )
    return Template(spec.sparql_template).safe_substitute(
        select=select, optionals=optionals, membership=spec.membership, class_qid=spec.class_qid
    )


def page_query(query: str, limit: int, offset: int) -> str:
    return Template(query).safe_substitute(limit=limit, offset=offset)


def _binding_value(b: dict) -> str:
    v = b["value"]
    if b.get("type") == "uri" and v.startswith(ENTITY_PREFIX):
        return v[len(ENTITY_PREFIX):]
    return v


def load_region_table(path: str | None = None) -> dict[str, str]:
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = json.loads(resources.files("entityfact").joinpath("data/regions.json").read_text("utf-8"))
    table = data.get("regions", data)
    bad = {r for r in table.values() if r not in REGIONS[:-1]}
    if bad:
        raise ValidationError(f"unknown region names in region table: {sorted(bad)}")
    return dict(table)


def resolve_region(location_qids: Iterable[str], region_table: dict[str, str]) -> str:
    for qid in location_qids:
        region = region_table.get(qid)
        if region:
            return region
    return "Unknown"


def _ranked_statements(claims: dict, pid: str) -> list[dict]:
    stmts = [s for s in claims.get(pid, []) if s.get("rank") != "deprecated"]
    # preferred first; stable otherwise
    return sorted(stmts, key=lambda s: 0 if s.get("rank") == "preferred" else 1)


def _item_ids(claims: dict, pid: str) -> list[str]:
    out = []
    for s in _ranked_statements(claims, pid):
        dv = s.get("mainsnak", {}).get("datavalue")
        if dv and dv.get("type") == "wikibase-entityid":
            out.append(dv["value"].get("id") or f"Q{dv['value']['numeric-id']}")
    return out


def parse_datavalue(dv: dict) -> AttributeValue:
    kind = dv.get("type")
    val = dv.get("value")
    if kind == "quantity":
        amount = float(val["amount"])
        unit_uri = val.get("unit", "1")
        unit_qid = unit_uri.rsplit("/", 1)[-1] if unit_uri != "1" else None
        if unit_qid in UNIT_TABLE:
            factor, unit = UNIT_TABLE[unit_qid]
            return AttributeValue(amount * factor, unit, f"{val['amount']} {unit_qid}")
        return AttributeValue(amount, unit_qid, val["amount"])
    if kind == "wikibase-entityid":
        return AttributeValue(val.get("id") or f"Q{val['numeric-id']}")
    if kind == "time":
        return AttributeValue(val["time"], None, str(val.get("precision")))
    if kind == "monolingualtext":
        return AttributeValue(val["text"], None, val.get("language"))
    return AttributeValue(str(val))


def count_statements(entity: dict) -> int:
    return sum(len(v) for v in entity.get("claims", {}).values())


@dataclass
class Wikidata:
    http: HttpClient
    api_url: str = WIKIDATA_API
    sparql_url: str = WIKIDATA_SPARQL

    def run_sparql(self, query: str, page_size: int = 10_000) -> Iterator[dict[str, str]]:
        """Yield every result row, paging with LIMIT/OFFSET until a short page."""
        if page_size <= 0:
            raise ValueError("page_size must be positive")
        offset = 0
        while True:
            text = page_query(query, page_size, offset)
            try:
                resp = self.http.post(
                    self.sparql_url,
                    data={"query": text, "format": "json"},
                    headers={"Accept": "application/sparql-results+json"},
                )
            except RequestTimeout as exc:
                raise RequestTimeout(
                    f"SPARQL page at offset {offset} timed out; retry with a smaller page_size than {page_size}",
                    exc.attempts,
                ) from exc
            bindings = resp.json()["results"]["bindings"]
            for b in bindings:
                yield {k: _binding_value(v) for k, v in b.items()}
            if len(bindings) < page_size:
                return
            offset += page_size

    def get_entities(self, qids: list[str]) -> dict[str, dict]:
        if not qids:
            return {}
        resp = self.http.get(self.api_url, params={
            "action": "wbgetentities",
            "ids": "|".join(qids),
            "props": "labels|sitelinks|claims",
            "format": "json",
        })
        data = resp.json()
        if "error" in data:
            raise NotFoundError(f"wbgetentities error for {qids}: {data['error'].get('info')}")
        return data.get("entities", {})

    def get_entity(self, qid: str) -> dict:
        entity = self.get_entities([qid]).get(qid)
        if entity is None or "missing" in entity:
            raise NotFoundError(f"entity {qid} not found")
        return entity

    def count_incoming(self, qid: str) -> int:
        query = (
            "SELECT (COUNT(*) AS ?n) WHERE { ?s ?p wd:" + qid + " . "
            "?prop wikibase:directClaim ?p . }"
        )
        resp = self.http.post(self.sparql_url, data={"query": query, "format": "json"},
                              headers={"Accept": "application/sparql-results+json"})
        bindings = resp.json()["results"]["bindings"]
        return int(bindings[0]["n"]["value"]) if bindings else 0

    def count_triples(self, qid: str, entity: dict | None = None) -> int:
        """Statements with the entity as subject plus direct-claim triples pointing at it."""
        if entity is None:
            entity = self.get_entity(qid)
        return count_statements(entity) + self.count_incoming(qid)

    def enrich_entity(self, qid: str, spec: ClassSpec, region_table: dict[str, str] | None = None,
                      with_triples: bool = True) -> EntityRecord:
        entity = self.get_entity(qid)
        via = {}
        if spec.via_prop:
            targets = _item_ids(entity.get("claims", {}), spec.via_prop)
            via = {k: v for k, v in self.get_entities(targets).items() if "missing" not in v}
        record = record_from_entity(qid, entity, spec, via, region_table or {})
        if with_triples:
            record.triple_count = count_statements(entity) + self.count_incoming(qid)
        return record


def record_from_entity(qid: str, entity: dict, spec: ClassSpec, via_entities: dict[str, dict],
                       region_table: dict[str, str]) -> EntityRecord:
    labels = {l: entity["labels"][l]["value"] for l in spec.languages if l in entity.get("labels", {})}
    sitelinks = entity.get("sitelinks", {})
    titles = {l: sitelinks[f"{l}wiki"]["title"] for l in spec.languages
              if f"{l}wiki" in sitelinks and sitelinks[f"{l}wiki"].get("title")}
    claims = entity.get("claims", {})

    locations: list[str] = []
    if spec.via_prop:
        sources = [via_entities[t].get("claims", {}) for t in _item_ids(claims, spec.via_prop) if t in via_entities]
    else:
        sources = [claims]
    for src in sources:
        for pid in spec.location_props:
            for loc in _item_ids(src, pid):
                if loc not in locations:
                    locations.append(loc)

    attributes = {}
    for pid in spec.attribute_props:
        stmts = _ranked_statements(claims, pid)
        dvs = [s["mainsnak"]["datavalue"] for s in stmts if s.get("mainsnak", {}).get("datavalue")]
        if dvs:
            attributes[pid] = parse_datavalue(dvs[0])
    missing = [name for name, val in (("labels", labels), ("locations", locations)) if not val]
    if missing:
        logger.warning("entity %s: no %s", qid, ", ".join(missing))
    return EntityRecord(
        qid=qid,
        labels=labels,
        wiki_titles=titles,
        location_qids=locations,
        region=resolve_region(locations, region_table),
        attributes=attributes,
    )


def rows_to_records(rows: Iterable[dict[str, str]], spec: ClassSpec) -> dict[str, EntityRecord]:
    records: dict[str, EntityRecord] = {}
    for row in rows:
        qid = row.get("item", "")
        if not QID_RE.match(qid):
            continue
        rec = records.setdefault(qid, EntityRecord(qid=qid))
        for lang in spec.languages:
            label = row.get(f"label_{_var(lang)}")
            title = row.get(f"title_{_var(lang)}")
            if label and lang not in rec.labels:
                rec.labels[lang] = label
            if title and lang not in rec.wiki_titles:
                rec.wiki_titles[lang] = title
    return records


def funnel_counts(records: Iterable[EntityRecord], languages: list[str]) -> dict[str, Any]:
    records = list(records)
    return {
        "total": len(records),
        "with_label": {l: sum(1 for r in records if l in r.labels) for l in languages},
        "with_page": {l: sum(1 for r in records if l in r.labels and l in r.wiki_titles) for l in languages},
    }


def _chunks(seq: list, n: int) -> Iterator[list]:
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def ingest_class(
    spec: ClassSpec,
    wikidata: Wikidata,
    *,
    snapshot: str,
    region_table: dict[str, str],
    page_size: int = 10_000,
    max_workers: int = 4,
    enrich_all: bool = False,
) -> tuple[list[EntityRecord], IngestManifest, list[dict]]:
    """Run the class query, enrich entities, and return (records, manifest, raw rows).

    Only entities with a Wikipedia page in one of the class languages are enriched
    unless ``enrich_all``; the rest keep the query data (no locations, region Unknown).
    """
    query = build_query(spec)
    rows = list(wikidata.run_sparql(query, page_size))
    base = rows_to_records(rows, spec)
    qids = sorted(base, key=qid_sort_key)
    to_enrich = [q for q in qids if enrich_all or base[q].wiki_titles]

    def enrich_batch(batch: list[str]) -> list[EntityRecord]:
        entities = wikidata.get_entities(batch)
        via_ids: list[str] = []
        if spec.via_prop:
            for q in batch:
                for t in _item_ids(entities.get(q, {}).get("claims", {}), spec.via_prop):
                    if t not in via_ids:
                        via_ids.append(t)
        via = {}
        for chunk in _chunks(via_ids, 50):
            via.update({k: v for k, v in wikidata.get_entities(chunk).items() if "missing" not in v})
        out = []
        for q in batch:
            ent = entities.get(q)
            if ent is None or "missing" in ent:
                logger.warning("entity %s vanished between query and enrichment; keeping query data", q)
                out.append(base[q])
                continue
            rec = record_from_entity(q, ent, spec, via, region_table)
            # query-time labels/titles fill gaps left by the entity API
            for lang in spec.languages:
                if lang in base[q].labels:
                    rec.labels.setdefault(lang, base[q].labels[lang])
                if lang in base[q].wiki_titles:
                    rec.wiki_titles.setdefault(lang, base[q].wiki_titles[lang])
            rec.labels = {l: rec.labels[l] for l in spec.languages if l in rec.labels}
            rec.wiki_titles = {l: rec.wiki_titles[l] for l in spec.languages if l in rec.wiki_titles}
            rec.triple_count = count_statements(ent) + wikidata.count_incoming(q)
            out.append(rec)
        return out

    enriched: dict[str, EntityRecord] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        for batch_records in pool.map(enrich_batch, list(_chunks(to_enrich, 50))):
            for rec in batch_records:
                enriched[rec.qid] = rec
    records = [enriched.get(q, base[q]) for q in qids]

    raw_blob = "\n".join(json.dumps(r, sort_keys=True, ensure_ascii=False) for r in rows)
    manifest = IngestManifest(
        class_name=spec.name,
        snapshot=snapshot,
        endpoints={"sparql": wikidata.sparql_url, "api": wikidata.api_url},
        counts=funnel_counts(records, spec.languages),
        raw_checksum=hashlib.sha256(raw_blob.encode("utf-8")).hexdigest(),
    )
    return records, manifest, rows
