"""Chat-completion client, deterministic mock endpoints, description
generation, and sentence counting."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from urllib.parse import parse_qs, urlsplit, urlunsplit

from pydantic import BaseModel, ConfigDict, Field

from .http import HttpClient, HttpStatusError, NotFoundError, RetryPolicy, TransportError

logger = logging.getLogger(__name__)

DEFAULT_PROMPTS = {
    "en": "Tell me about {title}.",
    "zh": "请介绍一下{title}。",
}

ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "st", "mt", "ft", "jr", "sr", "vs", "no", "approx",
    "e.g", "i.e", "cf", "inc", "ltd", "co", "corp", "gen", "col", "lt", "sgt", "rev", "fig",
    "u.s", "u.k", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
}
_CJK_TERMINATORS = "。！？"
_TERMINATORS = ".!?" + _CJK_TERMINATORS
_CLOSERS = "\"')]}”’」』）"


class ChatEndpointConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "default"
    base_url: str
    model: str = "default"
    temperature: float = Field(0.0, ge=0)
    max_tokens: int = Field(1024, gt=0)
    timeout: float = Field(120.0, gt=0)
    max_attempts: int = Field(3, ge=1, le=10)
    backoff: float = Field(1.0, ge=0)
    api_key_env: str | None = None

    @property
    def retry(self) -> RetryPolicy:
        return RetryPolicy(max_attempts=self.max_attempts, backoff=self.backoff)


class EndpointError(Exception):
    pass


class ProtocolError(EndpointError):
    pass


class SkipGeneration(Exception):
    pass


def chat_body(messages: list[tuple[str, str]] | list[dict], cfg: ChatEndpointConfig) -> dict:
    msgs = [m if isinstance(m, dict) else {"role": m[0], "content": m[1]} for m in messages]
    return {"model": cfg.model, "messages": msgs, "temperature": cfg.temperature, "max_tokens": cfg.max_tokens}


def request_hash(body: dict) -> str:
    """SHA-256 of the canonicalized chat request; the mock store key."""
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def completions_url(base_url: str) -> str:
    parts = urlsplit(base_url)
    return urlunsplit(parts._replace(path=parts.path.rstrip("/") + "/chat/completions"))


def chat_full(messages, cfg: ChatEndpointConfig, http: HttpClient) -> tuple[str, str]:
    """Returns (content, fetched_at)."""
    body = chat_body(messages, cfg)
    secret = {}
    if cfg.api_key_env and os.environ.get(cfg.api_key_env):
        secret["Authorization"] = f"Bearer {os.environ[cfg.api_key_env]}"
    try:
        resp = http.post(completions_url(cfg.base_url), json_body=body, secret_headers=secret,
                         retry=cfg.retry, timeout=cfg.timeout)
    except HttpStatusError as exc:
        raise EndpointError(f"{cfg.name}: HTTP {exc.status}: {exc.body[:200]}") from exc
    except (TransportError, NotFoundError) as exc:
        raise EndpointError(f"{cfg.name}: {exc}") from exc
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"{cfg.name}: malformed completion response") from exc
    if not content or not content.strip():
        raise ProtocolError(f"{cfg.name}: empty completion")
    return content, resp.fetched_at


def chat(messages, cfg: ChatEndpointConfig, http: HttpClient) -> str:
    return chat_full(messages, cfg, http)[0]


# --- sentences -------------------------------------------------------------

def split_sentences(text: str, language: str = "en", guard_initials: bool = False) -> list[str]:
    """Split after . ! ? (followed by whitespace or end) and after 。！？.

    For English, a period after a known abbreviation does not end a sentence;
    with ``guard_initials`` neither does a period after a single letter.
    """
    out: list[str] = []
    start = 0
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch not in _TERMINATORS:
            i += 1
            continue
        j = i + 1
        while j < n and (text[j] in _TERMINATORS or text[j] in _CLOSERS):
            j += 1
        cjk = any(c in _CJK_TERMINATORS for c in text[i:j])
        if not cjk and j < n and not text[j].isspace():
            i = j
            continue
        if ch == "." and not cjk and language == "en" and _guarded(text, start, i, guard_initials):
            i = j
            continue
        out.append(text[start:j])
        start = j
        i = j
    out.append(text[start:])
    return [s.strip() for s in out if any(c.isalnum() for c in s)]


def _guarded(text: str, start: int, dot: int, guard_initials: bool) -> bool:
    k = dot
    while k > start and not text[k - 1].isspace():
        k -= 1
    word = text[k:dot].lower().lstrip("(\"'")
    if word in ABBREVIATIONS:
        return True
    return guard_initials and len(word) == 1 and word.isalpha()


def count_sentences(text: str, language: str = "en", guard_initials: bool = False) -> int:
    return len(split_sentences(text, language, guard_initials))


# --- generation ------------------------------------------------------------

@dataclass
class GenerationRecord:
    qid: str
    language: str
    prompt: str
    response: str
    model: str
    sentence_count: int
    timestamp: str
    class_name: str = ""
    tier: str = ""
    region: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def render_prompt(title: str, language: str, templates: dict[str, str] | None = None) -> str:
    templates = {**DEFAULT_PROMPTS, **(templates or {})}
    if language not in templates:
        raise SkipGeneration(f"no prompt template for language {language!r}")
    return templates[language].format(title=title)


def generate_description(member, language: str, cfg: ChatEndpointConfig, http: HttpClient,
                         templates: dict[str, str] | None = None) -> GenerationRecord:
    """Prompt with the entity's (disambiguated) page title in ``language``."""
    title = member.titles.get(language)
    if not title:
        raise SkipGeneration(f"{member.qid}: no {language} Wikipedia page")
    prompt = render_prompt(title, language, templates)
    response, fetched_at = chat_full([("user", prompt)], cfg, http)
    return GenerationRecord(
        qid=member.qid,
        language=language,
        prompt=prompt,
        response=response,
        model=cfg.name,
        sentence_count=count_sentences(response, language),
        timestamp=fetched_at,
        class_name=getattr(member, "class_name", ""),
        tier=getattr(member, "tier", ""),
        region=getattr(member, "region", ""),
    )


# --- mock endpoints --------------------------------------------------------

TARGET_MARKER = "### Target sentence"
CONTEXT_MARKER = "### Evidence"
STATEMENT_MARKER = "### Statement"

_SUBJECT_PATTERNS = [
    re.compile(r"Tell me about (?:the )?(.+?)\.?\s*$", re.S),
    re.compile(r"请介绍一下(.+?)。?\s*$", re.S),
]


def _digest_int(s: str) -> int:
    return int(hashlib.sha256(s.encode("utf-8")).hexdigest()[:12], 16)


def _content_tokens(text: str) -> list[str]:
    words = [w for w in re.findall(r"[^\W_]+", text.lower()) if len(w) >= 3 and not _is_cjk(w)]
    cjk = [c for c in text if _is_cjk(c)]
    return words + cjk


def _is_cjk(s: str) -> bool:
    return all("㐀" <= c <= "鿿" or "豈" <= c <= "﫿" for c in s)


def heuristic_reply(prompt: str, verdict: str | None = None) -> str:
    """Deterministic stand-in for a real model, keyed on the prompt shape."""
    if STATEMENT_MARKER in prompt:
        if verdict is not None:
            return verdict
        evidence = prompt.split(CONTEXT_MARKER, 1)[-1].split(STATEMENT_MARKER, 1)[0]
        fact = prompt.split(STATEMENT_MARKER, 1)[1].split("\n\n", 1)[0]
        fact_tokens = set(_content_tokens(fact))
        have = set(_content_tokens(evidence))
        overlap = len(fact_tokens & have) / len(fact_tokens) if fact_tokens else 0.0
        return "True" if overlap >= 0.8 else "False"
    if TARGET_MARKER in prompt:
        sentence = prompt.split(TARGET_MARKER, 1)[1].strip().split("\n\n", 1)[0].strip()
        return f"- {sentence}"
    for pat in _SUBJECT_PATTERNS:
        m = pat.search(prompt.strip())
        if m:
            subject = m.group(1).strip()
            h = _digest_int(subject)
            if re.search(r"[㐀-鿿]", prompt):
                return f"{subject}是一个著名的主题。{subject}全长{50 + h % 2000}公里。{subject}于{1800 + h % 200}年首次被记载。"
            return (
                f"{subject} is a notable subject described in many sources. "
                f"{subject} has a length of {50 + h % 2000} km. "
                f"{subject} was first documented in {1800 + h % 200}."
            )
    return "No information."


class MockChat:
    """Local transport for ``mock://`` chat endpoints.

    ``mock://heuristic`` answers from the prompt shape, ``mock://true`` and
    ``mock://false`` answer every verification prompt with that word, and
    ``mock://store?path=FILE`` plays back a JSON object mapping request hashes
    to replies (a miss is an error).
    """

    def __init__(self):
        self._stores: dict[str, dict[str, str]] = {}

    def _store(self, path: str) -> dict[str, str]:
        if path not in self._stores:
            self._stores[path] = json.loads(Path(path).read_text(encoding="utf-8"))
        return self._stores[path]

    def __call__(self, method, url, params, body, headers, timeout):
        parts = urlsplit(url)
        mode = parts.netloc
        prompt = "\n".join(m["content"] for m in body["messages"] if m["role"] == "user")
        if mode == "store":
            path = parse_qs(parts.query).get("path", [""])[0]
            key = request_hash(body)
            reply = self._store(path).get(key)
            if reply is None:
                return 404, json.dumps({"error": f"no mock fixture for request {key[:12]}"})
        elif mode in ("true", "false"):
            reply = heuristic_reply(prompt, mode.capitalize())
        elif mode == "heuristic":
            reply = heuristic_reply(prompt)
        else:
            return 400, json.dumps({"error": f"unknown mock mode {mode!r}"})
        return 200, json.dumps({"choices": [{"index": 0, "message": {"role": "assistant", "content": reply}}]})


def record_fixture(store: dict[str, str], messages, cfg: ChatEndpointConfig, reply: str) -> str:
    key = request_hash(chat_body(messages, cfg))
    store[key] = reply
    return key
