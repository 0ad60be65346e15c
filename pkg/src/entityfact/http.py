"""Cache-backed HTTP access shared by every networked stage.

Responses are stored on disk under the SHA-256 of the canonicalized request
(method, URL, query parameters, body). In replay mode the network is never
touched and a cache miss is a hard error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping
from urllib.parse import urlsplit

logger = logging.getLogger(__name__)

DEFAULT_USER_AGENT = "entityfact/0.1 (dataset research tooling; contact via repository)"


class TransportError(Exception):
    """Request failed after all retries, or could not be served at all."""

    def __init__(self, message: str, attempts: list[str] | None = None):
        self.attempts = list(attempts or [])
        if self.attempts:
            message = f"{message} (attempts: {'; '.join(self.attempts)})"
        super().__init__(message)


class RequestTimeout(TransportError):
    pass


class HttpStatusError(TransportError):
    def __init__(self, status: int, url: str, body: str = "", attempts: list[str] | None = None):
        self.status = status
        self.url = url
        self.body = body[:500]
        super().__init__(f"HTTP {status} from {url}", attempts)


class CacheMissError(TransportError):
    pass


class CorruptCacheEntry(Exception):
    pass


class NotFoundError(LookupError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0
    factor: float = 2.0
    retry_statuses: tuple[int, ...] = (429, 500, 502, 503, 504)

    def delay(self, attempt: int) -> float:
        # attempt is 1-based; no delay before the first try
        return self.backoff * self.factor ** (attempt - 1)


@dataclass
class Response:
    status: int
    text: str
    url: str
    fetched_at: str
    from_cache: bool = False

    def json(self) -> Any:
        return json.loads(self.text)


def canonical_request(
    method: str,
    url: str,
    params: Mapping[str, Any] | None = None,
    body: Any = None,
) -> dict:
    return {
        "method": method.upper(),
        "url": url,
        "params": sorted((str(k), str(v)) for k, v in (params or {}).items()),
        "body": body,
    }


def request_key(method: str, url: str, params: Mapping[str, Any] | None = None, body: Any = None) -> str:
    blob = json.dumps(
        canonical_request(method, url, params, body),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


class ResponseCache:
    """Content-addressed response store. Safe for concurrent readers and writers."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorruptCacheEntry(f"unreadable cache entry {path}: {exc}") from exc
        if not isinstance(record, dict) or record.get("key") != key or "text" not in record or "status" not in record:
            raise CorruptCacheEntry(f"malformed cache entry {path}")
        return record

    def put(self, key: str, record: dict) -> None:
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({**record, "key": key}, sort_keys=True, ensure_ascii=False, indent=1)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def __contains__(self, key: str) -> bool:
        return self.path_for(key).exists()


class RateLimiter:
    """Minimum spacing between requests to the same host."""

    def __init__(self, min_interval: float = 0.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_interval = min_interval
        self._clock = clock
        self._sleep = sleep
        self._next: dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, host: str) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            slot = max(now, self._next.get(host, now))
            self._next[host] = slot + self.min_interval
        if slot > now:
            self._sleep(slot - now)


# (method, url, params, body, headers, timeout) -> (status, text)
Transport = Callable[[str, str, "Mapping[str, Any] | None", Any, Mapping[str, str], float], "tuple[int, str]"]


def requests_transport(method, url, params, body, headers, timeout):
    import requests

    kwargs: dict[str, Any] = {"params": params, "headers": dict(headers), "timeout": timeout}
    if isinstance(body, (dict, list)) and headers.get("Content-Type") == "application/json":
        kwargs["json"] = body
    elif body is not None:
        kwargs["data"] = body
    try:
        resp = requests.request(method, url, **kwargs)
    except requests.Timeout as exc:
        raise TimeoutError(str(exc)) from exc
    except requests.RequestException as exc:
        raise ConnectionError(str(exc)) from exc
    return resp.status_code, resp.text


@dataclass
class HttpClient:
    """Retrying, rate-limited, cache-backed HTTP client.

    ``handlers`` maps URL schemes (e.g. ``mock``) to local transports; those
    bypass the cache and stay available in replay mode.
    """

    cache: ResponseCache | None = None
    replay: bool = False
    transport: Transport | None = None
    handlers: dict[str, Transport] = field(default_factory=dict)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rate_limiter: RateLimiter = field(default_factory=RateLimiter)
    sleep: Callable[[float], None] = time.sleep
    clock: Callable[[], str] = utc_now
    # timestamps for responses from local handlers; fixed so mock runs are reproducible
    local_clock: Callable[[], str] = lambda: ""
    timeout: float = 60.0
    user_agent: str = DEFAULT_USER_AGENT
    network_calls: int = 0

    def __post_init__(self):
        self._count_lock = threading.Lock()
        if self.transport is None:
            self.transport = requests_transport

    def get(self, url: str, params: Mapping[str, Any] | None = None, **kw) -> Response:
        return self.request("GET", url, params=params, **kw)

    def post(self, url: str, params: Mapping[str, Any] | None = None, **kw) -> Response:
        return self.request("POST", url, params=params, **kw)

    def request(
        self,
        method: str,
        url: str,
        *,
        params: Mapping[str, Any] | None = None,
        data: Mapping[str, Any] | None = None,
        json_body: Any = None,
        headers: Mapping[str, str] | None = None,
        secret_headers: Mapping[str, str] | None = None,
        retry: RetryPolicy | None = None,
        timeout: float | None = None,
    ) -> Response:
        """Issue a request. ``secret_headers`` are sent but never cached or hashed."""
        body = json_body if json_body is not None else (dict(data) if data is not None else None)
        hdrs = {"User-Agent": self.user_agent, **(headers or {})}
        if json_body is not None:
            hdrs["Content-Type"] = "application/json"
        scheme = urlsplit(url).scheme
        if scheme in self.handlers:
            status, text = self.handlers[scheme](method, url, params, body, hdrs, timeout or self.timeout)
            resp = Response(status, text, url, self.local_clock())
            self._check_status(resp, [])
            return resp

        key = request_key(method, url, params, body)
        if self.cache is not None:
            try:
                record = self.cache.get(key)
            except CorruptCacheEntry as exc:
                if self.replay:
                    raise CacheMissError(f"corrupt cache entry in replay mode for {method} {url}: {exc}") from exc
                logger.warning("%s; refetching", exc)
                record = None
            if record is not None:
                resp = Response(record["status"], record["text"], url, record.get("fetched_at", ""), True)
                self._check_status(resp, [])
                return resp
        if self.replay:
            raise CacheMissError(
                f"replay mode: no cached response for {method} {url} params={dict(params or {})} (key {key[:12]})"
            )

        resp = self._fetch(method, url, params, body, {**hdrs, **(secret_headers or {})},
                           retry or self.retry, timeout or self.timeout)
        if self.cache is not None and (200 <= resp.status < 300 or resp.status == 404):
            self.cache.put(key, {
                "request": canonical_request(method, url, params, body),
                "status": resp.status,
                "text": resp.text,
                "fetched_at": resp.fetched_at,
            })
        self._check_status(resp, [])
        return resp

    def _fetch(self, method, url, params, body, headers, retry: RetryPolicy, timeout: float) -> Response:
        attempts: list[str] = []
        host = urlsplit(url).netloc
        timed_out = False
        for attempt in range(1, retry.max_attempts + 1):
            if attempt > 1:
                self.sleep(retry.delay(attempt - 1))
            self.rate_limiter.wait(host)
            with self._count_lock:
                self.network_calls += 1
            try:
                status, text = self.transport(method, url, params, body, headers, timeout)
            except TimeoutError as exc:
                timed_out = True
                attempts.append(f"#{attempt} timeout: {exc}")
                continue
            except ConnectionError as exc:
                attempts.append(f"#{attempt} connection error: {exc}")
                continue
            if status in retry.retry_statuses:
                attempts.append(f"#{attempt} HTTP {status}")
                logger.info("retryable HTTP %s from %s (attempt %d)", status, url, attempt)
                continue
            return Response(status, text, url, self.clock())
        if timed_out and all("timeout" in a for a in attempts):
            raise RequestTimeout(f"{method} {url} timed out", attempts)
        raise TransportError(f"{method} {url} failed after {len(attempts)} attempts", attempts)

    @staticmethod
    def _check_status(resp: Response, attempts: list[str]) -> None:
        if resp.status == 404:
            raise NotFoundError(resp.url)
        if not 200 <= resp.status < 300:
            raise HttpStatusError(resp.status, resp.url, resp.text, attempts)
