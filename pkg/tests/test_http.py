import json
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from entityfact.http import (
    CacheMissError,
    HttpClient,
    HttpStatusError,
    NotFoundError,
    RateLimiter,
    RequestTimeout,
    ResponseCache,
    RetryPolicy,
    TransportError,
    request_key,
)


class Scripted:
    """Transport that replays a fixed list of outcomes and records each call."""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def __call__(self, method, url, params, body, headers, timeout):
        self.calls.append((method, url, params, body, headers))
        out = self.outcomes.pop(0) if len(self.outcomes) > 1 else self.outcomes[0]
        if isinstance(out, BaseException):
            raise out
        return out


def client(transport, tmp_path=None, **kw):
    cache = ResponseCache(tmp_path / "cache") if tmp_path is not None else None
    return HttpClient(cache=cache, transport=transport, sleep=lambda s: None, **kw)


def test_second_identical_fetch_is_served_from_cache(tmp_path):
    t = Scripted((200, '{"ok": 1}'))
    http = client(t, tmp_path)
    a = http.get("https://x.test/a", params={"q": "1"})
    b = http.get("https://x.test/a", params={"q": "1"})
    assert a.json() == b.json() == {"ok": 1}
    assert b.from_cache and len(t.calls) == 1 and http.network_calls == 1


def test_replay_miss_names_the_request(tmp_path):
    http = client(Scripted(AssertionError("no network")), tmp_path, replay=True)
    with pytest.raises(CacheMissError, match=r"https://x\.test/missing.*'q': 'z'"):
        http.get("https://x.test/missing", params={"q": "z"})


def _corrupt_only_entry(tmp_path):
    (path,) = [p for p in (tmp_path / "cache").rglob("*.json")]
    path.write_text("{not json", encoding="utf-8")


def test_corrupt_entry_is_refetched_live(tmp_path):
    t = Scripted((200, '"v1"'), (200, '"v2"'))
    http = client(t, tmp_path)
    http.get("https://x.test/a")
    _corrupt_only_entry(tmp_path)
    assert http.get("https://x.test/a").json() == "v2"
    assert len(t.calls) == 2
    # the refetch healed the entry
    assert client(Scripted(AssertionError()), tmp_path, replay=True).get("https://x.test/a").json() == "v2"


def test_corrupt_entry_is_an_error_in_replay(tmp_path):
    client(Scripted((200, '"v1"')), tmp_path).get("https://x.test/a")
    _corrupt_only_entry(tmp_path)
    with pytest.raises(CacheMissError, match="corrupt"):
        client(Scripted(AssertionError()), tmp_path, replay=True).get("https://x.test/a")


def test_entry_with_wrong_key_is_corrupt(tmp_path):
    http = client(Scripted((200, '"v1"')), tmp_path)
    http.get("https://x.test/a")
    (path,) = (tmp_path / "cache").rglob("*.json")
    rec = json.loads(path.read_text())
    rec["key"] = "0" * 64
    path.write_text(json.dumps(rec))
    with pytest.raises(CacheMissError):
        client(Scripted(AssertionError()), tmp_path, replay=True).get("https://x.test/a")


def test_retry_after_two_503s_with_exponential_backoff():
    slept = []
    t = Scripted((503, ""), (503, ""), (200, '"ok"'))
    http = HttpClient(transport=t, sleep=slept.append, retry=RetryPolicy(max_attempts=3, backoff=0.5))
    assert http.get("https://x.test/").json() == "ok"
    assert len(t.calls) == 3 and slept == [0.5, 1.0]


def test_401_is_not_retried():
    t = Scripted((401, "denied"), (200, "{}"))
    with pytest.raises(HttpStatusError) as exc:
        client(t).get("https://x.test/")
    assert exc.value.status == 401 and len(t.calls) == 1


def test_retry_exhaustion_carries_attempt_log():
    t = Scripted((500, ""))
    with pytest.raises(TransportError) as exc:
        client(t).get("https://x.test/")
    assert len(t.calls) == 3 and len(exc.value.attempts) == 3


def test_timeouts_become_request_timeout():
    with pytest.raises(RequestTimeout):
        client(Scripted(TimeoutError("slow"))).get("https://x.test/")


def test_404_is_not_found_and_cached(tmp_path):
    t = Scripted((404, "{}"))
    http = client(t, tmp_path)
    for _ in range(2):
        with pytest.raises(NotFoundError):
            http.get("https://x.test/gone")
    assert len(t.calls) == 1


def test_error_responses_are_not_cached(tmp_path):
    t = Scripted((500, ""), (500, ""), (500, ""), (200, '"late"'))
    http = client(t, tmp_path)
    with pytest.raises(TransportError):
        http.get("https://x.test/")
    assert http.get("https://x.test/").json() == "late"


def test_secret_headers_are_sent_but_do_not_change_the_key(tmp_path):
    t = Scripted((200, "{}"))
    http = client(t, tmp_path)
    http.post("https://x.test/", json_body={"a": 1}, secret_headers={"Authorization": "Bearer s3cret"})
    assert t.calls[0][4]["Authorization"] == "Bearer s3cret"
    http.post("https://x.test/", json_body={"a": 1}, secret_headers={"Authorization": "Bearer other"})
    assert len(t.calls) == 1
    assert "s3cret" not in "".join(p.read_text() for p in (tmp_path / "cache").rglob("*.json"))


def test_handlers_bypass_cache_and_work_in_replay(tmp_path):
    seen = []

    def mock(method, url, params, body, headers, timeout):
        seen.append(url)
        return 200, '"local"'

    http = client(Scripted(AssertionError()), tmp_path, replay=True, handlers={"mock": mock},
                  local_clock=lambda: "2025-01-01T00:00:00Z")
    resp = http.post("mock://heuristic/chat/completions", json_body={})
    assert resp.json() == "local" and resp.fetched_at == "2025-01-01T00:00:00Z"
    assert not list((tmp_path / "cache").rglob("*.json"))


@given(st.dictionaries(st.text(max_size=5), st.text(max_size=5), max_size=5))
def test_request_key_ignores_param_order(params):
    items = list(params.items())
    assert request_key("GET", "u", dict(items)) == request_key("GET", "u", dict(reversed(items)))


def test_request_key_distinguishes_body_and_method():
    assert request_key("POST", "u", None, {"a": 1}) != request_key("POST", "u", None, {"a": 2})
    assert request_key("GET", "u") != request_key("POST", "u")


def test_cache_tolerates_concurrent_writers(tmp_path):
    cache = ResponseCache(tmp_path)
    key = request_key("GET", "https://x.test/")

    def writer(i):
        for _ in range(20):
            cache.put(key, {"status": 200, "text": str(i)})

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    rec = cache.get(key)
    assert rec["status"] == 200 and rec["text"] in {str(i) for i in range(8)}
    assert not list(tmp_path.rglob(".tmp-*"))


def test_rate_limiter_spaces_requests_per_host():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    rl = RateLimiter(0.5, clock=lambda: now[0], sleep=sleep)
    rl.wait("a")
    rl.wait("a")
    rl.wait("b")
    assert slept == [0.5]
