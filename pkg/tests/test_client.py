import json

import pytest

from conftest import golden_context
from profiledenoise.denoise import ErrorKind
from profiledenoise.llm import ChatClient, ChatConfigError, Endpoint, LLMDenoiser, RetryPolicy, call_chat
from profiledenoise.llm.mockserver import MockChatServer, fixed, scripted_statuses


def client_for(srv, **kw):
    retry = RetryPolicy(max_attempts=kw.pop("max_attempts", 4), base_delay=0.01, timeout=5, seed=0)
    sleeps = []
    c = ChatClient(Endpoint(srv.base_url, "mock-model", "sk-test", {"temperature": 0}), retry,
                   sleep=sleeps.append, **kw)
    return c, sleeps


def test_retries_then_succeeds():
    with MockChatServer(scripted_statuses([503, 503, 200], "[Toy Story]")) as srv:
        c, sleeps = client_for(srv)
        ex = c.chat("hello", tag="user=1;run=0")
        c.close()
    assert ex.ok and ex.text == "[Toy Story]" and ex.attempts == 3
    assert len(sleeps) == 2 and all(s > 0 for s in sleeps)
    req = srv.requests[-1]
    assert req["body"]["messages"] == [{"role": "user", "content": "hello"}]
    assert req["body"]["temperature"] == 0 and req["body"]["model"] == "mock-model"
    assert req["headers"]["authorization"] == "Bearer sk-test"
    assert req["headers"]["x-denoise-request"] == "user=1;run=0"


def test_exhaustion_reports_failure():
    with MockChatServer(scripted_statuses([503], "")) as srv:
        c, sleeps = client_for(srv, max_attempts=4)
        ex = c.chat("hello")
        c.close()
    assert not ex.ok and ex.text is None and ex.attempts == 4 and "503" in ex.failure
    assert len(srv.requests) == 4 and len(sleeps) == 3


def test_rate_limit_and_malformed_json_are_retried():
    with MockChatServer(scripted_statuses([429, 200], "ok")) as srv:
        c, _ = client_for(srv)
        assert c.chat("x").attempts == 2
    with MockChatServer(lambda b, h: (200, "not json"), raw_body=True) as srv:
        c, _ = client_for(srv, max_attempts=2)
        ex = c.chat("x")
    assert not ex.ok and "malformed" in ex.failure


def test_client_errors_are_not_retried():
    with MockChatServer(scripted_statuses([401], "")) as srv:
        c, _ = client_for(srv)
        with pytest.raises(ChatConfigError):
            c.chat("x")
    assert len(srv.requests) == 1


def test_backoff_is_seeded():
    p = RetryPolicy(base_delay=1, max_delay=8, seed=3)
    import random
    a = [p.delay(n, random.Random(3)) for n in range(1, 6)]
    b = [p.delay(n, random.Random(3)) for n in range(1, 6)]
    assert a == b
    assert all(0.5 * min(8, 2 ** (n - 1)) <= d <= 1.5 * min(8, 2 ** (n - 1)) for n, d in enumerate(a, 1))


def test_endpoint_url_forms(monkeypatch):
    assert Endpoint("http://h:1", "m").url == "http://h:1/v1/chat/completions"
    assert Endpoint("http://h:1/v1/", "m").url == "http://h:1/v1/chat/completions"
    assert Endpoint("http://h/x/chat/completions", "m").url == "http://h/x/chat/completions"
    monkeypatch.delenv("PROFILEDENOISE_LLM_BASE_URL", raising=False)
    monkeypatch.delenv("OPENAI_BASE_URL", raising=False)
    with pytest.raises(ChatConfigError):
        Endpoint.from_env("m")
    monkeypatch.setenv("PROFILEDENOISE_LLM_BASE_URL", "http://env:9")
    monkeypatch.setenv("PROFILEDENOISE_LLM_API_KEY", "k")
    ep = Endpoint.from_env("m")
    assert ep.base_url == "http://env:9" and ep.api_key == "k"


def test_transcript_and_call_chat(tmp_path):
    log = tmp_path / "t.jsonl"
    with MockChatServer(fixed("[Heat]")) as srv:
        ex = call_chat(Endpoint(srv.base_url, "m"), "prompt text", transcript=log)
    assert ex.text == "[Heat]"
    rec = json.loads(log.read_text().splitlines()[0])
    assert rec["text"] == "[Heat]" and rec["request"]["messages"][0]["content"] == "prompt text"


def test_llm_denoiser_end_to_end():
    ctx = golden_context()
    with MockChatServer(fixed("Removal: [Home Alone]")) as srv:
        c, _ = client_for(srv)
        den = LLMDenoiser(c, "zero_shot_recs", name="llm")
        prop = den.propose(ctx, 1, seed=0, run=2)
    assert prop.error is ErrorKind.NONE and prop.removals == (12,) and prop.run == 2
    sent = srv.requests[0]["body"]["messages"][0]["content"]
    assert "Top-10 recommendations: [Alien" in sent and sent.endswith("Removal:")
    assert den.delivered == 1 and den.failed == 0


def test_llm_denoiser_transport_failure_is_formatting():
    with MockChatServer(scripted_statuses([500], "")) as srv:
        c, _ = client_for(srv, max_attempts=2)
        den = LLMDenoiser(c, "zero_shot")
        prop = den.propose(golden_context(), 1)
    assert prop.error is ErrorKind.FORMATTING and den.failed == 1 and den.delivered == 0


def test_concurrency_cap():
    import threading
    import time

    active, peak = [0], [0]
    lock = threading.Lock()

    def slow(body, headers):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.05)
        with lock:
            active[0] -= 1
        return 200, "[x]"

    with MockChatServer(slow) as srv:
        c, _ = client_for(srv, max_in_flight=2)
        threads = [threading.Thread(target=c.chat, args=("p",)) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert peak[0] <= 2
