from __future__ import annotations

import json
import logging

import httpx
import numpy as np
import pytest

from prefmem.extraction import ConversationTranscript, Turn, extraction_request
from prefmem.llm_gateway import (
    AuthenticationError,
    ChatRequest,
    EmbeddingVector,
    GatewayConfig,
    GatewayError,
    GatewayTransportError,
    MissingToolCallError,
    MockGateway,
    OpenAIGateway,
    TokenBucket,
    build_gateway,
    content_tokens,
    is_negation_of,
    token_bucket_index,
)

TOOL = {"type": "function", "function": {"name": "f", "parameters": {"type": "object", "properties": {}}}}


def chat_reply(name="f", arguments="{}"):
    return {"choices": [{"message": {"role": "assistant", "tool_calls": [{"type": "function", "function": {"name": name, "arguments": arguments}}]}}]}


def client(handler, **kw):
    sleeps: list[float] = []
    gw = OpenAIGateway(
        "https://llm.example/v1",
        "sk-secret",
        "chat-model",
        "embed-model",
        4,
        transport=httpx.MockTransport(handler),
        sleep=sleeps.append,
        **kw,
    )
    return gw, sleeps


def test_retries_429_and_5xx_then_succeeds():
    statuses = iter([429, 503])

    def handler(request):
        code = next(statuses, 200)
        return httpx.Response(code, json=chat_reply() if code == 200 else {})

    gw, sleeps = client(handler)
    calls = gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL], tool_choice="f"))
    assert calls[0].tool_name == "f"
    assert sleeps == [0.5, 1.0]


def test_retry_budget_exhausted():
    gw, sleeps = client(lambda r: httpx.Response(500))
    with pytest.raises(GatewayTransportError, match="3 attempts"):
        gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL]))
    assert len(sleeps) == 2


def test_transport_error_is_retried():
    attempts = []

    def handler(request):
        attempts.append(1)
        if len(attempts) == 1:
            raise httpx.ConnectError("boom")
        return httpx.Response(200, json=chat_reply())

    gw, _ = client(handler)
    gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL]))
    assert len(attempts) == 2


@pytest.mark.parametrize("code", [401, 403])
def test_auth_failures_are_not_retried(code):
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(code)

    gw, _ = client(handler)
    with pytest.raises(AuthenticationError):
        gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL]))
    assert len(attempts) == 1


def test_forced_tool_without_call_raises():
    gw, _ = client(lambda r: httpx.Response(200, json={"choices": [{"message": {"content": "no"}}]}))
    with pytest.raises(MissingToolCallError):
        gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL], tool_choice="f"))


def test_malformed_arguments_are_returned_verbatim():
    gw, _ = client(lambda r: httpx.Response(200, json=chat_reply(arguments="{broken")))
    (call,) = gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL], tool_choice="f"))
    assert call.arguments_document == "{broken"


def test_sent_tool_bytes_match_compiled_schema(schema):
    seen = {}

    def handler(request):
        seen["body"] = request.content.decode("utf-8")
        seen["auth"] = request.headers["authorization"]
        return httpx.Response(200, json=chat_reply("extract_user_preference"))

    gw, _ = client(handler)
    transcript = ConversationTranscript("c", (Turn("user", "Italian please."),))
    gw.chat_with_tools(extraction_request(transcript, schema))
    assert schema.tool_json() in seen["body"]
    body = json.loads(seen["body"])
    assert body["tool_choice"] == {"type": "function", "function": {"name": "extract_user_preference"}}
    assert body["temperature"] == 0.0
    assert "metadata" not in body
    assert seen["auth"] == "Bearer sk-secret"


def test_debug_log_redacts_api_key(caplog):
    gw, _ = client(lambda r: httpx.Response(200, json=chat_reply()))
    with caplog.at_level(logging.DEBUG, logger="prefmem.llm_gateway"):
        gw.chat_with_tools(ChatRequest([("user", "hi")], [TOOL]))
    assert "sk-secret" not in caplog.text
    assert "***" in caplog.text


def test_embed_checks_dimension():
    gw, _ = client(lambda r: httpx.Response(200, json={"data": [{"embedding": [0.1, 0.2, 0.3, 0.4]}]}))
    assert gw.embed("hello").dimension == 4
    bad, _ = client(lambda r: httpx.Response(200, json={"data": [{"embedding": [0.1]}]}))
    with pytest.raises(GatewayError, match="4-dim"):
        bad.embed("hello")
    with pytest.raises(ValueError):
        gw.embed("   ")


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest([("user", "x")], [])
    with pytest.raises(ValueError):
        ChatRequest([("user", "x")], [TOOL], temperature=2.5)


def test_embedding_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        EmbeddingVector((1.0, float("nan")), "m")
    with pytest.raises(ValueError):
        EmbeddingVector((), "m")


def test_token_bucket_waits_when_empty():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    bucket = TokenBucket(2.0, capacity=1.0, clock=lambda: now[0], sleep=sleep)
    bucket.acquire()
    bucket.acquire()
    assert slept == [pytest.approx(0.5)]


def test_build_gateway_live_without_key_fails_before_network(monkeypatch):
    monkeypatch.delenv("PREFMEM_API_KEY", raising=False)
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(AuthenticationError):
        build_gateway(GatewayConfig(mock=False))
    assert isinstance(build_gateway(GatewayConfig()), MockGateway)
    with pytest.raises(ValueError):
        GatewayConfig.from_mapping({"bogus": 1})


# -- mock ---------------------------------------------------------------------------


def test_mock_embedding_is_deterministic_and_normalized():
    a = MockGateway().embed("Italian food tonight")
    b = MockGateway().embed("Italian food tonight")
    assert a == b
    assert np.linalg.norm(a.array()) == pytest.approx(1.0, abs=1e-12)


def test_mock_embedding_disjoint_buckets_are_orthogonal():
    gw = MockGateway()
    t1, t2 = "jazz", "parking"
    assert token_bucket_index(t1, gw.dimension) != token_bucket_index(t2, gw.dimension)
    assert float(gw.embed(t1).array() @ gw.embed(t2).array()) == 0.0


def test_content_tokens_drop_stopwords_but_never_everything():
    assert content_tokens("Play the jazz for me") == ["play", "jazz"]
    assert content_tokens("is it") == ["is", "it"]


@pytest.mark.parametrize(
    "cand, existing, expected",
    [
        ("not Italian", "Italian", True),
        ("I don't want Jazz anymore", "jazz", True),
        ("Jazz", "Jazz", False),
        ("not Low", "Low", True),
        ("Rock", "Jazz", False),
        ("not Rock", "Jazz", False),
    ],
)
def test_negation_detection(cand, existing, expected):
    assert is_negation_of(cand, existing) is expected


def test_mock_counts_calls(gateway, corpus, schema):
    p = corpus.points[0]
    gateway.chat_with_tools(extraction_request(p.extraction_conversation, schema))
    gateway.embed("x")
    assert (gateway.chat_calls, gateway.embed_calls) == (1, 1)
