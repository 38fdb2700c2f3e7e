"""Chat-completion (tool calling) and embedding access.

Two backends share one interface:

* :class:`OpenAIGateway` speaks the OpenAI-compatible HTTP protocol.
* :class:`MockGateway` is deterministic and offline. Its chat side is a
  rule table keyed by conversation id (built from labelled fixtures) with a
  keyword fallback; its embedding side is a hashed bag of tokens.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .taxonomy import SENTENCE_FIELD, SENTINEL, VALUE_FIELD, dump_json

logger = logging.getLogger(__name__)

DEFAULT_MOCK_DIMENSION = 256
MOCK_EMBEDDING_MODEL = "mock-hash-bow"


class GatewayError(RuntimeError):
    pass


class GatewayTransportError(GatewayError):
    """Network or server failure that survived the retry budget."""


class AuthenticationError(GatewayError):
    pass


class MissingToolCallError(GatewayError):
    """A tool call was forced but the response carried none."""


@dataclass(frozen=True)
class ChatRequest:
    messages: Sequence[tuple[str, str]]
    tools: Sequence[Mapping[str, Any]]
    tool_choice: str | None = None
    temperature: float = 0.0
    # Not sent on the wire. The mock uses it to look up labelled fixtures.
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.tools:
            raise ValueError("a chat request needs at least one tool")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")

    def tool_names(self) -> list[str]:
        return [t["function"]["name"] for t in self.tools]


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments_document: str


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("embedding is empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding has non-finite entries")

    @property
    def dimension(self) -> int:
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def scaled(self, factor: float) -> EmbeddingVector:
        return EmbeddingVector(tuple(v * factor for v in self.values), self.model_id)


class Gateway(Protocol):
    embedding_model: str
    dimension: int

    def chat_with_tools(self, request: ChatRequest) -> list[ToolCall]: ...

    def embed(self, text: str, model_id: str | None = None) -> EmbeddingVector: ...


class TokenBucket:
    """Blocking token bucket; share one instance across threads to cap request rate."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self, tokens: float = 1.0) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= tokens:
                    self._tokens -= tokens
                    return
                wait = (tokens - self._tokens) / self.rate
            self._sleep(wait)


# -- live backend ----------------------------------------------------------------


def _redact(headers: Mapping[str, str]) -> dict[str, str]:
    return {k: ("***" if k.lower() in {"authorization", "api-key"} else v) for k, v in headers.items()}


class OpenAIGateway:
    """Client for an OpenAI-compatible ``/chat/completions`` + ``/embeddings`` API.

    Transport failures, 429 and 5xx responses are retried ``max_retries``
    times with exponential backoff. A response whose tool-call arguments are
    not valid JSON is returned as-is; judging it is the caller's job.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        chat_model: str,
        embedding_model: str,
        dimension: int,
        *,
        max_retries: int = 2,
        backoff: float = 0.5,
        timeout: float = 60.0,
        rate_limiter: TokenBucket | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.chat_model = chat_model
        self.embedding_model = embedding_model
        self.dimension = dimension
        self.max_retries = max_retries
        self.backoff = backoff
        self.rate_limiter = rate_limiter
        self._sleep = sleep
        self._api_key = api_key
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, route: str, body: str) -> dict[str, Any]:
        url = f"{self.base_url}/{route}"
        headers = {"Authorization": f"Bearer {self._api_key}", "Content-Type": "application/json"}
        attempt = 0
        while True:
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            logger.debug("POST %s headers=%s body=%s", url, _redact(headers), body)
            try:
                resp = self._client.post(url, content=body.encode("utf-8"), headers=headers)
            except (httpx.TransportError, httpx.InvalidURL, httpx.UnsupportedProtocol) as exc:
                failure: str = f"{type(exc).__name__}: {exc}"
            else:
                logger.debug("%s -> %s %s", url, resp.status_code, resp.text)
                if resp.status_code in (401, 403):
                    raise AuthenticationError(f"{url} rejected credentials ({resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    failure = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise GatewayError(f"{url} returned {resp.status_code}: {resp.text[:500]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise GatewayError(f"{url} returned a non-JSON body") from exc
            if attempt >= self.max_retries:
                raise GatewayTransportError(f"{url} failed after {attempt + 1} attempts: {failure}")
            delay = self.backoff * (2**attempt)
            logger.warning("%s failed (%s); retry %d in %.2fs", url, failure, attempt + 1, delay)
            self._sleep(delay)
            attempt += 1

    def request_body(self, request: ChatRequest) -> str:
        """Serialize a request. Tool definitions are spliced in verbatim."""
        messages = [{"role": role, "content": text} for role, text in request.messages]
        head: dict[str, Any] = {
            "model": self.chat_model,
            "temperature": request.temperature,
            "messages": messages,
        }
        if request.tool_choice in ("auto", "required", "none"):
            head["tool_choice"] = request.tool_choice
        elif request.tool_choice:
            head["tool_choice"] = {"type": "function", "function": {"name": request.tool_choice}}
        tools = "[" + ", ".join(dump_json(t) for t in request.tools) + "]"
        return dump_json(head)[:-1] + ', "tools": ' + tools + "}"

    def chat_with_tools(self, request: ChatRequest) -> list[ToolCall]:
        payload = self._post("chat/completions", self.request_body(request))
        try:
            message = payload["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("chat response has no choices[0].message") from exc
        raw_calls = message.get("tool_calls") or []
        calls = [
            ToolCall(c["function"]["name"], c["function"].get("arguments") or "")
            for c in raw_calls
            if c.get("type", "function") == "function"
        ]
        forced = request.tool_choice not in (None, "auto", "none")
        if forced and not calls:
            raise MissingToolCallError("tool call was forced but the response has none")
        return calls

    def embed(self, text: str, model_id: str | None = None) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        model = model_id or self.embedding_model
        payload = self._post("embeddings", dump_json({"model": model, "input": text}))
        try:
            values = tuple(float(v) for v in payload["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise GatewayError("embedding response is malformed") from exc
        if len(values) != self.dimension:
            raise GatewayError(f"expected {self.dimension}-dim embedding, got {len(values)}")
        return EmbeddingVector(values, model)


# -- mock backend ------------------------------------------------------------------

_TOKEN = re.compile(r"\w+")


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_bucket_index(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


# Function words carry no topical signal for a bag-of-words embedding.
STOPWORDS = frozenset(
    "a an the and or but if of to in on at by for with from as is are was were be been am "
    "i me my mine you your we our it its this that these those there here what which who how "
    "do does did can could would should will shall may might some any please".split()
)


def content_tokens(text: str) -> list[str]:
    """Tokens without stopwords; all tokens if nothing else is left."""
    toks = tokens(text)
    content = [t for t in toks if t not in STOPWORDS]
    return content or toks


def hashed_bow(text: str, dimension: int) -> np.ndarray:
    vec = np.zeros(dimension, dtype=np.float64)
    for tok in content_tokens(text):
        vec[token_bucket_index(tok, dimension)] += 1.0
    return vec


@dataclass(frozen=True)
class MockRecord:
    """One labelled preference the mock will 'extract'."""

    path: tuple[str, str, str]
    value: str
    sentence: str


_NEGATIONS = {"not", "no", "never", "don", "dont", "doesn", "isn", "longer", "avoid", "dislike", "hate", "stop", "stopped"}


def is_negation_of(candidate: str, existing: str) -> bool:
    cand = tokens(candidate)
    ex = tokens(existing)
    if not ex or not set(cand) & _NEGATIONS:
        return False
    n = len(ex)
    return any(cand[i : i + n] == ex for i in range(len(cand) - n + 1))


class MockGateway:
    """Offline, deterministic stand-in for a chat + embedding endpoint.

    ``records`` maps a conversation id (passed as ``metadata["conversation_id"]``)
    to the preferences it reveals. Unknown conversations fall back to matching
    attribute examples that belong to exactly one detail category.
    """

    def __init__(
        self,
        records: Mapping[str, Sequence[MockRecord]] | None = None,
        *,
        dimension: int = DEFAULT_MOCK_DIMENSION,
        keyword_fallback: bool = True,
    ):
        self.records = {k: list(v) for k, v in (records or {}).items()}
        self.dimension = dimension
        self.embedding_model = MOCK_EMBEDDING_MODEL
        self.keyword_fallback = keyword_fallback
        self.chat_calls = 0
        self.embed_calls = 0
        self._lock = threading.Lock()

    # chat ------------------------------------------------------------------------

    def chat_with_tools(self, request: ChatRequest) -> list[ToolCall]:
        with self._lock:
            self.chat_calls += 1
        names = request.tool_names()
        task = request.metadata.get("task")
        if task == "maintenance" or {"pass", "update", "append"} & set(names):
            return [self._maintain(request)]
        tool = request.tools[0]["function"]
        if request.tool_choice and request.tool_choice in names:
            tool = next(t["function"] for t in request.tools if t["function"]["name"] == request.tool_choice)
        return [ToolCall(tool["name"], self._extract(request, tool["parameters"]))]

    def _extract(self, request: ChatRequest, tree: Mapping[str, Any]) -> str:
        conv_id = request.metadata.get("conversation_id")
        if conv_id in self.records:
            found = self.records[conv_id]
        elif self.keyword_fallback:
            found = _keyword_records(_user_lines(request), tree)
        else:
            found = []
        doc: dict[str, Any] = {}
        for rec in found:
            _place(doc, tree, rec)
        return json.dumps(doc, ensure_ascii=False)

    def _maintain(self, request: ChatRequest) -> ToolCall:
        """Oracle maintenance decision.

        equal value (case-insensitive) -> pass; negation of a stored value ->
        update; otherwise append when offered, else update the sole entry.
        """
        payload = json.loads(request.messages[-1][1])
        cand = payload["new_preference"]["value"]
        existing = payload["existing_preferences"]
        offered = set(request.tool_names())
        for ex in existing:
            if ex["value"].casefold() == cand.casefold():
                return ToolCall("pass", json.dumps({"existing_preference_id": ex["id"]}))
        for ex in existing:
            if is_negation_of(cand, ex["value"]):
                return ToolCall("update", json.dumps({"existing_preference_id": ex["id"]}))
        if "append" in offered:
            return ToolCall("append", "{}")
        return ToolCall("update", json.dumps({"existing_preference_id": existing[0]["id"]}))

    # embeddings --------------------------------------------------------------------

    def embed(self, text: str, model_id: str | None = None) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        with self._lock:
            self.embed_calls += 1
        vec = hashed_bow(text, self.dimension)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # Text with no word characters: fall back to a fixed bucket so the
            # vector stays usable for cosine.
            vec[token_bucket_index("", self.dimension)] = 1.0
            norm = 1.0
        return EmbeddingVector(tuple((vec / norm).tolist()), model_id or self.embedding_model)


def _place(doc: dict[str, Any], tree: Mapping[str, Any], rec: MockRecord) -> None:
    """Put ``rec`` into the argument document the way a schema-obedient model would.

    If the leaf is missing from the schema (opted out), the record lands in the
    deepest available ``no_or_other_preference`` slot, or nowhere.
    """
    main, sub, detail = rec.path
    item = {SENTENCE_FIELD: rec.sentence, VALUE_FIELD: rec.value}
    mains = tree.get("properties", {})
    if main not in mains:
        return
    subs = mains[main]["properties"]
    if sub not in subs:
        doc.setdefault(main, {}).setdefault(SENTINEL, []).append(item)
        return
    details = subs[sub]["properties"]
    target = doc.setdefault(main, {}).setdefault(sub, {})
    if detail not in details:
        target.setdefault(SENTINEL, []).append(item)
    elif details[detail].get("type") == "array":
        target.setdefault(detail, []).append(item)
    else:
        target.setdefault(detail, item)


def _user_lines(request: ChatRequest) -> list[str]:
    """User turns from a transcript rendered as ``Speaker: text`` lines."""
    out = []
    for role, text in request.messages:
        if role != "user":
            continue
        for line in text.splitlines():
            if line.startswith("User: "):
                out.append(line[len("User: "):])
    return out


def _keyword_records(user_turns: Iterable[str], tree: Mapping[str, Any]) -> list[MockRecord]:
    owners: dict[str, list[tuple[str, str, str]]] = {}
    for main, mdesc in tree.get("properties", {}).items():
        for sub, sdesc in mdesc.get("properties", {}).items():
            if sub == SENTINEL:
                continue
            for detail, ddesc in sdesc.get("properties", {}).items():
                for example in ddesc.get("examples", ()):
                    owners.setdefault(example.casefold(), []).append((main, sub, detail))
    out: list[MockRecord] = []
    seen: set[tuple[str, str, str]] = set()
    for turn in user_turns:
        for sentence in re.split(r"(?<=[.!?])\s+", turn.strip()):
            words = " " + " ".join(tokens(sentence)) + " "
            for example, paths in owners.items():
                ex_words = " ".join(tokens(example))
                if len(paths) != 1 or len(ex_words) < 3 or f" {ex_words} " not in words:
                    continue
                path = paths[0]
                if path in seen:
                    continue
                seen.add(path)
                value = next(
                    e for e in _examples_at(tree, path) if e.casefold() == example
                )
                out.append(MockRecord(path, value, sentence))
    return out


def _examples_at(tree: Mapping[str, Any], path: tuple[str, str, str]) -> list[str]:
    main, sub, detail = path
    return tree["properties"][main]["properties"][sub]["properties"][detail].get("examples", [])


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class GatewayConfig:
    mock: bool = True
    base_url: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o-2024-08-06"
    embedding_model: str = "text-embedding-ada-002"
    dimension: int = 1536
    mock_dimension: int = DEFAULT_MOCK_DIMENSION
    max_retries: int = 2
    requests_per_second: float | None = None
    api_key_env: str = "PREFMEM_API_KEY"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> GatewayConfig:
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown gateway settings: {sorted(unknown)}")
        if "PREFMEM_BASE_URL" in os.environ:
            data.setdefault("base_url", os.environ["PREFMEM_BASE_URL"])
        return cls(**data)

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")


def build_gateway(config: GatewayConfig, records: Mapping[str, Sequence[MockRecord]] | None = None) -> Gateway:
    if config.mock:
        return MockGateway(records, dimension=config.mock_dimension)
    key = config.api_key()
    if not key:
        raise AuthenticationError(
            f"live gateway selected but neither {config.api_key_env} nor OPENAI_API_KEY is set"
        )
    limiter = TokenBucket(config.requests_per_second) if config.requests_per_second else None
    return OpenAIGateway(
        config.base_url,
        key,
        config.chat_model,
        config.embedding_model,
        config.dimension,
        max_retries=config.max_retries,
        rate_limiter=limiter,
    )
