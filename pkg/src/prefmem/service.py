"""HTTP service exposing extraction, maintenance and retrieval per user."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Optional

import yaml
from fastapi import Depends, FastAPI, Header, HTTPException, Request
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .dataset import load_fixture, mock_records
from .extraction import ConversationTranscript, Turn, extract
from .llm_gateway import Gateway, GatewayConfig, GatewayError, build_gateway
from .maintenance import Maintainer
from .prefstore import PreferenceStore
from .retrieval import DEFAULT_K, RetrievalQuery, retrieve
from .taxonomy import CategoryTaxonomy, CompiledSchema, compile_schema, load_default_taxonomy, load_taxonomy, opt_out

logger = logging.getLogger(__name__)

IDEMPOTENCY_TTL_SECONDS = 24 * 3600


class ServiceConfig(BaseModel):
    """Startup configuration; immutable once the app is built."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    host: str = "127.0.0.1"
    port: int = Field(8080, ge=1, le=65535)
    storage_root: Optional[str] = None  # None keeps the store in memory
    taxonomy_path: Optional[str] = None  # None uses the bundled taxonomy
    gateway: dict[str, Any] = Field(default_factory=dict)
    retrieval_k: int = Field(DEFAULT_K, gt=0)
    score_floor: float = Field(-1.0, ge=-1.0, le=1.0)
    bearer_token_env: Optional[str] = None
    idempotency_ttl_seconds: float = Field(IDEMPOTENCY_TTL_SECONDS, gt=0)

    @field_validator("gateway")
    @classmethod
    def _check_gateway(cls, v: dict[str, Any]) -> dict[str, Any]:
        GatewayConfig.from_mapping(v)
        return v

    def gateway_config(self) -> GatewayConfig:
        return GatewayConfig.from_mapping(self.gateway)

    def with_mock(self, mock: bool) -> ServiceConfig:
        return self.model_copy(update={"gateway": {**self.gateway, "mock": mock}})


def load_config(path: str | Path | None) -> ServiceConfig:
    if path is None:
        return ServiceConfig()
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: configuration must be a mapping")
    return ServiceConfig(**data)


def _default_gateway(config: GatewayConfig, taxonomy: CategoryTaxonomy) -> Gateway:
    """Live client, or in mock mode a mock seeded with the bundled fixture's rules."""
    if not config.mock:
        return build_gateway(config)
    return build_gateway(config, mock_records(load_fixture(taxonomy).points))


class IngestFailure(Exception):
    def __init__(self, status: int, body: dict[str, Any]):
        super().__init__(body.get("detail", ""))
        self.status = status
        self.body = body


@dataclass
class _Remembered:
    at: float
    status: int
    body: dict[str, Any]


class MemoryEngine:
    """Wires taxonomy, gateway, store and maintainer for the service and CLI."""

    def __init__(
        self,
        config: ServiceConfig,
        *,
        taxonomy: CategoryTaxonomy | None = None,
        gateway: Gateway | None = None,
        store: PreferenceStore | None = None,
        monotonic: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.taxonomy = taxonomy or (
            load_taxonomy(config.taxonomy_path) if config.taxonomy_path else load_default_taxonomy()
        )
        self.gateway = gateway or _default_gateway(config.gateway_config(), self.taxonomy)
        self.store = store or PreferenceStore(config.storage_root, self.taxonomy, self.gateway.dimension)
        self.maintainer = Maintainer(self.gateway, self.taxonomy)
        self._schemas: dict[frozenset[str], CompiledSchema] = {}
        self._schema_lock = threading.Lock()
        self._idempotency: dict[tuple[str, str], _Remembered] = {}
        self._idempotency_lock = threading.Lock()
        self._monotonic = monotonic

    def schema_for(self, user_id: str) -> CompiledSchema:
        excluded = self.store.opted_out(user_id)
        with self._schema_lock:
            schema = self._schemas.get(excluded)
            if schema is None:
                schema = compile_schema(opt_out(self.taxonomy, excluded) if excluded else self.taxonomy)
                self._schemas[excluded] = schema
            return schema

    def extract(self, user_id: str, transcript: ConversationTranscript):
        excluded = self.store.opted_out(user_id)
        outcome = extract(transcript, self.schema_for(user_id), self.gateway)
        # Second line of defence: never let a candidate under an opted-out sub through.
        kept = [c for c in outcome.candidates if c.path.sub not in excluded]
        if len(kept) != len(outcome.candidates):
            logger.warning("dropped %d candidates under opted-out categories", len(outcome.candidates) - len(kept))
            outcome.candidates = kept
        return outcome

    def ingest(self, user_id: str, transcript: ConversationTranscript, idempotency_key: str | None = None) -> dict[str, Any]:
        if idempotency_key:
            hit = self._remembered(user_id, idempotency_key)
            if hit is not None:
                if hit.status != 200:
                    raise IngestFailure(hit.status, hit.body)
                return hit.body
        try:
            body = self._ingest(user_id, transcript)
            status = 200
        except IngestFailure as exc:
            body, status = exc.body, exc.status
        if idempotency_key and status != 502:
            # Gateway failures are transient; a retry with the same key should run again.
            self._remember(user_id, idempotency_key, status, body)
        if status != 200:
            raise IngestFailure(status, body)
        return body

    def _ingest(self, user_id: str, transcript: ConversationTranscript) -> dict[str, Any]:
        try:
            outcome = self.extract(user_id, transcript)
        except GatewayError as exc:
            raise IngestFailure(502, {"detail": f"extraction failed: {exc}"}) from exc
        records = self.maintainer.ingest(user_id, outcome.candidates, self.store)
        body = {
            "conversation_id": transcript.conversation_id,
            "structurally_valid": outcome.structurally_valid,
            "candidates": [
                {"path": str(c.path), "value": c.value, "source_sentence": c.source_sentence} for c in outcome.candidates
            ],
            "mutations": [r.to_dict() for r in records],
        }
        kinds = {r.error_kind for r in records if r.error_kind}
        if "conflict" in kinds:
            raise IngestFailure(409, {"detail": "concurrent writer conflict", **body})
        if "gateway" in kinds:
            raise IngestFailure(502, {"detail": "maintenance gateway failure", **body})
        return body

    def _remembered(self, user_id: str, key: str) -> _Remembered | None:
        now = self._monotonic()
        with self._idempotency_lock:
            expired = [k for k, v in self._idempotency.items() if now - v.at > self.config.idempotency_ttl_seconds]
            for k in expired:
                del self._idempotency[k]
            return self._idempotency.get((user_id, key))

    def _remember(self, user_id: str, key: str, status: int, body: dict[str, Any]) -> None:
        with self._idempotency_lock:
            self._idempotency[(user_id, key)] = _Remembered(self._monotonic(), status, body)

    def retrieve(self, user_id: str, utterance: str, k: int | None = None, score_floor: float | None = None) -> list[dict[str, Any]]:
        query = RetrievalQuery(user_id, utterance, self.config.retrieval_k if k is None else k)
        floor = self.config.score_floor if score_floor is None else score_floor
        ranked = retrieve(query, self.store.snapshot(user_id), self.gateway, score_floor=floor)
        return [{"preference": r.preference.to_dict(with_embedding=False), "score": r.score} for r in ranked]

    def preferences(self, user_id: str) -> dict[str, Any]:
        snap = self.store.snapshot(user_id)
        return {
            "user_id": user_id,
            "taxonomy_version": snap.taxonomy_version,
            "opted_out": sorted(self.store.opted_out(user_id)),
            "preferences": [p.to_dict(with_embedding=False) for p in snap.preferences],
        }


# -- HTTP layer ----------------------------------------------------------------------------


class TurnBody(BaseModel):
    speaker: Literal["user", "assistant"]
    text: str = Field(min_length=1)


class ConversationBody(BaseModel):
    conversation_id: str = ""
    turns: list[TurnBody] = Field(min_length=1)

    def transcript(self) -> ConversationTranscript:
        return ConversationTranscript(self.conversation_id, tuple(Turn(t.speaker, t.text) for t in self.turns))


class RetrieveBody(BaseModel):
    utterance: str
    k: Optional[int] = None
    score_floor: Optional[float] = Field(None, ge=-1.0, le=1.0)


class OptOutBody(BaseModel):
    sub_categories: list[str] = Field(min_length=1)


def create_app(config: ServiceConfig | None = None, engine: MemoryEngine | None = None) -> FastAPI:
    config = config or (engine.config if engine else ServiceConfig())
    engine = engine or MemoryEngine(config)
    token = os.environ.get(config.bearer_token_env) if config.bearer_token_env else None
    if config.bearer_token_env and not token:
        raise ValueError(f"bearer token variable {config.bearer_token_env} is not set")

    def authorize(authorization: Optional[str] = Header(None)) -> None:
        if token is not None and authorization != f"Bearer {token}":
            raise HTTPException(401, "missing or wrong bearer token")

    app = FastAPI(title="prefmem", version="0.1.0", dependencies=[Depends(authorize)])
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": jsonable_encoder(exc.errors())})

    @app.get("/healthz")
    def health() -> dict[str, Any]:
        return {"status": "ok", "taxonomy_version": engine.taxonomy.version}

    @app.post("/v1/users/{user_id}/conversations")
    def post_conversation(
        user_id: str, body: ConversationBody, idempotency_key: Optional[str] = Header(None)
    ) -> dict[str, Any]:
        try:
            transcript = body.transcript()
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        try:
            return engine.ingest(user_id, transcript, idempotency_key)
        except IngestFailure as exc:
            return JSONResponse(status_code=exc.status, content=exc.body)

    @app.post("/v1/users/{user_id}/retrieve")
    def post_retrieve(user_id: str, body: RetrieveBody) -> dict[str, Any]:
        try:
            results = engine.retrieve(user_id, body.utterance, body.k, body.score_floor)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        except GatewayError as exc:
            raise HTTPException(502, f"embedding failed: {exc}") from exc
        return {"user_id": user_id, "results": results}

    @app.get("/v1/users/{user_id}/preferences")
    def get_preferences(user_id: str) -> dict[str, Any]:
        return engine.preferences(user_id)

    @app.delete("/v1/users/{user_id}/preferences/{pref_id}")
    def delete_preference(user_id: str, pref_id: str) -> dict[str, Any]:
        if not engine.store.delete(user_id, pref_id):
            raise HTTPException(404, f"no preference {pref_id!r} for user {user_id!r}")
        return {"deleted": pref_id}

    @app.post("/v1/users/{user_id}/optout")
    def post_optout(user_id: str, body: OptOutBody) -> dict[str, Any]:
        try:
            purged = engine.store.opt_out(user_id, body.sub_categories)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        return {"opted_out": sorted(engine.store.opted_out(user_id)), "purged": purged}

    return app
