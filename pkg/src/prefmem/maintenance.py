"""Keeping a user's store consistent: pass / update / append per incoming candidate."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from .extraction import CandidatePreference
from .llm_gateway import ChatRequest, Gateway, GatewayError
from .prefstore import ConflictError, Preference, PreferenceStore
from .retrieval import EmbeddingMode, embed_preference
from .taxonomy import CategoryTaxonomy, DetailType, dump_json

logger = logging.getLogger(__name__)


class Action(str, Enum):
    PASS = "pass"
    UPDATE = "update"
    APPEND = "append"


SYSTEM_PROMPT = (
    "You maintain the long-term preference memory of an in-car voice assistant. "
    "You get one newly extracted user preference and the preferences already stored "
    "in the same category. Call exactly one function: 'pass' if the new preference is "
    "already stored, 'update' if it replaces or contradicts a stored one, 'append' if "
    "it is new and compatible with what is stored."
)

_REF = "existing_preference_id"


@dataclass(frozen=True)
class MaintenanceDecision:
    action: Action
    existing_id: str | None = None
    rationale_text: str | None = None
    model_called: bool = True
    protocol_violation: str | None = None

    def __post_init__(self) -> None:
        if (self.action is Action.APPEND) != (self.existing_id is None):
            raise ValueError(f"{self.action.value} {'needs' if self.existing_id is None else 'takes no'} existing_id")


@dataclass
class MutationRecord:
    candidate: CandidatePreference
    decision: MaintenanceDecision | None
    inserted_ids: list[str] = field(default_factory=list)
    deleted_ids: list[str] = field(default_factory=list)
    error: str | None = None
    error_kind: str | None = None  # "conflict", "gateway" or "invalid"

    def to_dict(self) -> dict[str, Any]:
        d = self.decision
        return {
            "path": str(self.candidate.path),
            "value": self.candidate.value,
            "action": d.action.value if d else None,
            "existing_id": d.existing_id if d else None,
            "protocol_violation": d.protocol_violation if d else None,
            "inserted_ids": self.inserted_ids,
            "deleted_ids": self.deleted_ids,
            "error": self.error,
            "error_kind": self.error_kind,
        }


def maintenance_tools(detail_type: DetailType, existing: Sequence[Preference]) -> list[dict[str, Any]]:
    """Tool definitions offered to the model; ``append`` is withheld for a filled SP category."""
    ids = [p.id for p in existing]
    ref = {
        "type": "object",
        "properties": {
            _REF: {"type": "string", "enum": ids, "description": "Id of the stored preference that triggered the call."},
            "reason": {"type": "string", "description": "Short justification."},
        },
        "required": [_REF],
    }
    tools = [
        _tool("pass", "The new preference is already stored; do not store it again.", ref),
        _tool("update", "The new preference replaces the referenced stored preference.", ref),
    ]
    if detail_type is DetailType.MP or not existing:
        tools.append(
            _tool(
                "append",
                "The new preference is not stored yet and does not conflict with stored ones.",
                {"type": "object", "properties": {"reason": {"type": "string", "description": "Short justification."}}},
            )
        )
    return tools


def _tool(name: str, description: str, params: dict[str, Any]) -> dict[str, Any]:
    return {"type": "function", "function": {"name": name, "description": description, "parameters": params}}


def _payload(taxonomy: CategoryTaxonomy, candidate: CandidatePreference, existing: Sequence[Preference]) -> str:
    detail = taxonomy.detail(candidate.path)
    return dump_json(
        {
            "category": detail.display_name,
            "category_type": detail.type.value,
            "new_preference": {"value": candidate.value, "sentence": candidate.source_sentence},
            "existing_preferences": [
                {"id": p.id, "value": p.value, "sentence": p.source_sentence} for p in existing
            ],
        }
    )


class Maintainer:
    """Decides and applies maintenance operations for one taxonomy."""

    def __init__(
        self,
        gateway: Gateway,
        taxonomy: CategoryTaxonomy,
        *,
        forced_append_on_empty: bool = True,
        conflict_retries: int = 3,
    ):
        self.gateway = gateway
        self.taxonomy = taxonomy
        self.forced_append_on_empty = forced_append_on_empty
        self.conflict_retries = conflict_retries

    def decide(self, candidate: CandidatePreference, existing_in_detail: Sequence[Preference]) -> MaintenanceDecision:
        if any(p.path != candidate.path for p in existing_in_detail):
            raise ValueError("existing preferences must share the candidate's detail category")
        if not existing_in_detail and self.forced_append_on_empty:
            return MaintenanceDecision(Action.APPEND, model_called=False)
        detail_type = self.taxonomy.detail(candidate.path).type
        tools = maintenance_tools(detail_type, existing_in_detail)
        request = ChatRequest(
            messages=[("system", SYSTEM_PROMPT), ("user", _payload(self.taxonomy, candidate, existing_in_detail))],
            tools=tools,
            tool_choice="required",
            temperature=0.0,
            metadata={"task": "maintenance"},
        )
        calls = self.gateway.chat_with_tools(request)
        offered = {t["function"]["name"] for t in tools}
        known = {p.id for p in existing_in_detail}
        if not calls:
            return self._fallback(detail_type, existing_in_detail, "no tool call returned")
        call = calls[0]
        if call.tool_name not in offered:
            return self._fallback(detail_type, existing_in_detail, f"model called disabled or unknown tool {call.tool_name!r}")
        try:
            args = json.loads(call.arguments_document or "{}")
        except json.JSONDecodeError:
            return self._fallback(detail_type, existing_in_detail, "unparseable tool arguments")
        if not isinstance(args, dict):
            return self._fallback(detail_type, existing_in_detail, "tool arguments are not an object")
        reason = args.get("reason") if isinstance(args.get("reason"), str) else None
        action = Action(call.tool_name)
        if action is Action.APPEND:
            return MaintenanceDecision(action, rationale_text=reason)
        ref = args.get(_REF)
        if ref not in known:
            return self._fallback(detail_type, existing_in_detail, f"{action.value} references unknown id {ref!r}")
        return MaintenanceDecision(action, ref, rationale_text=reason)

    @staticmethod
    def _fallback(detail_type: DetailType, existing: Sequence[Preference], problem: str) -> MaintenanceDecision:
        logger.warning("maintenance protocol violation: %s", problem)
        if detail_type is DetailType.MP or not existing:
            return MaintenanceDecision(Action.APPEND, protocol_violation=problem)
        return MaintenanceDecision(Action.UPDATE, existing[0].id, protocol_violation=problem)

    def apply(
        self, decision: MaintenanceDecision, candidate: CandidatePreference, store: PreferenceStore, user_id: str
    ) -> MutationRecord:
        record = MutationRecord(candidate, decision)
        if decision.action is Action.PASS:
            if store.get(user_id, decision.existing_id) is None:
                raise ConflictError(f"preference {decision.existing_id!r} vanished")
            return record
        embedding = embed_preference(self.gateway, self.taxonomy, candidate, EmbeddingMode.ENRICHED)
        if decision.action is Action.UPDATE:
            new = store.replace(user_id, decision.existing_id, candidate, embedding)
            record.deleted_ids.append(decision.existing_id)
        else:
            new = store.insert(user_id, candidate, embedding)
        record.inserted_ids.append(new.id)
        return record

    def ingest(self, user_id: str, candidates: Sequence[CandidatePreference], store: PreferenceStore) -> list[MutationRecord]:
        """Maintain candidates one after another; each sees its predecessors' effects.

        Per-candidate failures are recorded on the returned record and do not
        stop the batch.
        """
        records = []
        for cand in candidates:
            records.append(self._ingest_one(user_id, cand, store))
        return records

    def _ingest_one(self, user_id: str, cand: CandidatePreference, store: PreferenceStore) -> MutationRecord:
        last_error = "not attempted"
        for _ in range(self.conflict_retries):
            try:
                with store.writer(user_id):
                    decision = self.decide(cand, store.by_detail_category(user_id, cand.path))
                    return self.apply(decision, cand, store, user_id)
            except ConflictError as exc:
                last_error = f"conflict: {exc}"
                continue
            except GatewayError as exc:
                logger.error("maintenance failed for %s: %s", cand.path, exc)
                return MutationRecord(cand, None, error=f"{type(exc).__name__}: {exc}", error_kind="gateway")
            except (ValueError, OSError) as exc:
                logger.error("maintenance failed for %s: %s", cand.path, exc)
                return MutationRecord(cand, None, error=f"{type(exc).__name__}: {exc}", error_kind="invalid")
        return MutationRecord(cand, None, error=last_error, error_kind="conflict")


def expected_action(utterance_type: str, detail_type: DetailType) -> Action:
    """Ground-truth maintenance function for a maintenance utterance type."""
    if utterance_type == "equal":
        return Action.PASS
    if utterance_type == "negate":
        return Action.UPDATE
    if utterance_type == "different":
        return Action.APPEND if detail_type is DetailType.MP else Action.UPDATE
    raise ValueError(f"unknown maintenance utterance type {utterance_type!r}")
