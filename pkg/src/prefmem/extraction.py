"""Category-bound preference extraction from a conversation transcript."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .llm_gateway import ChatRequest, Gateway
from .taxonomy import (
    SENTENCE_FIELD,
    SENTINEL,
    VALUE_FIELD,
    CategoryPath,
    CompiledSchema,
    DetailType,
    validate_path,
)

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are the memory component of an in-car voice assistant. Read the conversation "
    "between the user and the assistant and extract the user's lasting personal "
    "preferences by calling the provided function. Only extract preferences the user "
    "revealed about themselves, never the assistant's suggestions or one-off requests."
)


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class ConversationTranscript:
    conversation_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError(f"conversation {self.conversation_id!r} has no turns")
        for t in self.turns:
            if t.speaker not in ("user", "assistant"):
                raise ValueError(f"unknown speaker {t.speaker!r}")
            if not t.text.strip():
                raise ValueError(f"conversation {self.conversation_id!r} has an empty turn")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ConversationTranscript:
        turns = data.get("turns")
        if not isinstance(turns, list):
            raise ValueError("transcript needs a 'turns' list")
        parsed = []
        for t in turns:
            if not isinstance(t, Mapping) or not isinstance(t.get("text"), str):
                raise ValueError(f"malformed turn {t!r}")
            parsed.append(Turn(str(t.get("speaker", t.get("role"))), t["text"]))
        return cls(str(data.get("conversation_id", "")), tuple(parsed))

    def to_dict(self) -> dict[str, Any]:
        return {
            "conversation_id": self.conversation_id,
            "turns": [{"speaker": t.speaker, "text": t.text} for t in self.turns],
        }

    def last_user_turn(self) -> str:
        for t in reversed(self.turns):
            if t.speaker == "user":
                return t.text
        return self.turns[-1].text

    def as_text(self) -> str:
        return "\n".join(f"{t.speaker.capitalize()}: {t.text}" for t in self.turns)


@dataclass(frozen=True)
class CandidatePreference:
    path: CategoryPath
    value: str
    source_sentence: str
    conversation_id: str = ""
    sentence_fallback: bool = False

    def __post_init__(self) -> None:
        if not self.value.strip() or not self.source_sentence.strip():
            raise ValueError("candidate value and source sentence must be non-empty")


@dataclass
class ExtractionOutcome:
    candidates: list[CandidatePreference]
    structurally_valid: bool
    discarded_sentinel_count: int = 0
    raw_document: str = ""
    sp_overflow: int = 0
    sentence_fallbacks: int = 0
    problems: list[str] = field(default_factory=list)


_WS = re.compile(r"\s+")


def normalize_value(value: str) -> str:
    return _WS.sub(" ", value).strip()


class _Invalid(Exception):
    pass


def parse_arguments(
    raw: str, schema: CompiledSchema, transcript: ConversationTranscript
) -> ExtractionOutcome:
    """Validate a tool-call argument document against ``schema``.

    Any parse failure, unknown parameter name or wrong nesting makes the whole
    payload invalid and yields no candidates. Records are returned in document
    order.
    """
    try:
        doc = json.loads(raw) if raw.strip() else {}
    except json.JSONDecodeError as exc:
        return ExtractionOutcome([], False, raw_document=raw, problems=[f"unparseable: {exc.msg}"])
    out = ExtractionOutcome([], True, raw_document=raw)
    try:
        _walk(doc, schema, transcript, out)
    except _Invalid as exc:
        return ExtractionOutcome([], False, raw_document=raw, problems=[str(exc)])
    return out


def _object(value: Any, where: str) -> dict[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise _Invalid(f"{where}: expected an object, got {type(value).__name__}")
    return value


def _records(value: Any, where: str) -> list[dict[str, Any]]:
    if value is None:
        return []
    items = value if isinstance(value, list) else [value]
    for item in items:
        if not isinstance(item, dict):
            raise _Invalid(f"{where}: output record must be an object")
        extra = set(item) - {SENTENCE_FIELD, VALUE_FIELD}
        if extra:
            raise _Invalid(f"{where}: unknown record fields {sorted(extra)}")
        for key in (SENTENCE_FIELD, VALUE_FIELD):
            if item.get(key) is not None and not isinstance(item[key], str):
                raise _Invalid(f"{where}.{key}: expected a string")
    return [i for i in items if (i.get(VALUE_FIELD) or "").strip()]


def _sentinel_count(value: Any) -> int:
    # The slot is discarded anyway, so any non-empty content is accepted.
    if not value:
        return 0
    return len(value) if isinstance(value, list) else 1


def _walk(doc: Any, schema: CompiledSchema, transcript: ConversationTranscript, out: ExtractionOutcome) -> None:
    taxonomy = schema.taxonomy
    mains = {m.id: m for m in taxonomy.mains}
    for main_id, main_val in _object(doc, "arguments").items():
        if main_id not in mains:
            raise _Invalid(f"unknown parameter {main_id!r}")
        subs = {s.id: s for s in mains[main_id].subs}
        for sub_id, sub_val in _object(main_val, main_id).items():
            where = f"{main_id}.{sub_id}"
            if sub_id == SENTINEL:
                out.discarded_sentinel_count += _sentinel_count(sub_val)
                continue
            if sub_id not in subs:
                raise _Invalid(f"unknown parameter {where!r}")
            details = {d.id: d for d in subs[sub_id].details}
            for detail_id, detail_val in _object(sub_val, where).items():
                leaf = f"{where}.{detail_id}"
                if detail_id == SENTINEL:
                    out.discarded_sentinel_count += _sentinel_count(detail_val)
                    continue
                if detail_id not in details:
                    raise _Invalid(f"unknown parameter {leaf!r}")
                records = _records(detail_val, leaf)
                if details[detail_id].type is DetailType.SP and len(records) > 1:
                    out.sp_overflow += len(records) - 1
                    out.problems.append(f"{leaf}: {len(records)} records for an SP category, kept the first")
                    records = records[:1]
                path = CategoryPath(main_id, sub_id, detail_id)
                for rec in records:
                    out.candidates.append(_candidate(path, rec, transcript, out))


def _candidate(
    path: CategoryPath, rec: Mapping[str, Any], transcript: ConversationTranscript, out: ExtractionOutcome
) -> CandidatePreference:
    sentence = normalize_value(rec.get(SENTENCE_FIELD) or "")
    fallback = not sentence
    if fallback:
        sentence = transcript.last_user_turn().strip()
        out.sentence_fallbacks += 1
    return CandidatePreference(
        path=path,
        value=normalize_value(rec[VALUE_FIELD]),
        source_sentence=sentence,
        conversation_id=transcript.conversation_id,
        sentence_fallback=fallback,
    )


def extraction_request(transcript: ConversationTranscript, schema: CompiledSchema) -> ChatRequest:
    return ChatRequest(
        messages=[("system", SYSTEM_PROMPT), ("user", transcript.as_text())],
        tools=[schema.tool_definition()],
        tool_choice=schema.function_name,
        temperature=0.0,
        metadata={"task": "extraction", "conversation_id": transcript.conversation_id},
    )


def extract(transcript: ConversationTranscript, schema: CompiledSchema, gateway: Gateway) -> ExtractionOutcome:
    """Run the extraction tool call and keep only in-schema candidates.

    Gateway errors propagate. An empty extraction is a normal outcome.
    """
    calls = gateway.chat_with_tools(extraction_request(transcript, schema))
    calls = [c for c in calls if c.tool_name == schema.function_name]
    if not calls:
        return ExtractionOutcome([], False, problems=["no extraction tool call in response"])
    if len(calls) > 1:
        logger.info("%s: %d extraction calls, using the first", transcript.conversation_id, len(calls))
    outcome = parse_arguments(calls[0].arguments_document, schema, transcript)
    # Belt and braces: nothing outside the active taxonomy may leave this function.
    outcome.candidates = [c for c in outcome.candidates if validate_path(schema.taxonomy, c.path)]
    return outcome


class CountBucket(str, Enum):
    NONE = "no_extraction"
    ONE = "one_preference"
    MULTI = "multi_preference"


class SchemaMode(str, Enum):
    IN_SCHEMA = "in_schema"
    OUT_OF_SCHEMA = "out_of_schema"


@dataclass(frozen=True)
class OutcomeClass:
    bucket: CountBucket
    correct: bool
    over_extraction: bool = False
    spurious: int = 0
    duplicates: int = 0
    spillover: bool = False


def count_bucket(n: int) -> CountBucket:
    if n == 0:
        return CountBucket.NONE
    return CountBucket.ONE if n == 1 else CountBucket.MULTI


def classify_outcome(
    outcome: ExtractionOutcome,
    ground_truth: CandidatePreference | None,
    mode: SchemaMode = SchemaMode.IN_SCHEMA,
) -> OutcomeClass:
    """Bucket an outcome by candidate count and judge it against ground truth.

    In-schema: correct iff some candidate has the ground-truth 3-level path.
    Out-of-schema: correct iff no candidate sits under the ground truth's
    (excluded) sub-category; any other candidate is reported as spillover.
    Over-extraction means more candidates than expected (one in-schema, none
    out-of-schema). It is split into spurious paths (distinct wrong paths) and
    duplicates (candidates repeating an earlier candidate's path).
    """
    cands = outcome.candidates
    bucket = count_bucket(len(cands))
    seen: set[CategoryPath] = set()
    duplicates = 0
    for c in cands:
        if c.path in seen:
            duplicates += 1
        seen.add(c.path)
    if mode is SchemaMode.IN_SCHEMA:
        gt_path = ground_truth.path if ground_truth else None
        correct = gt_path in seen if gt_path else not cands
        spurious = sum(1 for p in seen if p != gt_path)
        return OutcomeClass(bucket, correct, len(cands) > 1, spurious, duplicates)
    excluded = ground_truth.path.prefix("sub") if ground_truth else None
    leaked = any(c.path.prefix("sub") == excluded for c in cands)
    return OutcomeClass(
        bucket,
        correct=not leaked,
        over_extraction=bool(cands),
        spurious=len(seen),
        duplicates=duplicates,
        spillover=bool(cands) and not leaked,
    )
