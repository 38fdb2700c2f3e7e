from __future__ import annotations

import json

import pytest

from prefmem.extraction import (
    CandidatePreference,
    ConversationTranscript,
    CountBucket,
    ExtractionOutcome,
    SchemaMode,
    Turn,
    classify_outcome,
    count_bucket,
    extract,
    extraction_request,
    normalize_value,
    parse_arguments,
)
from prefmem.llm_gateway import ChatRequest, ToolCall
from prefmem.taxonomy import SENTENCE_FIELD, SENTINEL, VALUE_FIELD, CategoryPath, compile_schema, opt_out

CUISINE = CategoryPath("points_of_interest", "restaurant", "favourite_cuisine")
PAYMENT = CategoryPath("points_of_interest", "restaurant", "preferred_payment_method")
GENRES = CategoryPath("entertainment_and_media", "music", "favourite_genres")


def convo(*user_lines: str, cid: str = "c1") -> ConversationTranscript:
    turns = []
    for line in user_lines:
        turns.append(Turn("assistant", "How can I help?"))
        turns.append(Turn("user", line))
    return ConversationTranscript(cid, tuple(turns))


def rec(value, sentence="I said so."):
    return {SENTENCE_FIELD: sentence, VALUE_FIELD: value}


def doc(path: CategoryPath, payload) -> str:
    return json.dumps({path.main: {path.sub: {path.detail: payload}}})


class ScriptedGateway:
    """Returns a fixed argument document for every chat call."""

    dimension = 8
    embedding_model = "none"

    def __init__(self, arguments: str, tool: str = "extract_user_preference"):
        self.arguments = arguments
        self.tool = tool
        self.requests: list[ChatRequest] = []

    def chat_with_tools(self, request):
        self.requests.append(request)
        return [ToolCall(self.tool, self.arguments)]

    def embed(self, text, model_id=None):  # pragma: no cover - not used here
        raise AssertionError


def test_mp_array_yields_one_candidate_per_record(schema):
    out = parse_arguments(doc(GENRES, [rec("Jazz"), rec("Rock")]), schema, convo("Jazz and rock."))
    assert out.structurally_valid
    assert [c.value for c in out.candidates] == ["Jazz", "Rock"]
    assert all(c.path == GENRES for c in out.candidates)


def test_sp_object_yields_one_candidate(schema):
    out = parse_arguments(doc(PAYMENT, rec("Card")), schema, convo("Card please."))
    assert [(c.path, c.value) for c in out.candidates] == [(PAYMENT, "Card")]


def test_sp_with_several_records_keeps_first_and_flags(schema):
    out = parse_arguments(doc(PAYMENT, [rec("Card"), rec("Cash")]), schema, convo("x"))
    assert [c.value for c in out.candidates] == ["Card"]
    assert out.sp_overflow == 1


def test_sentinel_content_is_discarded_and_counted(schema):
    raw = json.dumps(
        {
            "points_of_interest": {
                SENTINEL: [rec("likes sunsets")],
                "restaurant": {SENTINEL: [rec("a"), rec("b")], "favourite_cuisine": [rec("Thai")]},
            }
        }
    )
    out = parse_arguments(raw, schema, convo("Thai food."))
    assert [c.value for c in out.candidates] == ["Thai"]
    assert out.discarded_sentinel_count == 3


@pytest.mark.parametrize(
    "raw",
    [
        "{not json",
        json.dumps({"points_of_interest": {"restaurant": {"favourite_pizza": [rec("x")]}}}),
        json.dumps({"unknown_main": {}}),
        json.dumps({"points_of_interest": ["wrong nesting"]}),
        json.dumps({"points_of_interest": {"restaurant": {"favourite_cuisine": [{"value": "x"}]}}}),
        json.dumps({"points_of_interest": {"restaurant": {"favourite_cuisine": [{VALUE_FIELD: 3}]}}}),
    ],
)
def test_invalid_payloads_yield_nothing(schema, raw):
    out = parse_arguments(raw, schema, convo("x"))
    assert not out.structurally_valid
    assert out.candidates == []
    assert out.problems


def test_empty_document_is_valid_no_extraction(schema):
    out = parse_arguments("{}", schema, convo("Nothing to see."))
    assert out.structurally_valid and out.candidates == []


def test_missing_sentence_falls_back_to_last_user_turn(schema):
    out = parse_arguments(doc(CUISINE, [{VALUE_FIELD: "Italian"}]), schema, convo("Hello.", "Italian for me."))
    (cand,) = out.candidates
    assert cand.source_sentence == "Italian for me."
    assert cand.sentence_fallback
    assert out.sentence_fallbacks == 1


def test_blank_values_are_dropped(schema):
    out = parse_arguments(doc(GENRES, [rec("  "), rec("Jazz")]), schema, convo("x"))
    assert [c.value for c in out.candidates] == ["Jazz"]


def test_normalize_value_collapses_whitespace_only():
    assert normalize_value("  Tesla   Supercharger \n") == "Tesla Supercharger"
    assert normalize_value("ItAlIaN") == "ItAlIaN"


def test_request_forces_tool_at_zero_temperature(schema):
    req = extraction_request(convo("x", cid="abc"), schema)
    assert req.tool_choice == "extract_user_preference"
    assert req.temperature == 0.0
    assert req.metadata["conversation_id"] == "abc"
    assert req.tools[0] == schema.tool_definition()


def test_extract_drops_paths_outside_the_active_schema(taxonomy):
    reduced = compile_schema(opt_out(taxonomy, ["restaurant"]))
    gw = ScriptedGateway(doc(CUISINE, [rec("Italian")]))
    out = extract(convo("Italian."), reduced, gw)
    # The restaurant sub no longer exists in the reduced schema: invalid payload, nothing kept.
    assert out.candidates == []
    assert not out.structurally_valid


def test_extract_without_tool_call_is_invalid(schema):
    gw = ScriptedGateway("{}", tool="something_else")
    out = extract(convo("x"), schema, gw)
    assert not out.structurally_valid and out.candidates == []


def test_mock_extracts_fixture_ground_truth(corpus, schema, gateway):
    for p in corpus.points:
        out = extract(p.extraction_conversation, schema, gateway)
        assert [(c.path, c.value) for c in out.candidates] == [(p.ground_truth.path, p.ground_truth.value)]


def test_transcript_validation():
    with pytest.raises(ValueError):
        ConversationTranscript("x", ())
    with pytest.raises(ValueError):
        ConversationTranscript("x", (Turn("system", "hi"),))
    with pytest.raises(ValueError):
        ConversationTranscript.from_dict({"turns": "nope"})
    t = ConversationTranscript.from_dict({"conversation_id": "a", "turns": [{"role": "user", "text": "hi"}]})
    assert t.to_dict() == {"conversation_id": "a", "turns": [{"speaker": "user", "text": "hi"}]}


@pytest.mark.parametrize("n, bucket", [(0, CountBucket.NONE), (1, CountBucket.ONE), (2, CountBucket.MULTI), (7, CountBucket.MULTI)])
def test_count_bucket(n, bucket):
    assert count_bucket(n) is bucket


def _outcome(*paths):
    return ExtractionOutcome([CandidatePreference(p, "v", "s") for p in paths], True)


TRUTH = CandidatePreference(CUISINE, "Italian", "Italian please.")
SIBLING = CategoryPath("points_of_interest", "gas_station", "preferred_gas_station")


def test_in_schema_classification():
    c = classify_outcome(_outcome(CUISINE), TRUTH)
    assert c.correct and not c.over_extraction and c.spurious == 0
    c = classify_outcome(_outcome(CUISINE, PAYMENT, CUISINE), TRUTH)
    assert c.correct and c.over_extraction and c.spurious == 1 and c.duplicates == 1
    assert not classify_outcome(_outcome(), TRUTH).correct
    assert not classify_outcome(_outcome(PAYMENT), TRUTH).correct


def test_out_of_schema_sibling_is_correct_but_spillover():
    c = classify_outcome(_outcome(SIBLING), TRUTH, SchemaMode.OUT_OF_SCHEMA)
    assert c.correct and c.spillover and c.over_extraction
    c = classify_outcome(_outcome(), TRUTH, SchemaMode.OUT_OF_SCHEMA)
    assert c.correct and not c.spillover
    c = classify_outcome(_outcome(PAYMENT), TRUTH, SchemaMode.OUT_OF_SCHEMA)
    assert not c.correct and not c.spillover
