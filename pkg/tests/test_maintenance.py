from __future__ import annotations

import json

import pytest

from prefmem.extraction import CandidatePreference
from prefmem.llm_gateway import MockGateway, ToolCall
from prefmem.maintenance import Action, Maintainer, MaintenanceDecision, expected_action, maintenance_tools
from prefmem.prefstore import PreferenceStore
from prefmem.retrieval import EmbeddingMode, embed_preference
from prefmem.taxonomy import CategoryPath, DetailType

GENRES = CategoryPath("entertainment_and_media", "music", "favourite_genres")  # MP
SERVICE = CategoryPath("entertainment_and_media", "music", "preferred_music_streaming_service")  # SP


def cand(path, value, sentence=None):
    return CandidatePreference(path, value, sentence or f"I like {value}.", "c")


def seed(store, gateway, taxonomy, user, *cands):
    return [store.insert(user, c, embed_preference(gateway, taxonomy, c)) for c in cands]


class Scripted(MockGateway):
    """Mock whose maintenance answer is fixed by the test."""

    def __init__(self, call: ToolCall):
        super().__init__()
        self.call = call
        self.seen_tools: list[list[str]] = []

    def chat_with_tools(self, request):
        self.chat_calls += 1
        self.seen_tools.append(request.tool_names())
        return [self.call]


@pytest.mark.parametrize(
    "kind, dtype, action",
    [
        ("equal", DetailType.MP, Action.PASS),
        ("equal", DetailType.SP, Action.PASS),
        ("negate", DetailType.MP, Action.UPDATE),
        ("negate", DetailType.SP, Action.UPDATE),
        ("different", DetailType.MP, Action.APPEND),
        ("different", DetailType.SP, Action.UPDATE),
    ],
)
def test_expected_action_mapping(kind, dtype, action):
    assert expected_action(kind, dtype) is action


def test_expected_action_rejects_unknown_type():
    with pytest.raises(ValueError):
        expected_action("similar", DetailType.MP)


def test_append_withheld_for_filled_sp(memory_store, gateway, taxonomy):
    (p,) = seed(memory_store, gateway, taxonomy, "u", cand(SERVICE, "SonicStream"))
    names = lambda tools: [t["function"]["name"] for t in tools]
    assert names(maintenance_tools(DetailType.SP, [p])) == ["pass", "update"]
    assert names(maintenance_tools(DetailType.MP, [p])) == ["pass", "update", "append"]
    assert names(maintenance_tools(DetailType.SP, [])) == ["pass", "update", "append"]
    ref = maintenance_tools(DetailType.SP, [p])[0]["function"]["parameters"]["properties"]["existing_preference_id"]
    assert ref["enum"] == [p.id]


def test_empty_context_appends_without_model_call(taxonomy):
    gw = MockGateway()
    d = Maintainer(gw, taxonomy).decide(cand(GENRES, "Jazz"), [])
    assert d.action is Action.APPEND and not d.model_called
    assert gw.chat_calls == 0


def test_decision_invariant():
    with pytest.raises(ValueError):
        MaintenanceDecision(Action.APPEND, "some-id")
    with pytest.raises(ValueError):
        MaintenanceDecision(Action.UPDATE, None)


def test_context_must_share_detail_category(memory_store, gateway, taxonomy):
    (p,) = seed(memory_store, gateway, taxonomy, "u", cand(GENRES, "Jazz"))
    with pytest.raises(ValueError):
        Maintainer(gateway, taxonomy).decide(cand(SERVICE, "X"), [p])


def test_fixture_decisions_follow_mapping(corpus, gateway, taxonomy):
    m = Maintainer(gateway, taxonomy)
    for point in corpus.points:
        store = PreferenceStore(None, taxonomy, gateway.dimension)
        seed(store, gateway, taxonomy, point.user_id, point.ground_truth)
        dtype = taxonomy.detail(point.ground_truth.path).type
        for kind in ("equal", "negate", "different"):
            truth = point.maintenance_truth(kind)
            d = m.decide(truth, store.by_detail_category(point.user_id, truth.path))
            assert d.action is expected_action(kind, dtype), (point.point_id, kind)


def test_disabled_append_on_sp_falls_back_to_update(memory_store, taxonomy):
    gw = Scripted(ToolCall("append", "{}"))
    (p,) = seed(memory_store, gw, taxonomy, "u", cand(SERVICE, "SonicStream"))
    d = Maintainer(gw, taxonomy).decide(cand(SERVICE, "WaveTunes"), [p])
    assert d.action is Action.UPDATE and d.existing_id == p.id
    assert "append" in d.protocol_violation
    assert gw.seen_tools == [["pass", "update"]]


@pytest.mark.parametrize(
    "call",
    [
        ToolCall("update", json.dumps({"existing_preference_id": "nope"})),
        ToolCall("pass", "{broken"),
        ToolCall("delete_everything", "{}"),
    ],
)
def test_protocol_violations_on_mp_fall_back_to_append(memory_store, taxonomy, call):
    gw = Scripted(call)
    (p,) = seed(memory_store, gw, taxonomy, "u", cand(GENRES, "Jazz"))
    d = Maintainer(gw, taxonomy).decide(cand(GENRES, "Rock"), [p])
    assert d.action is Action.APPEND and d.protocol_violation


def test_reason_is_kept(memory_store, taxonomy):
    gw = Scripted(ToolCall("pass", ""))
    (p,) = seed(memory_store, gw, taxonomy, "u", cand(GENRES, "Jazz"))
    gw.call = ToolCall("pass", json.dumps({"existing_preference_id": p.id, "reason": "same genre"}))
    d = Maintainer(gw, taxonomy).decide(cand(GENRES, "jazz"), [p])
    assert (d.action, d.existing_id, d.rationale_text) == (Action.PASS, p.id, "same genre")


def test_ingest_is_sequential_within_a_batch(memory_store, gateway, taxonomy):
    m = Maintainer(gateway, taxonomy)
    records = m.ingest("u", [cand(GENRES, "Jazz"), cand(GENRES, "Jazz"), cand(GENRES, "not Jazz")], memory_store)
    assert [r.decision.action for r in records] == [Action.APPEND, Action.PASS, Action.UPDATE]
    assert [p.value for p in memory_store.by_detail_category("u", GENRES)] == ["not Jazz"]
    assert records[2].deleted_ids == records[0].inserted_ids


def test_sp_update_replaces_and_embeds_enriched_text(memory_store, gateway, taxonomy):
    m = Maintainer(gateway, taxonomy)
    m.ingest("u", [cand(SERVICE, "SonicStream"), cand(SERVICE, "WaveTunes")], memory_store)
    (p,) = memory_store.by_detail_category("u", SERVICE)
    assert p.value == "WaveTunes"
    assert p.embedding == embed_preference(gateway, taxonomy, p, EmbeddingMode.ENRICHED)


class Vanishing(MockGateway):
    """Deletes the referenced preference while 'thinking', once."""

    def __init__(self, store, user):
        super().__init__()
        self.store, self.user, self.done = store, user, False

    def chat_with_tools(self, request):
        (call,) = super().chat_with_tools(request)
        if not self.done:
            self.done = True
            self.store.delete(self.user, json.loads(request.messages[-1][1])["existing_preferences"][0]["id"])
        return [call]


def test_conflict_is_retried_against_fresh_state(taxonomy):
    store = PreferenceStore(None, taxonomy, 256)
    gw = Vanishing(store, "u")
    m = Maintainer(gw, taxonomy)
    seed(store, gw, taxonomy, "u", cand(SERVICE, "SonicStream"))
    (rec,) = m.ingest("u", [cand(SERVICE, "not SonicStream")], store)
    assert rec.error is None
    assert rec.decision.action is Action.APPEND
    assert [p.value for p in store.by_detail_category("u", SERVICE)] == ["not SonicStream"]


def test_conflicts_exhausting_retries_are_reported(taxonomy, gateway):
    class ForgetfulStore(PreferenceStore):
        def get(self, user_id, pref_id):
            return None  # every pass finds its reference gone

    store = ForgetfulStore(None, taxonomy, gateway.dimension)
    seed(store, gateway, taxonomy, "u", cand(GENRES, "Jazz"))
    (rec,) = Maintainer(gateway, taxonomy, conflict_retries=2).ingest("u", [cand(GENRES, "Jazz")], store)
    assert rec.decision is None
    assert rec.error_kind == "conflict"
