from __future__ import annotations

import json

import numpy as np
import pytest

from prefmem.dataset import mock_records
from prefmem.evaluation import (
    NPL,
    NTL,
    ConfusionMatrix,
    EvalReport,
    Harness,
    ReportSectionMissing,
    _maintenance_summary,
    level_counts,
    micro_prf,
    prf_from_counts,
    render_report,
)
from prefmem.llm_gateway import MockGateway, MockRecord
from prefmem.selftest import golden_dir
from prefmem.taxonomy import CategoryPath

A = CategoryPath("m1", "s1", "d1")
B = CategoryPath("m1", "s1", "d2")
C = CategoryPath("m1", "s2", "d3")
D = CategoryPath("m2", "s3", "d4")


def test_prf_hand_example():
    prf = prf_from_counts(3, 1, 2)
    assert prf.precision == 0.75
    assert prf.recall == 0.6
    assert prf.f1 == pytest.approx(2 / 3)
    assert prf_from_counts(0, 0, 0).f1 == 0.0


def test_level_counts_hand_example():
    items = [
        ([A], A),  # TP at every level
        ([B], A),  # detail FP+FN, sub and main TP
        ([C, D], A),  # main: C TP, D FP; sub: FP FP FN
        ([], A),  # FN everywhere
        ([D], None),  # FP everywhere, no FN
    ]
    assert level_counts(items, "detail") == (1, 4, 3)
    assert level_counts(items, "sub") == (2, 3, 2)
    assert level_counts(items, "main") == (3, 2, 1)
    prf = micro_prf(items, "sub", 11)
    assert (prf.tp, prf.fp, prf.fn, prf.category_count) == (2, 3, 2, 11)
    assert prf.f1 == pytest.approx(4 / 9)


def test_confusion_matrix_cases():
    labels = ["a", "b", "c"]
    cm = ConfusionMatrix.build(
        labels,
        [
            ({"a"}, {"a"}),  # hit
            ({"a"}, set()),  # missed entirely -> NPL
            (set(), {"b"}),  # no true label -> NTL row
            ({"a"}, {"c"}),  # confusion a -> c
            ({"b"}, {"b", "c"}),  # hit plus extra charged to the hit
        ],
    )
    rows = labels + [NTL]
    cols = labels + [NPL]
    get = lambda t, p: int(cm.counts[rows.index(t), cols.index(p)])
    assert get("a", "a") == 1 and get("a", NPL) == 1 and get("a", "c") == 1
    assert get(NTL, "b") == 1
    assert get("b", "b") == 1 and get("b", "c") == 1
    assert cm.counts.sum() == 6
    norm = cm.normalized()
    sums = norm.sum(axis=1)
    for i, row in enumerate(cm.counts):
        assert sums[i] == pytest.approx(1.0 if row.sum() else 0.0)
    assert norm[rows.index("a"), cols.index("a")] == pytest.approx(1 / 3)
    d = cm.to_dict()
    assert ["a", NPL, 1] in d["cells"] and len(d["cells"]) == 6


def _published_counts():
    # Proportions and row sizes of the published maintenance results, as fractional counts.
    table = {
        "MP": {"equal": (159, (0.86, 0.03, 0.11)), "negate": (143, (0.00, 0.87, 0.13)), "different": (159, (0.03, 0.04, 0.92))},
        "SP": {"equal": (192, (0.68, 0.32, 0.0)), "negate": (160, (0.02, 0.99, 0.0)), "different": (192, (0.01, 0.99, 0.0))},
    }
    return {
        d: {k: {"pass": n * p[0], "update": n * p[1], "append": n * p[2]} for k, (n, p) in rows.items()}
        for d, rows in table.items()
    }


def test_derived_rates_reproduce_published_summary():
    counts = _published_counts()
    m = _maintenance_summary(counts, 0, 0, [])
    assert round(100 * m.redundant_reduction) == 95
    assert round(100 * m.contradiction_reduction) == 93
    assert round(100 * m.lost_by_pass) == 2
    assert round(100 * m.mp_wrong_append) == 12
    equal_pass = (counts["MP"]["equal"]["pass"] + counts["SP"]["equal"]["pass"]) / (159 + 192)
    assert round(100 * equal_pass) == 76


def test_summary_counts_and_accuracies():
    counts = {
        "MP": {"equal": {"pass": 3, "update": 1, "append": 0}, "negate": {"pass": 0, "update": 2, "append": 0}, "different": {"pass": 0, "update": 0, "append": 2}},
        "SP": {"equal": {"pass": 1, "update": 1, "append": 0}, "negate": {"pass": 0, "update": 2, "append": 0}, "different": {"pass": 1, "update": 1, "append": 0}},
    }
    m = _maintenance_summary(counts, 1, 2, [])
    # 14 decisions; correct 3+2+2+1+2+1 = 11; end state adds the 2 equal updates.
    assert m.raw_accuracy == pytest.approx(11 / 14)
    assert m.end_state_accuracy == pytest.approx(13 / 14)
    assert m.redundant_reduction == pytest.approx(6 / 6)
    assert m.lost_by_pass == pytest.approx(1 / 8)
    assert m.distribution()["SP"]["different"] == {"pass": 0.5, "update": 0.5, "append": 0.0}


@pytest.fixture(scope="module")
def full_report(corpus, taxonomy):
    gw = MockGateway(mock_records(corpus.points))
    return Harness(gw, taxonomy).run(corpus.points, ["in-schema", "out-of-schema", "maintenance", "retrieval"])


def test_mock_in_schema_is_perfect(full_report):
    sec = full_report.in_schema
    assert sec.histogram == {"no": 0, "one": 20, "two_plus": 0}
    assert sum(sec.histogram.values()) == sec.n_points
    assert {lvl: prf.f1 for lvl, prf in sec.per_level.items()} == {"main": 1.0, "sub": 1.0, "detail": 1.0}
    assert [p.category_count for p in sec.per_level.values()] == [4, 11, 41]


def test_mock_out_of_schema_extracts_nothing(full_report):
    sec = full_report.out_of_schema
    assert sec.histogram["no"] == 20 and sec.correct_rate == 1.0 and sec.spillover == 0
    assert sec.confusion.counts[:, -1].sum() == 20


def test_sp_never_appends(full_report):
    m = full_report.maintenance
    assert sum(row["append"] for row in m.counts["SP"].values()) == 0
    assert m.raw_accuracy == 1.0 and m.protocol_violations == 0


def test_retrieval_fixture_figures(full_report):
    r = full_report.retrieval
    # Hand-derived from the fixture's users and sub-categories.
    assert r.avg_store_size == pytest.approx(134 / 20)
    assert r.avg_n == pytest.approx(24 / 20)
    assert r.n_queries == 20
    for acc in r.accuracy.values():
        assert acc[0] <= acc[1] <= acc[2]


def test_rendering_is_deterministic_and_matches_golden(full_report):
    for fmt, name in (("table", "report.txt"), ("json", "report.json"), ("matrix", "matrix.txt")):
        text = render_report(full_report, fmt)
        assert text == render_report(full_report, fmt)
        assert text == (golden_dir() / name).read_text(encoding="utf-8")
    json.loads(render_report(full_report, "json"))


def test_missing_sections_raise(full_report):
    with pytest.raises(ReportSectionMissing):
        render_report(EvalReport(), "table")
    only = EvalReport(retrieval=full_report.retrieval)
    with pytest.raises(ReportSectionMissing):
        only.section("maintenance")
    with pytest.raises(ReportSectionMissing):
        render_report(only, "table", ["in_schema"])
    with pytest.raises(ReportSectionMissing):
        render_report(only, "matrix")
    with pytest.raises(ValueError):
        render_report(only, "html")


def test_workers_do_not_change_results(corpus, taxonomy):
    names = ["in-schema", "out-of-schema", "maintenance", "retrieval"]
    one = Harness(MockGateway(mock_records(corpus.points)), taxonomy, workers=1).run(corpus.points, names)
    four = Harness(MockGateway(mock_records(corpus.points)), taxonomy, workers=4).run(corpus.points, names)
    assert render_report(one, "json") == render_report(four, "json")


def test_out_of_schema_spillover_is_reported(corpus, taxonomy):
    records = mock_records(corpus.points)
    p = corpus.points[0]
    other = next(q for q in corpus.points if q.ground_truth.path.sub != p.ground_truth.path.sub)
    og = other.ground_truth
    records[p.point_id] = records[p.point_id] + [MockRecord((og.path.main, og.path.sub, og.path.detail), og.value, og.source_sentence)]
    sec = Harness(MockGateway(records), taxonomy).run_out_of_schema([p])
    assert sec.spillover == 1 and sec.correct_rate == 1.0 and sec.histogram["one"] == 1
    ins = Harness(MockGateway(records), taxonomy).run_in_schema([p])
    assert ins.spurious == 1 and ins.histogram["two_plus"] == 1


def test_unknown_experiment(corpus, taxonomy, gateway):
    with pytest.raises(ValueError):
        Harness(gateway, taxonomy).run(corpus.points, ["nope"])
