"""Benchmark harness: extraction (in/out of schema), maintenance and retrieval experiments."""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

from .dataset import MAINTENANCE_TYPES, DataPoint
from .extraction import (
    CandidatePreference,
    CountBucket,
    ExtractionOutcome,
    SchemaMode,
    classify_outcome,
    extract,
)
from .llm_gateway import Gateway, GatewayError
from .maintenance import Action, Maintainer, expected_action
from .prefstore import PreferenceStore
from .retrieval import EmbeddingMode, RetrievalQuery, embed_preference, retrieve, topk_accuracy
from .taxonomy import LEVELS, CategoryPath, CategoryTaxonomy, DetailType, compile_schema, opt_out

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

NTL = "NTL"  # row: no true label
NPL = "NPL"  # column: no predicted label
OFFSETS = (0, 1, 2)


class ReportSectionMissing(LookupError):
    pass


# -- metrics ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    category_count: int
    tp: int
    fp: int
    fn: int


def level_counts(
    items: Iterable[tuple[Sequence[CategoryPath], CategoryPath | None]], level: str
) -> tuple[int, int, int]:
    """Micro TP/FP/FN at one taxonomy level.

    Each extracted candidate is one decision: TP if its path prefix at
    ``level`` equals the ground truth's, else FP. A point whose ground truth
    has no matching candidate at that level adds one FN.
    """
    tp = fp = fn = 0
    for predicted, truth in items:
        want = truth.prefix(level) if truth is not None else None
        hits = sum(1 for p in predicted if p.prefix(level) == want)
        tp += hits
        fp += len(predicted) - hits
        if want is not None and hits == 0:
            fn += 1
    return tp, fp, fn


def prf_from_counts(tp: int, fp: int, fn: int, category_count: int = 0) -> PRF:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2TP / (2TP + FP + FN) is the harmonic mean of P and R without the
    # intermediate rounding of computing P and R first.
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    return PRF(precision, recall, f1, category_count, tp, fp, fn)


def micro_prf(
    items: Sequence[tuple[Sequence[CategoryPath], CategoryPath | None]],
    level: str,
    category_count: int = 0,
) -> PRF:
    return prf_from_counts(*level_counts(items, level), category_count)


@dataclass
class ConfusionMatrix:
    """Multi-label confusion matrix with a no-true-label row and no-predicted-label column."""

    labels: list[str]
    counts: np.ndarray

    @classmethod
    def build(cls, labels: Sequence[str], pairs: Iterable[tuple[set[str], set[str]]]) -> ConfusionMatrix:
        rows = list(labels) + [NTL]
        cols = list(labels) + [NPL]
        r_idx = {l: i for i, l in enumerate(rows)}
        c_idx = {l: i for i, l in enumerate(cols)}
        m = np.zeros((len(rows), len(cols)), dtype=np.int64)
        for true, pred in pairs:
            true = set(true)
            pred = set(pred)
            hit = true & pred
            missed = true - pred
            extra = pred - true
            for t in hit:
                m[r_idx[t], c_idx[t]] += 1
            if not pred:
                for t in true:
                    m[r_idx[t], c_idx[NPL]] += 1
            elif not true:
                for p in pred:
                    m[r_idx[NTL], c_idx[p]] += 1
            else:
                # Extra predictions are charged to the missed labels when there
                # are any, otherwise to the correctly predicted ones.
                sources = missed or hit
                for t in sources:
                    for p in extra:
                        m[r_idx[t], c_idx[p]] += 1
                if missed and not extra:
                    for t in missed:
                        m[r_idx[t], c_idx[NPL]] += 1
        return cls(list(labels), m)

    def normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, self.counts / np.where(sums == 0, 1, sums), 0.0)
        return out

    def to_dict(self) -> dict[str, Any]:
        """Labels plus the non-zero cells as ``[true, predicted, count]`` triples."""
        rows = self.labels + [NTL]
        cols = self.labels + [NPL]
        cells = [[rows[i], cols[j], int(self.counts[i, j])] for i, j in zip(*np.nonzero(self.counts))]
        return {"labels": self.labels, "cells": cells}


# -- report -------------------------------------------------------------------------------


@dataclass
class ExtractionSection:
    mode: str
    n_points: int
    histogram: dict[str, int]
    validity_rate: float
    correct_rate: float
    spurious: int
    duplicates: int
    spillover: int
    per_level: dict[str, PRF] = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None
    failures: list[str] = field(default_factory=list)

    def fractions(self) -> dict[str, float]:
        return {k: v / self.n_points if self.n_points else 0.0 for k, v in self.histogram.items()}


@dataclass
class MaintenanceSection:
    counts: dict[str, dict[str, dict[str, int]]]
    raw_accuracy: float
    end_state_accuracy: float
    redundant_reduction: float
    contradiction_reduction: float
    lost_by_pass: float
    mp_wrong_append: float
    protocol_violations: int
    skipped: int
    failures: list[str] = field(default_factory=list)

    def distribution(self) -> dict[str, dict[str, dict[str, float]]]:
        out: dict[str, dict[str, dict[str, float]]] = {}
        for dtype, rows in self.counts.items():
            out[dtype] = {}
            for kind, row in rows.items():
                total = sum(row.values())
                out[dtype][kind] = {a: (c / total if total else 0.0) for a, c in row.items()}
        return out


@dataclass
class RetrievalSection:
    accuracy: dict[str, dict[int, float]]
    avg_n: float
    avg_store_size: float
    n_queries: int
    skipped: int
    failures: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    in_schema: ExtractionSection | None = None
    out_of_schema: ExtractionSection | None = None
    maintenance: MaintenanceSection | None = None
    retrieval: RetrievalSection | None = None

    def section(self, name: str):
        value = getattr(self, name, None)
        if value is None:
            raise ReportSectionMissing(f"report has no {name!r} section")
        return value

    def sections(self) -> list[str]:
        return [n for n in ("in_schema", "out_of_schema", "maintenance", "retrieval") if getattr(self, n) is not None]


# -- harness ------------------------------------------------------------------------------


def _fixed_clock(start: datetime = datetime(2024, 1, 1, tzinfo=timezone.utc)) -> Callable[[], datetime]:
    ticks = itertools.count()
    return lambda: start + timedelta(seconds=next(ticks))


def _counter_ids(prefix: str = "pref") -> Callable[[], str]:
    ticks = itertools.count(1)
    return lambda: f"{prefix}-{next(ticks):06d}"


def perfect(outcome: ExtractionOutcome, truth: CandidatePreference) -> bool:
    """Exactly one candidate, on the ground-truth path at all three levels."""
    return len(outcome.candidates) == 1 and outcome.candidates[0].path == truth.path


class Harness:
    """Runs experiments over data points with one gateway.

    Extraction outcomes on the full schema are cached by conversation id so
    the maintenance and retrieval experiments reuse them.
    """

    def __init__(self, gateway: Gateway, taxonomy: CategoryTaxonomy, *, workers: int = 1):
        self.gateway = gateway
        self.taxonomy = taxonomy
        self.schema = compile_schema(taxonomy)
        self.workers = max(1, workers)
        self._cache: dict[str, ExtractionOutcome] = {}

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self.workers == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def _extract_full(self, transcript) -> ExtractionOutcome:
        cached = self._cache.get(transcript.conversation_id)
        if cached is None:
            cached = extract(transcript, self.schema, self.gateway)
            self._cache[transcript.conversation_id] = cached
        return cached

    # extraction ---------------------------------------------------------------------

    def run_in_schema(self, points: Sequence[DataPoint]) -> ExtractionSection:
        def one(p: DataPoint):
            try:
                return self._extract_full(p.extraction_conversation), None
            except GatewayError as exc:
                return None, f"{p.point_id}: {exc}"

        results = self._map(one, points)
        return self._section(SchemaMode.IN_SCHEMA, points, results)

    def run_out_of_schema(self, points: Sequence[DataPoint]) -> ExtractionSection:
        schemas: dict[str, Any] = {}

        def one(p: DataPoint):
            sub = p.ground_truth.path.sub
            if sub not in schemas:
                schemas[sub] = compile_schema(opt_out(self.taxonomy, [sub]))
            try:
                return extract(p.extraction_conversation, schemas[sub], self.gateway), None
            except GatewayError as exc:
                return None, f"{p.point_id}: {exc}"

        results = self._map(one, points)
        return self._section(SchemaMode.OUT_OF_SCHEMA, points, results)

    def _section(self, mode: SchemaMode, points, results) -> ExtractionSection:
        hist = {"no": 0, "one": 0, "two_plus": 0}
        key = {CountBucket.NONE: "no", CountBucket.ONE: "one", CountBucket.MULTI: "two_plus"}
        valid = correct = spurious = duplicates = spill = 0
        failures = []
        items = []
        pairs = []
        level = "detail" if mode is SchemaMode.IN_SCHEMA else "sub"
        evaluated = 0
        for p, (outcome, err) in zip(points, results):
            if outcome is None:
                failures.append(err)
                continue
            evaluated += 1
            cls = classify_outcome(outcome, p.ground_truth, mode)
            hist[key[cls.bucket]] += 1
            valid += outcome.structurally_valid
            correct += cls.correct
            spurious += cls.spurious
            duplicates += cls.duplicates
            spill += cls.spillover
            if not outcome.structurally_valid:
                logger.info("%s: invalid structured output: %s", p.point_id, outcome.problems)
            if cls.spillover:
                logger.info("%s: spillover into %s", p.point_id, [str(c.path) for c in outcome.candidates])
            paths = [c.path for c in outcome.candidates]
            items.append((paths, p.ground_truth.path))
            pairs.append(({_label(p.ground_truth.path, level)}, {_label(c, level) for c in paths}))
        per_level = {}
        if mode is SchemaMode.IN_SCHEMA:
            counts = dict(zip(LEVELS, self.taxonomy.counts()))
            per_level = {lvl: micro_prf(items, lvl, counts[lvl]) for lvl in LEVELS}
        if level == "detail":
            labels = [_label(path, level) for path in self.taxonomy.paths()]
        else:
            labels = [f"{m.id}/{s.id}" for m, s in self.taxonomy.subs()]
        return ExtractionSection(
            mode=mode.value,
            n_points=evaluated,
            histogram=hist,
            validity_rate=valid / evaluated if evaluated else 0.0,
            correct_rate=correct / evaluated if evaluated else 0.0,
            spurious=spurious,
            duplicates=duplicates,
            spillover=spill,
            per_level=per_level,
            confusion=ConfusionMatrix.build(labels, pairs),
            failures=failures,
        )

    # store priming -------------------------------------------------------------------

    def prime(self, points: Sequence[DataPoint]) -> tuple[PreferenceStore, dict[str, str]]:
        """Insert every perfectly extracted preference; returns the store and point_id -> pref id."""
        store = PreferenceStore(
            None, self.taxonomy, self.gateway.dimension, clock=_fixed_clock(), id_factory=_counter_ids()
        )
        ids: dict[str, str] = {}
        for p in points:
            try:
                outcome = self._extract_full(p.extraction_conversation)
            except GatewayError as exc:
                logger.warning("%s: extraction failed while priming: %s", p.point_id, exc)
                continue
            if not perfect(outcome, p.ground_truth):
                continue
            cand = outcome.candidates[0]
            emb = embed_preference(self.gateway, self.taxonomy, cand, EmbeddingMode.ENRICHED)
            ids[p.point_id] = store.insert(p.user_id, cand, emb).id
        return store, ids

    # maintenance ---------------------------------------------------------------------

    def run_maintenance(self, points: Sequence[DataPoint]) -> MaintenanceSection:
        store, ids = self.prime(points)
        maintainer = Maintainer(self.gateway, self.taxonomy)
        jobs = [(p, kind) for p in points if p.point_id in ids for kind in MAINTENANCE_TYPES]
        skipped = (len(points) - len(ids)) * len(MAINTENANCE_TYPES)

        def one(job):
            p, kind = job
            try:
                outcome = self._extract_full(p.maintenance_transcript(kind))
            except GatewayError as exc:
                return None, f"{p.point_id}/{kind}: {exc}"
            if not perfect(outcome, p.maintenance_truth(kind)):
                return None, None
            cand = outcome.candidates[0]
            existing = store.by_detail_category(p.user_id, cand.path)
            try:
                return maintainer.decide(cand, existing), None
            except GatewayError as exc:
                return None, f"{p.point_id}/{kind}: {exc}"

        results = self._map(one, jobs)
        counts = {
            t.value: {k: {a.value: 0 for a in Action} for k in MAINTENANCE_TYPES} for t in DetailType
        }
        failures = []
        violations = 0
        for (p, kind), (decision, err) in zip(jobs, results):
            if decision is None:
                skipped += 1
                if err:
                    failures.append(err)
                continue
            dtype = self.taxonomy.detail(p.ground_truth.path).type
            counts[dtype.value][kind][decision.action.value] += 1
            violations += decision.protocol_violation is not None
        return _maintenance_summary(counts, violations, skipped, failures)

    # retrieval ----------------------------------------------------------------------

    def run_retrieval(self, points: Sequence[DataPoint]) -> RetrievalSection:
        store, ids = self.prime(points)
        sentence_vecs = {}
        for user in store.users():
            for pref in store.snapshot(user).preferences:
                sentence_vecs[pref.id] = embed_preference(self.gateway, self.taxonomy, pref, EmbeddingMode.SENTENCE_ONLY)
        gated = [p for p in points if p.point_id in ids]

        def one(p: DataPoint):
            snap = store.snapshot(p.user_id)
            n = snap.count_by_subcategory(p.ground_truth.path.sub)
            q = RetrievalQuery(p.user_id, p.retrieval_utterance, len(snap))
            try:
                enriched = [r.preference.id for r in retrieve(q, snap, self.gateway)]
                sentence = [r.preference.id for r in retrieve(q, snap, self.gateway, embeddings=sentence_vecs)]
            except GatewayError as exc:
                return None, f"{p.point_id}: {exc}"
            return (n, len(snap), enriched, sentence), None

        results = self._map(one, gated)
        rows = [r for r, _ in results if r is not None]
        failures = [e for r, e in results if r is None]
        truth = [ids[p.point_id] for p, (r, _) in zip(gated, results) if r is not None]
        ns = [r[0] for r in rows]
        accuracy = {
            EmbeddingMode.SENTENCE_ONLY.value: topk_accuracy([r[3] for r in rows], truth, ns, OFFSETS),
            EmbeddingMode.ENRICHED.value: topk_accuracy([r[2] for r in rows], truth, ns, OFFSETS),
        }
        return RetrievalSection(
            accuracy=accuracy,
            avg_n=float(np.mean(ns)) if ns else 0.0,
            avg_store_size=float(np.mean([r[1] for r in rows])) if rows else 0.0,
            n_queries=len(rows),
            skipped=len(points) - len(rows),
            failures=failures,
        )

    def run(self, points: Sequence[DataPoint], experiments: Iterable[str]) -> EvalReport:
        report = EvalReport()
        for name in experiments:
            if name == "in-schema":
                report.in_schema = self.run_in_schema(points)
            elif name == "out-of-schema":
                report.out_of_schema = self.run_out_of_schema(points)
            elif name == "maintenance":
                report.maintenance = self.run_maintenance(points)
            elif name == "retrieval":
                report.retrieval = self.run_retrieval(points)
            else:
                raise ValueError(f"unknown experiment {name!r}")
        return report


EXPERIMENTS = ("in-schema", "out-of-schema", "maintenance", "retrieval")


def _label(path: CategoryPath, level: str) -> str:
    return "/".join(path.prefix(level))


def _maintenance_summary(
    counts: dict[str, dict[str, dict[str, int]]], violations: int, skipped: int, failures: list[str]
) -> MaintenanceSection:
    """Accuracy figures from raw decision counts (rows: detail type x utterance type)."""
    total = correct = end_state = 0
    for dtype, rows in counts.items():
        for kind, row in rows.items():
            want = expected_action(kind, DetailType(dtype)).value
            n = sum(row.values())
            total += n
            correct += row[want]
            # Updating with an equal value leaves the same end state as passing.
            end_state += row[want] + (row["update"] if kind == "equal" else 0)

    def pooled(kinds: Sequence[str], actions: Sequence[str], dtypes: Sequence[str] = ("MP", "SP")) -> float:
        num = sum(counts[d][k][a] for d in dtypes for k in kinds for a in actions)
        den = sum(sum(counts[d][k].values()) for d in dtypes for k in kinds)
        return num / den if den else 0.0

    return MaintenanceSection(
        counts=counts,
        raw_accuracy=correct / total if total else 0.0,
        end_state_accuracy=end_state / total if total else 0.0,
        redundant_reduction=pooled(["equal"], ["pass", "update"]),
        contradiction_reduction=pooled(["negate"], ["update"]),
        lost_by_pass=pooled(["negate", "different"], ["pass"]),
        mp_wrong_append=pooled(["equal", "negate"], ["append"], ["MP"]),
        protocol_violations=violations,
        skipped=skipped,
        failures=failures,
    )


# -- rendering ------------------------------------------------------------------------------

FORMATS = ("table", "json", "matrix")


def _r(x: float) -> float:
    return round(float(x), 6)


def report_to_dict(report: EvalReport) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in ("in_schema", "out_of_schema"):
        sec: ExtractionSection | None = getattr(report, name)
        if sec is None:
            continue
        out[name] = {
            "n_points": sec.n_points,
            "histogram": sec.histogram,
            "histogram_fraction": {k: _r(v) for k, v in sec.fractions().items()},
            "validity_rate": _r(sec.validity_rate),
            "correct_rate": _r(sec.correct_rate),
            "over_extraction": {"spurious": sec.spurious, "duplicates": sec.duplicates},
            "spillover": sec.spillover,
            "per_level": {
                lvl: {k: (_r(v) if isinstance(v, float) else v) for k, v in asdict(prf).items()}
                for lvl, prf in sec.per_level.items()
            },
            "confusion": sec.confusion.to_dict() if sec.confusion else None,
            "failures": sec.failures,
        }
    if report.maintenance is not None:
        m = report.maintenance
        out["maintenance"] = {
            "counts": m.counts,
            "distribution": {d: {k: {a: _r(v) for a, v in row.items()} for k, row in rows.items()} for d, rows in m.distribution().items()},
            "raw_accuracy": _r(m.raw_accuracy),
            "end_state_accuracy": _r(m.end_state_accuracy),
            "redundant_reduction": _r(m.redundant_reduction),
            "contradiction_reduction": _r(m.contradiction_reduction),
            "lost_by_pass": _r(m.lost_by_pass),
            "mp_wrong_append": _r(m.mp_wrong_append),
            "protocol_violations": m.protocol_violations,
            "skipped": m.skipped,
            "failures": m.failures,
        }
    if report.retrieval is not None:
        r = report.retrieval
        out["retrieval"] = {
            "accuracy": {mode: {f"n+{o}" if o else "n": _r(v) for o, v in acc.items()} for mode, acc in r.accuracy.items()},
            "avg_n": _r(r.avg_n),
            "avg_store_size": _r(r.avg_store_size),
            "n_queries": r.n_queries,
            "skipped": r.skipped,
            "failures": r.failures,
        }
    return out


def render_report(report: EvalReport, fmt: str = "table", sections: Sequence[str] | None = None) -> str:
    """Deterministic text rendering of a report.

    ``table`` mirrors the benchmark tables, ``json`` is the full structured
    report, ``matrix`` prints the row-normalized confusion matrices.
    """
    names = list(sections) if sections is not None else report.sections()
    if fmt == "matrix" and sections is None:
        names = [n for n in names if n in ("in_schema", "out_of_schema")]
    if not names:
        raise ReportSectionMissing("report is empty")
    for n in names:
        report.section(n)
    if fmt == "json":
        data = report_to_dict(report)
        return json.dumps({k: data[k] for k in names}, indent=2, sort_keys=True) + "\n"
    if fmt == "table":
        return "\n".join(_TABLES[n](report.section(n)) for n in names)
    if fmt == "matrix":
        blocks = []
        for n in names:
            sec = report.section(n)
            if not isinstance(sec, ExtractionSection) or sec.confusion is None:
                raise ReportSectionMissing(f"section {n!r} has no confusion matrix")
            level = "detail" if n == "in_schema" else "sub"
            blocks.append(_matrix_text(f"{n} ({level} level, row-normalized)", sec.confusion))
        return "\n".join(blocks)
    raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")


def _pct(x: float) -> str:
    return f"{100 * x:5.1f}%"


def _extraction_table(sec: ExtractionSection) -> str:
    f = sec.fractions()
    lines = [
        f"Extraction ({sec.mode}, {sec.n_points} points)",
        f"  no extraction      {_pct(f['no'])}  ({sec.histogram['no']})",
        f"  1 preference       {_pct(f['one'])}  ({sec.histogram['one']})",
        f"  2+ preferences     {_pct(f['two_plus'])}  ({sec.histogram['two_plus']})",
        f"  valid struct. out  {_pct(sec.validity_rate)}",
        f"  correct            {_pct(sec.correct_rate)}",
        f"  over-extraction    spurious={sec.spurious} duplicates={sec.duplicates} spillover={sec.spillover}",
    ]
    if sec.per_level:
        lines.append(f"  {'level':<8}{'#cat':>6}{'prec':>8}{'rec':>8}{'f1':>8}")
        for lvl, prf in sec.per_level.items():
            lines.append(f"  {lvl:<8}{prf.category_count:>6}{prf.precision:>8.3f}{prf.recall:>8.3f}{prf.f1:>8.3f}")
    if sec.failures:
        lines.append(f"  failures: {len(sec.failures)}")
    return "\n".join(lines) + "\n"


def _maintenance_table(sec: MaintenanceSection) -> str:
    dist = sec.distribution()
    lines = ["Maintenance (rows: detail type / utterance type; columns: function called)"]
    lines.append(f"  {'':4}{'type':<10}{'#':>5}{'pass':>8}{'update':>8}{'append':>8}")
    for dtype in ("MP", "SP"):
        for kind in MAINTENANCE_TYPES:
            n = sum(sec.counts[dtype][kind].values())
            row = dist[dtype][kind]
            cells = []
            for a in ("pass", "update", "append"):
                cells.append(f"{'-':>8}" if dtype == "SP" and a == "append" else f"{row[a]:>8.2f}")
            lines.append(f"  {dtype:<4}{kind:<10}{n:>5}" + "".join(cells))
    lines += [
        f"  raw accuracy              {sec.raw_accuracy:.3f}",
        f"  end-state accuracy        {sec.end_state_accuracy:.3f}",
        f"  redundancy reduction      {_pct(sec.redundant_reduction)}",
        f"  contradiction reduction   {_pct(sec.contradiction_reduction)}",
        f"  lost by incorrect pass    {_pct(sec.lost_by_pass)}",
        f"  MP wrongly appended       {_pct(sec.mp_wrong_append)}",
        f"  protocol violations       {sec.protocol_violations}",
        f"  skipped                   {sec.skipped}",
    ]
    return "\n".join(lines) + "\n"


def _retrieval_table(sec: RetrievalSection) -> str:
    lines = [f"Retrieval ({sec.n_queries} queries, k = n, n+1, n+2)"]
    lines.append(f"  {'embedding':<16}{'n':>7}{'n+1':>7}{'n+2':>7}")
    for mode in (EmbeddingMode.SENTENCE_ONLY.value, EmbeddingMode.ENRICHED.value):
        acc = sec.accuracy[mode]
        lines.append(f"  {mode:<16}" + "".join(f"{acc[o]:>7.2f}" for o in OFFSETS))
    lines.append(f"  avg n             {sec.avg_n:.2f}")
    lines.append(f"  avg store size    {sec.avg_store_size:.2f}")
    lines.append(f"  skipped           {sec.skipped}")
    return "\n".join(lines) + "\n"


_TABLES: dict[str, Callable[[Any], str]] = {
    "in_schema": _extraction_table,
    "out_of_schema": _extraction_table,
    "maintenance": _maintenance_table,
    "retrieval": _retrieval_table,
}


def _matrix_text(title: str, cm: ConfusionMatrix) -> str:
    """Grid of the non-empty rows/columns; columns are numbered, labels listed below."""
    norm = cm.normalized()
    rows = cm.labels + [NTL]
    cols = cm.labels + [NPL]
    keep_rows = [i for i in range(len(rows)) if cm.counts[i].sum() > 0]
    keep_cols = [j for j in range(len(cols)) if cm.counts[:, j].sum() > 0]
    names = [c.split("/")[-1] for c in cols]
    head_w = max([len(rows[i].split("/")[-1]) for i in keep_rows] + [4])
    lines = [title, " " * (head_w + 2) + "".join(f"{'c' + str(j):>6}" for j in keep_cols)]
    for i in keep_rows:
        label = rows[i].split("/")[-1]
        lines.append(f"  {label:<{head_w}}" + "".join(f"{norm[i, j]:>6.2f}" for j in keep_cols))
    lines.append("  columns: " + ", ".join(f"c{j}={names[j]}" for j in keep_cols))
    return "\n".join(lines) + "\n"


def plot_confusion(cm: ConfusionMatrix, path: str, title: str = "") -> None:
    """Write a row-normalized heat map as a static image (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    norm = cm.normalized()
    fig, ax = plt.subplots(figsize=(max(6, len(cm.labels) * 0.35), max(5, len(cm.labels) * 0.3)))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(cm.labels) + 1), [l.split("/")[-1] for l in cm.labels] + [NPL], rotation=90, fontsize=6)
    ax.set_yticks(range(len(cm.labels) + 1), [l.split("/")[-1] for l in cm.labels] + [NTL], fontsize=6)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
