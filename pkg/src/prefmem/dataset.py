"""Benchmark corpus: extraction conversations, retrieval and maintenance utterances.

A corpus directory holds three JSON-lines files joined on ``point_id``::

    extraction_conversations.jsonl  {"point_id", "user_id", "category": {main, sub, detail},
                                     "preference", "revealing_sentence",
                                     "conversation": [{"speaker", "text"}, ...]}
    retrieval_utterances.jsonl      {"point_id", "utterance"}
    maintenance_utterances.jsonl    {"point_id", "type": equal|negate|different,
                                     "utterance", "preference"}

``preference`` on a maintenance record is the preference value the utterance
expresses (the label an extractor should produce).
"""

from __future__ import annotations

import json
import random
import string
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .extraction import CandidatePreference, ConversationTranscript, Turn
from .llm_gateway import MockRecord
from .taxonomy import CategoryPath, CategoryTaxonomy, load_default_taxonomy, validate_path

EXTRACTION_FILE = "extraction_conversations.jsonl"
RETRIEVAL_FILE = "retrieval_utterances.jsonl"
MAINTENANCE_FILE = "maintenance_utterances.jsonl"
MAINTENANCE_TYPES = ("equal", "negate", "different")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DataPoint:
    point_id: str
    user_id: str
    ground_truth: CandidatePreference
    extraction_conversation: ConversationTranscript
    retrieval_utterance: str
    maintenance_utterances: Mapping[str, str]
    maintenance_preferences: Mapping[str, str]

    def maintenance_conversation_id(self, kind: str) -> str:
        return f"{self.point_id}/maintenance/{kind}"

    def maintenance_transcript(self, kind: str) -> ConversationTranscript:
        return ConversationTranscript(
            self.maintenance_conversation_id(kind), (Turn("user", self.maintenance_utterances[kind]),)
        )

    def maintenance_truth(self, kind: str) -> CandidatePreference:
        return CandidatePreference(
            self.ground_truth.path,
            self.maintenance_preferences[kind],
            self.maintenance_utterances[kind],
            self.maintenance_conversation_id(kind),
        )


@dataclass
class Corpus:
    points: list[DataPoint]
    problems: list[str] = field(default_factory=list)
    # Raw maintenance record order per point, kept for byte-exact re-serialization.
    _maintenance_order: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def by_user(self) -> dict[str, list[DataPoint]]:
        out: dict[str, list[DataPoint]] = defaultdict(list)
        for p in self.points:
            out[p.user_id].append(p)
        return dict(out)


def _read_jsonl(path: Path, problems: list[str]) -> list[tuple[int, dict[str, Any]]]:
    if not path.exists():
        raise FileNotFoundError(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{path.name}:{lineno}: malformed record ({exc.msg})")
            continue
        if not isinstance(rec, dict) or not isinstance(rec.get("point_id"), str):
            problems.append(f"{path.name}:{lineno}: record without point_id")
            continue
        out.append((lineno, rec))
    return out


def load_corpus(
    directory: str | Path,
    taxonomy: CategoryTaxonomy | None = None,
    *,
    strict: bool = False,
) -> Corpus:
    """Read and validate a corpus directory.

    Invalid data points are skipped and described in ``Corpus.problems`` with
    their file and line; with ``strict=True`` the first problem raises
    :class:`CorpusError` instead.
    """
    directory = Path(directory)
    taxonomy = taxonomy or load_default_taxonomy()
    problems: list[str] = []
    extraction = _read_jsonl(directory / EXTRACTION_FILE, problems)
    retrieval = {r["point_id"]: (n, r) for n, r in _read_jsonl(directory / RETRIEVAL_FILE, problems)}
    maintenance: dict[str, dict[str, tuple[int, dict]]] = defaultdict(dict)
    for n, r in _read_jsonl(directory / MAINTENANCE_FILE, problems):
        maintenance[r["point_id"]][r.get("type")] = (n, r)

    points: list[DataPoint] = []
    order: dict[str, list[str]] = {}
    for lineno, rec in extraction:
        pid = rec["point_id"]
        where = f"{EXTRACTION_FILE}:{lineno} ({pid})"
        try:
            point = _build_point(rec, retrieval.get(pid), maintenance.get(pid, {}), taxonomy)
        except (CorpusError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"{where}: {exc}")
            continue
        points.append(point)
        order[pid] = list(maintenance[pid])
    if strict and problems:
        raise CorpusError("; ".join(problems))
    return Corpus(points, problems, order)


def _build_point(
    rec: dict[str, Any],
    retrieval: tuple[int, dict] | None,
    maintenance: Mapping[str, tuple[int, dict]],
    taxonomy: CategoryTaxonomy,
) -> DataPoint:
    pid = rec["point_id"]
    cat = rec["category"]
    path = CategoryPath(cat["main"], cat["sub"], cat["detail"])
    if not validate_path(taxonomy, path):
        raise CorpusError(f"category {path} is not in the taxonomy")
    turns = tuple(Turn(t["speaker"], t["text"]) for t in rec["conversation"])
    transcript = ConversationTranscript(pid, turns)
    sentence = rec["revealing_sentence"]
    if not any(sentence in t.text for t in turns if t.speaker == "user"):
        raise CorpusError("revealing_sentence does not occur in a user turn")
    truth = CandidatePreference(path, rec["preference"], sentence, pid)
    if retrieval is None:
        raise CorpusError("no retrieval utterance")
    utterance = retrieval[1].get("utterance")
    if not isinstance(utterance, str) or not utterance.strip():
        raise CorpusError("empty retrieval utterance")
    utterances: dict[str, str] = {}
    prefs: dict[str, str] = {}
    for kind in MAINTENANCE_TYPES:
        if kind not in maintenance:
            raise CorpusError(f"missing {kind!r} maintenance utterance")
        m = maintenance[kind][1]
        if not str(m.get("utterance", "")).strip() or not str(m.get("preference", "")).strip():
            raise CorpusError(f"incomplete {kind!r} maintenance utterance")
        utterances[kind] = m["utterance"]
        prefs[kind] = m["preference"]
    extra = set(maintenance) - set(MAINTENANCE_TYPES)
    if extra:
        raise CorpusError(f"unknown maintenance types {sorted(map(str, extra))}")
    return DataPoint(pid, rec["user_id"], truth, transcript, utterance, utterances, prefs)


def _line(rec: dict[str, Any]) -> str:
    return json.dumps(rec, ensure_ascii=False) + "\n"


def serialize_corpus(corpus: Corpus) -> dict[str, str]:
    """File name -> file content for the three corpus files."""
    ext, ret, mnt = [], [], []
    for p in corpus.points:
        gt = p.ground_truth
        ext.append(
            _line(
                {
                    "point_id": p.point_id,
                    "user_id": p.user_id,
                    "category": {"main": gt.path.main, "sub": gt.path.sub, "detail": gt.path.detail},
                    "preference": gt.value,
                    "revealing_sentence": gt.source_sentence,
                    "conversation": [{"speaker": t.speaker, "text": t.text} for t in p.extraction_conversation.turns],
                }
            )
        )
        ret.append(_line({"point_id": p.point_id, "utterance": p.retrieval_utterance}))
        for kind in corpus._maintenance_order.get(p.point_id) or MAINTENANCE_TYPES:
            mnt.append(
                _line(
                    {
                        "point_id": p.point_id,
                        "type": kind,
                        "utterance": p.maintenance_utterances[kind],
                        "preference": p.maintenance_preferences[kind],
                    }
                )
            )
    return {EXTRACTION_FILE: "".join(ext), RETRIEVAL_FILE: "".join(ret), MAINTENANCE_FILE: "".join(mnt)}


def write_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in serialize_corpus(corpus).items():
        (directory / name).write_text(text, encoding="utf-8")


def fixture_dir() -> Path:
    return Path(str(resources.files("prefmem").joinpath("data/fixture")))


def load_fixture(taxonomy: CategoryTaxonomy | None = None) -> Corpus:
    return load_corpus(fixture_dir(), taxonomy, strict=True)


def mock_records(points: Iterable[DataPoint]) -> dict[str, list[MockRecord]]:
    """Rule table for :class:`~prefmem.llm_gateway.MockGateway` from labelled points."""
    table: dict[str, list[MockRecord]] = {}
    for p in points:
        gt = p.ground_truth
        path = (gt.path.main, gt.path.sub, gt.path.detail)
        table[p.point_id] = [MockRecord(path, gt.value, gt.source_sentence)]
        for kind in MAINTENANCE_TYPES:
            table[p.maintenance_conversation_id(kind)] = [
                MockRecord(path, p.maintenance_preferences[kind], p.maintenance_utterances[kind])
            ]
    return table


# -- statistics ------------------------------------------------------------------------

_PUNCT = str.maketrans("", "", string.punctuation)


def words(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


@dataclass(frozen=True)
class CorpusStats:
    extraction_conversations: int
    retrieval_utterances: int
    maintenance_utterances: int
    avg_turns_per_conversation: float
    avg_words_per_conversation: float
    avg_words_per_retrieval_utterance: float
    avg_words_per_maintenance_utterance: float


def stats(corpus: Corpus | Sequence[DataPoint]) -> CorpusStats:
    points = list(corpus)
    if not points:
        raise ValueError("stats of an empty corpus")
    convs = [p.extraction_conversation for p in points]
    maint = [u for p in points for u in p.maintenance_utterances.values()]
    return CorpusStats(
        extraction_conversations=len(convs),
        retrieval_utterances=len(points),
        maintenance_utterances=len(maint),
        avg_turns_per_conversation=sum(len(c.turns) for c in convs) / len(convs),
        avg_words_per_conversation=sum(len(words(t.text)) for c in convs for t in c.turns) / len(convs),
        avg_words_per_retrieval_utterance=sum(len(words(p.retrieval_utterance)) for p in points) / len(points),
        avg_words_per_maintenance_utterance=sum(len(words(u)) for u in maint) / len(maint),
    )


# -- split -----------------------------------------------------------------------------


def split(
    points: Sequence[DataPoint],
    fractions: tuple[float, float] = (0.5, 0.5),
    seed: int = 0,
) -> tuple[list[DataPoint], list[DataPoint]]:
    """Seeded two-way split, stratified by main category.

    The first part gets ``round(fractions[0] * N)`` points overall; per-stratum
    shares are assigned by largest remainder so the total is exact.
    """
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    strata: dict[str, list[DataPoint]] = defaultdict(list)
    for p in points:
        strata[p.ground_truth.path.main].append(p)
    keys = sorted(strata)
    target = round(fractions[0] * len(points))
    exact = {k: fractions[0] * len(strata[k]) for k in keys}
    quota = {k: int(exact[k]) for k in keys}
    by_remainder = sorted(keys, key=lambda k: (-(exact[k] - quota[k]), k))
    for k in by_remainder[: target - sum(quota.values())]:
        quota[k] += 1
    rng = random.Random(seed)
    first, second = [], []
    for k in keys:
        group = sorted(strata[k], key=lambda p: p.point_id)
        rng.shuffle(group)
        first.extend(group[: quota[k]])
        second.extend(group[quota[k] :])
    return first, second


# -- diversity -------------------------------------------------------------------------


def distinct_n(texts: Sequence[str], n: int) -> float:
    """Unique n-grams over total n-grams of the concatenated token stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    toks = [w for t in texts for w in words(t)]
    total = len(toks) - n + 1
    if total < 1:
        raise ValueError(f"need at least {n} tokens, got {len(toks)}")
    grams = {tuple(toks[i : i + n]) for i in range(total)}
    return len(grams) / total
