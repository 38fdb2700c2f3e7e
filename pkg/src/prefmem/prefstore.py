"""Per-user preference storage.

Layout under the store root::

    users/<quoted user id>.jsonl             mutation log (insert / delete / opt-out)
    users/<quoted user id>.quarantine.jsonl  preferences whose path left the taxonomy

A user's log is replayed and compacted the first time the user is touched.
After that every mutation is appended and fsynced before the call returns.
Writers for one user are serialized by a per-user lock; readers take
immutable snapshots.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Iterator
from urllib.parse import quote, unquote

from .extraction import CandidatePreference
from .llm_gateway import EmbeddingVector
from .taxonomy import CategoryPath, CategoryTaxonomy, validate_path

logger = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


class ConflictError(StoreError):
    """The preference a decision referred to no longer exists."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Preference:
    id: str
    user_id: str
    path: CategoryPath
    value: str
    source_sentence: str
    embedding: EmbeddingVector
    created_at: datetime
    updated_at: datetime
    origin_conversation_id: str = ""
    taxonomy_version: str = ""

    def to_dict(self, with_embedding: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "user_id": self.user_id,
            "path": {"main": self.path.main, "sub": self.path.sub, "detail": self.path.detail},
            "value": self.value,
            "source_sentence": self.source_sentence,
            "created_at": self.created_at.isoformat(),
            "updated_at": self.updated_at.isoformat(),
            "origin_conversation_id": self.origin_conversation_id,
            "taxonomy_version": self.taxonomy_version,
        }
        if with_embedding:
            out["embedding"] = {"model_id": self.embedding.model_id, "values": list(self.embedding.values)}
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Preference:
        emb = data["embedding"]
        return cls(
            id=data["id"],
            user_id=data["user_id"],
            path=CategoryPath(**data["path"]),
            value=data["value"],
            source_sentence=data["source_sentence"],
            embedding=EmbeddingVector(tuple(float(v) for v in emb["values"]), emb["model_id"]),
            created_at=datetime.fromisoformat(data["created_at"]),
            updated_at=datetime.fromisoformat(data["updated_at"]),
            origin_conversation_id=data.get("origin_conversation_id", ""),
            taxonomy_version=data.get("taxonomy_version", ""),
        )


@dataclass(frozen=True)
class StoreSnapshot:
    user_id: str
    preferences: tuple[Preference, ...]
    taxonomy_version: str
    log_position: int

    def by_detail_category(self, path: CategoryPath) -> list[Preference]:
        return [p for p in self.preferences if p.path == path]

    def count_by_subcategory(self, sub_id: str) -> int:
        return sum(1 for p in self.preferences if p.path.sub == sub_id)

    def __len__(self) -> int:
        return len(self.preferences)


@dataclass
class _UserState:
    prefs: dict[str, Preference] = field(default_factory=dict)
    opted_out: set[str] = field(default_factory=set)
    position: int = 0
    last_stamp: datetime | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class PreferenceStore:
    """Category-indexed preference storage.

    ``root=None`` keeps everything in memory (used by the evaluation harness
    and tests). ``taxonomy`` is the full, un-opted-out taxonomy; stored paths
    are validated against it.
    """

    def __init__(
        self,
        root: str | Path | None,
        taxonomy: CategoryTaxonomy,
        dimension: int,
        *,
        fsync: bool = True,
        clock: Callable[[], datetime] = _utcnow,
        id_factory: Callable[[], str] | None = None,
    ):
        self.root = Path(root) if root is not None else None
        self.taxonomy = taxonomy
        self.dimension = dimension
        self.fsync = fsync
        self._clock = clock
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._users: dict[str, _UserState] = {}
        self._users_lock = threading.Lock()
        if self.root is not None:
            (self.root / "users").mkdir(parents=True, exist_ok=True)

    # -- paths and logs ------------------------------------------------------------

    def _log_path(self, user_id: str) -> Path:
        assert self.root is not None
        return self.root / "users" / f"{quote(user_id, safe='')}.jsonl"

    def _quarantine_path(self, user_id: str) -> Path:
        assert self.root is not None
        return self.root / "users" / f"{quote(user_id, safe='')}.quarantine.jsonl"

    def _state(self, user_id: str) -> _UserState:
        with self._users_lock:
            state = self._users.get(user_id)
            if state is None:
                state = self._open_user(user_id)
                self._users[user_id] = state
            return state

    def _open_user(self, user_id: str) -> _UserState:
        state = _UserState()
        if self.root is None:
            return state
        path = self._log_path(user_id)
        if not path.exists():
            return state
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StoreError(f"cannot read {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                self._replay(state, json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                # A torn final write is expected after a crash; anything earlier is corruption.
                if lineno == len(lines):
                    logger.warning("%s: dropping torn last record", path)
                    break
                raise StoreError(f"{path}:{lineno}: corrupt record ({exc})") from exc
        stranded = [p for p in state.prefs.values() if not validate_path(self.taxonomy, p.path)]
        if stranded:
            logger.warning("%s: quarantining %d preferences with stale paths", user_id, len(stranded))
            with self._quarantine_path(user_id).open("a", encoding="utf-8") as fh:
                for p in stranded:
                    fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
                    del state.prefs[p.id]
        if state.prefs:
            state.last_stamp = max(p.created_at for p in state.prefs.values())
        self._compact(user_id, state)
        return state

    @staticmethod
    def _replay(state: _UserState, rec: dict[str, Any]) -> None:
        op = rec["op"]
        if op == "insert":
            pref = Preference.from_dict(rec["pref"])
            state.prefs[pref.id] = pref
        elif op == "delete":
            state.prefs.pop(rec["id"], None)
        elif op == "opt_out":
            state.opted_out.add(rec["sub"])
        elif op == "opt_in":
            state.opted_out.discard(rec["sub"])
        else:
            raise ValueError(f"unknown op {op!r}")
        state.position += 1

    def _compact(self, user_id: str, state: _UserState) -> None:
        records = [{"op": "insert", "pref": p.to_dict()} for p in state.prefs.values()]
        records += [{"op": "opt_out", "sub": s} for s in sorted(state.opted_out)]
        path = self._log_path(user_id)
        tmp = path.with_suffix(".jsonl.tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)
        state.position = len(records)

    def _append(self, user_id: str, state: _UserState, records: list[dict[str, Any]]) -> None:
        if self.root is not None:
            try:
                with self._log_path(user_id).open("a", encoding="utf-8") as fh:
                    for rec in records:
                        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StoreError(f"write failed for user {user_id!r}: {exc}") from exc
        for rec in records:
            self._replay(state, rec)

    def _stamp(self, state: _UserState) -> datetime:
        # Strictly increasing per user so created_at alone orders inserts.
        now = self._clock()
        if state.last_stamp is not None and now <= state.last_stamp:
            now = state.last_stamp + timedelta(microseconds=1)
        state.last_stamp = now
        return now

    # -- public API -------------------------------------------------------------------

    @contextmanager
    def writer(self, user_id: str) -> Iterator[None]:
        """Hold the user's write lock across several operations."""
        state = self._state(user_id)
        with state.lock:
            yield

    def users(self) -> list[str]:
        known = set(self._users)
        if self.root is not None:
            for f in (self.root / "users").glob("*.jsonl"):
                if not f.name.endswith(".quarantine.jsonl"):
                    known.add(unquote(f.name[: -len(".jsonl")]))
        return sorted(known)

    def _build(self, state: _UserState, user_id: str, candidate: CandidatePreference, embedding: EmbeddingVector) -> Preference:
        if not validate_path(self.taxonomy, candidate.path):
            raise ValueError(f"{candidate.path} is not a category in taxonomy {self.taxonomy.version}")
        if embedding.dimension != self.dimension:
            raise DimensionMismatch(f"embedding has {embedding.dimension} dims, store expects {self.dimension}")
        stamp = self._stamp(state)
        return Preference(
            id=self._new_id(),
            user_id=user_id,
            path=candidate.path,
            value=candidate.value,
            source_sentence=candidate.source_sentence,
            embedding=embedding,
            created_at=stamp,
            updated_at=stamp,
            origin_conversation_id=candidate.conversation_id,
            taxonomy_version=self.taxonomy.version,
        )

    def insert(self, user_id: str, candidate: CandidatePreference, embedding: EmbeddingVector) -> Preference:
        state = self._state(user_id)
        with state.lock:
            pref = self._build(state, user_id, candidate, embedding)
            self._append(user_id, state, [{"op": "insert", "pref": pref.to_dict()}])
            return pref

    def replace(self, user_id: str, old_id: str, candidate: CandidatePreference, embedding: EmbeddingVector) -> Preference:
        """Delete ``old_id`` and insert ``candidate`` in one durable write."""
        state = self._state(user_id)
        with state.lock:
            if old_id not in state.prefs:
                raise ConflictError(f"preference {old_id!r} of user {user_id!r} no longer exists")
            pref = self._build(state, user_id, candidate, embedding)
            self._append(
                user_id,
                state,
                [{"op": "delete", "id": old_id}, {"op": "insert", "pref": pref.to_dict()}],
            )
            return pref

    def delete(self, user_id: str, pref_id: str) -> bool:
        state = self._state(user_id)
        with state.lock:
            if pref_id not in state.prefs:
                return False
            self._append(user_id, state, [{"op": "delete", "id": pref_id}])
            return True

    def get(self, user_id: str, pref_id: str) -> Preference | None:
        return self._state(user_id).prefs.get(pref_id)

    def snapshot(self, user_id: str) -> StoreSnapshot:
        state = self._state(user_id)
        with state.lock:
            return StoreSnapshot(user_id, tuple(state.prefs.values()), self.taxonomy.version, state.position)

    def by_detail_category(self, user_id: str, path: CategoryPath) -> list[Preference]:
        return self.snapshot(user_id).by_detail_category(path)

    def count_by_subcategory(self, user_id: str, sub_id: str) -> int:
        return self.snapshot(user_id).count_by_subcategory(sub_id)

    def purge_category(self, user_id: str, sub_id: str) -> int:
        state = self._state(user_id)
        with state.lock:
            doomed = [p.id for p in state.prefs.values() if p.path.sub == sub_id]
            if doomed:
                self._append(user_id, state, [{"op": "delete", "id": i} for i in doomed])
            return len(doomed)

    def opted_out(self, user_id: str) -> frozenset[str]:
        return frozenset(self._state(user_id).opted_out)

    def opt_out(self, user_id: str, sub_ids: list[str]) -> int:
        """Record the exclusions and purge already-stored preferences under them."""
        known = set(self.taxonomy.sub_ids())
        unknown = [s for s in sub_ids if s not in known]
        if unknown:
            raise ValueError(f"unknown sub-categories: {unknown}")
        state = self._state(user_id)
        with state.lock:
            new = [s for s in dict.fromkeys(sub_ids) if s not in state.opted_out]
            if new:
                self._append(user_id, state, [{"op": "opt_out", "sub": s} for s in new])
            return sum(self.purge_category(user_id, s) for s in sub_ids)

    def opt_in(self, user_id: str, sub_ids: list[str]) -> None:
        state = self._state(user_id)
        with state.lock:
            back = [s for s in sub_ids if s in state.opted_out]
            if back:
                self._append(user_id, state, [{"op": "opt_in", "sub": s} for s in back])

    def export_user(self, user_id: str) -> dict[str, Any]:
        snap = self.snapshot(user_id)
        return {
            "user_id": user_id,
            "taxonomy_version": snap.taxonomy_version,
            "opted_out": sorted(self.opted_out(user_id)),
            "preferences": [p.to_dict() for p in snap.preferences],
        }

    def import_user(self, document: dict[str, Any]) -> int:
        """Load an exported document into an empty user. Returns the preference count."""
        user_id = document["user_id"]
        state = self._state(user_id)
        with state.lock:
            if state.prefs:
                raise StoreError(f"user {user_id!r} already has preferences")
            prefs = [Preference.from_dict(d) for d in document.get("preferences", [])]
            for p in prefs:
                if p.user_id != user_id:
                    raise ValueError(f"preference {p.id} belongs to {p.user_id!r}")
                if not validate_path(self.taxonomy, p.path):
                    raise ValueError(f"{p.path} is not in taxonomy {self.taxonomy.version}")
                if p.embedding.dimension != self.dimension:
                    raise DimensionMismatch(f"preference {p.id} has {p.embedding.dimension} dims")
            records = [{"op": "insert", "pref": p.to_dict()} for p in prefs]
            records += [{"op": "opt_out", "sub": s} for s in document.get("opted_out", [])]
            self._append(user_id, state, records)
            if prefs:
                state.last_stamp = max(p.created_at for p in prefs)
            return len(prefs)

    def close(self) -> None:
        with self._users_lock:
            self._users.clear()
