"""Archival store for fact/scene entries.

On disk a store is a directory with two files:

``entries.log``
    Serialized entries (see :mod:`dualtrace.traces`), each followed by a blank
    line. Append-only; an anchor that is revised gets a newer record and the
    latest record wins.
``manifest.json``
    The commit point. Holds the committed log length, the insert_seq
    high-water mark, the per-session processing ledger and the
    anchor -> session map. Bytes past ``log_bytes`` are an uncommitted tail and
    are truncated on open, so a pair is either fully visible or not at all.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .traces import MAX_ANCHOR_LEN, MemoryEntry, TraceKind, parse_entry, relink, serialize_entry, validate_pair

logger = logging.getLogger(__name__)

LOG_NAME = "entries.log"
MANIFEST_NAME = "manifest.json"
RECORD_SEP = "\n\n"
DEFAULT_K = 10

# Session outcomes recorded in the manifest.
DROPPED = "dropped"
FACT_STORED = "fact_stored"
PAIR_STORED = "pair_stored"
STORED_OUTCOMES = (FACT_STORED, PAIR_STORED)

STOPWORDS = frozenset(
    """a an and are as at be been but by did do does for from had has have how i
    in is it its me my of on or our so than that the their them then there these
    they this to was we were what when where which who whom why will with you your
    am can could should would about into after before over any all""".split()
)

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _WORD_RE.findall(text.lower()) if t not in STOPWORDS]


class StoreError(RuntimeError):
    pass


class IntegrityError(StoreError):
    """A cross-link points at an entry that does not exist."""


class PairRejected(StoreError):
    pass


@dataclass(frozen=True)
class StoreRecord:
    entry: MemoryEntry
    session_id: str | None
    insert_seq: int

    @property
    def anchor(self) -> str:
        return self.entry.anchor


@dataclass(frozen=True)
class SearchHit:
    record: StoreRecord
    score: float
    # True when the record was pulled in only because its partner matched.
    completed: bool = False


@dataclass(frozen=True)
class CoverageStats:
    sessions_processed: int
    sessions_stored: int
    sessions_dual: int
    coverage_ratio: float
    dual_ratio: float
    empty: bool

    def to_dict(self) -> dict:
        return {
            "sessions_processed": self.sessions_processed,
            "sessions_stored": self.sessions_stored,
            "sessions_dual": self.sessions_dual,
            "coverage_ratio": self.coverage_ratio,
            "dual_ratio": self.dual_ratio,
            "empty": self.empty,
        }


def coverage_from_outcomes(outcomes: Iterable[str]) -> CoverageStats:
    processed = stored = dual = 0
    for outcome in outcomes:
        processed += 1
        if outcome in STORED_OUTCOMES:
            stored += 1
        if outcome == PAIR_STORED:
            dual += 1
    return CoverageStats(
        sessions_processed=processed,
        sessions_stored=stored,
        sessions_dual=dual,
        coverage_ratio=stored / processed if processed else 0.0,
        dual_ratio=dual / stored if stored else 0.0,
        empty=processed == 0,
    )


def lexical_score(query_tokens: Iterable[str], entry: MemoryEntry) -> int:
    """Distinct query tokens found in the entry text, plus 2 per token in the anchor slug."""
    slug = set(entry.anchor.split("_")) - STOPWORDS
    text = set(tokenize(" ".join(entry.text_fields())))
    return sum((2 if q in slug else 0) + (1 if q in text else 0) for q in set(query_tokens))


class MemoryStore:
    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.log_path = self.directory / LOG_NAME
        self.manifest_path = self.directory / MANIFEST_NAME
        self._lock = threading.RLock()
        self._load()

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        manifest = {"log_bytes": 0, "insert_seq": 0, "sessions": {}, "anchors": {}}
        if self.manifest_path.exists():
            manifest.update(json.loads(self.manifest_path.read_text()))
        committed = int(manifest["log_bytes"])
        raw = self.log_path.read_bytes() if self.log_path.exists() else b""
        if len(raw) < committed:
            raise StoreError(f"{self.log_path} is shorter than its committed length")
        if len(raw) > committed:
            logger.warning("discarding %d uncommitted bytes from %s", len(raw) - committed, self.log_path)
            with open(self.log_path, "r+b") as fh:
                fh.truncate(committed)
            raw = raw[:committed]

        self._sessions: dict[str, dict] = dict(manifest["sessions"])
        self._anchor_sessions: dict[str, str] = dict(manifest["anchors"])
        self._records: dict[tuple[TraceKind, str], StoreRecord] = {}
        self._log_bytes = committed
        seq = 0
        text = raw.decode("utf-8")
        for chunk in text.split(RECORD_SEP):
            if not chunk:
                continue
            seq += 1
            entry = parse_entry(chunk)
            self._records[(entry.kind, entry.anchor)] = StoreRecord(entry, self._anchor_sessions.get(entry.anchor), seq)
        if seq != int(manifest["insert_seq"]):
            raise StoreError(f"manifest insert_seq {manifest['insert_seq']} != {seq} records in log")
        self._seq = seq

    def _manifest_payload(self, log_bytes: int, seq: int, sessions: dict, anchors: dict) -> str:
        return json.dumps(
            {"log_bytes": log_bytes, "insert_seq": seq, "sessions": sessions, "anchors": anchors},
            indent=2,
            sort_keys=True,
        )

    def _write_chunk(self, fh, data: bytes) -> None:
        fh.write(data)

    def _write_manifest(self, payload: str) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(payload)
        os.replace(tmp, self.manifest_path)

    def _commit(self, entries: Sequence[MemoryEntry], session_id: str | None, outcome: str | None) -> None:
        """Append ``entries`` and commit them (plus the session outcome) in one step."""
        data = "".join(serialize_entry(e) + RECORD_SEP for e in entries).encode("utf-8")
        sessions = dict(self._sessions)
        anchors = dict(self._anchor_sessions)
        if session_id is not None:
            for e in entries:
                anchors[e.anchor] = session_id
            if outcome is not None:
                prior = sessions.get(session_id, {})
                prior_anchors = list(prior.get("anchors", []))
                new_anchors = prior_anchors + [a for a in dict.fromkeys(e.anchor for e in entries) if a not in prior_anchors]
                if prior.get("outcome") in STORED_OUTCOMES and outcome == DROPPED:
                    outcome = prior["outcome"]
                if prior.get("outcome") == PAIR_STORED:
                    outcome = PAIR_STORED
                sessions[session_id] = {"outcome": outcome, "anchors": new_anchors}

        offset = self._log_bytes
        seq = self._seq + len(entries)
        with open(self.log_path, "ab") as fh:
            try:
                if data:
                    self._write_chunk(fh, data)
                    fh.flush()
                    os.fsync(fh.fileno())
                self._write_manifest(self._manifest_payload(offset + len(data), seq, sessions, anchors))
            except BaseException:
                fh.truncate(offset)
                raise

        for i, e in enumerate(entries, start=1):
            self._records[(e.kind, e.anchor)] = StoreRecord(e, anchors.get(e.anchor), self._seq + i)
        self._seq = seq
        self._log_bytes = offset + len(data)
        self._sessions = sessions
        self._anchor_sessions = anchors

    # -- writes ------------------------------------------------------------

    def _free_anchor(self, anchor: str) -> str:
        taken = {a for (_, a) in self._records}
        if anchor not in taken:
            return anchor
        n = 2
        while True:
            suffix = f"_{n}"
            candidate = anchor[: MAX_ANCHOR_LEN - len(suffix)] + suffix
            if candidate not in taken:
                return candidate
            n += 1

    def insert_pair(self, fact: MemoryEntry, scene: MemoryEntry, session_id: str | None = None) -> str:
        """Store a linked fact/scene pair atomically; returns the final (possibly suffixed) anchor."""
        report = validate_pair(fact, scene)
        if not report.valid:
            raise PairRejected("invalid pair: " + ", ".join(report.violations))
        with self._lock:
            anchor = self._free_anchor(fact.anchor)
            if anchor != fact.anchor:
                fact, scene = relink(fact, anchor), relink(scene, anchor)
            self._commit([fact, scene], session_id, PAIR_STORED if session_id is not None else None)
            return anchor

    def insert_fact(self, fact: MemoryEntry, session_id: str | None = None) -> str:
        if not fact.is_fact:
            raise PairRejected("insert_fact needs a FACT entry")
        if fact.frontmatter.linked_scene is not None:
            raise PairRejected("fact-only inserts cannot carry linked_scene")
        with self._lock:
            anchor = self._free_anchor(fact.anchor)
            if anchor != fact.anchor:
                fact = relink(fact, anchor)
            self._commit([fact], session_id, FACT_STORED if session_id is not None else None)
            return anchor

    def replace(self, fact: MemoryEntry, scene: MemoryEntry | None = None, session_id: str | None = None) -> str:
        """Revise the entries stored under ``fact.anchor`` in place (no new anchor).

        With a scene the result is a linked pair. Without one, a fact that
        already has a scene must keep linking it.
        """
        with self._lock:
            if (TraceKind.FACT, fact.anchor) not in self._records:
                raise StoreError(f"no fact stored under {fact.anchor!r}")
            if scene is not None:
                report = validate_pair(fact, scene)
                if not report.valid:
                    raise PairRejected("invalid pair: " + ", ".join(report.violations))
                entries = [fact, scene]
            else:
                linked = fact.frontmatter.linked_scene
                if linked is not None and (TraceKind.SCENE, linked) not in self._records:
                    raise PairRejected(f"fact links missing scene {linked!r}")
                if linked is None and (TraceKind.SCENE, fact.anchor) in self._records:
                    raise PairRejected(f"revision of {fact.anchor!r} would orphan its scene")
                entries = [fact]
            sid = session_id if session_id is not None else self._anchor_sessions.get(fact.anchor)
            self._commit(entries, sid, None)
            return fact.anchor

    def record_drop(self, session_id: str) -> None:
        """Count a session that produced no entries in the coverage denominator."""
        with self._lock:
            self._commit([], session_id, DROPPED)

    # -- reads -------------------------------------------------------------

    def session_outcome(self, session_id: str) -> dict | None:
        with self._lock:
            found = self._sessions.get(session_id)
            return dict(found) if found is not None else None

    def records(self) -> list[StoreRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: r.insert_seq)

    def get(self, kind: TraceKind, anchor: str) -> StoreRecord | None:
        with self._lock:
            return self._records.get((TraceKind(kind), anchor))

    def get_by_anchor(self, anchor: str) -> tuple[StoreRecord, StoreRecord | None] | None:
        """The fact under ``anchor`` and its linked scene, or None if absent."""
        with self._lock:
            fact = self._records.get((TraceKind.FACT, anchor))
            if fact is None:
                return None
            linked = fact.entry.frontmatter.linked_scene
            if linked is None:
                return fact, None
            scene = self._records.get((TraceKind.SCENE, linked))
            if scene is None:
                raise IntegrityError(f"fact {anchor!r} links missing scene {linked!r}")
            return fact, scene

    def partner(self, record: StoreRecord) -> StoreRecord | None:
        fm = record.entry.frontmatter
        if record.entry.is_fact:
            if fm.linked_scene is None:
                return None
            return self.get(TraceKind.SCENE, fm.linked_scene)
        if fm.linked_fact is None:
            return None
        return self.get(TraceKind.FACT, fm.linked_fact)

    def search(self, query: str, k: int = DEFAULT_K, *, embedder=None) -> list[SearchHit]:
        """Lexical search with pair completion.

        Records are scored with :func:`lexical_score`, zero scores are dropped,
        and the top ``k`` are kept (ties: older insert_seq first). With an
        ``embedder`` (anything with ``embed(texts)``) the kept hits are
        re-ordered by cosine similarity to the query. Each hit's linked partner
        is then added right after it if not already present.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = tokenize(query)
        records = self.records()
        scored = [(lexical_score(q, r.entry), r) for r in records] if q else []
        ranked = sorted(((s, r) for s, r in scored if s > 0), key=lambda sr: (-sr[0], sr[1].insert_seq))[:k]
        if embedder is not None and ranked:
            from .provider import cosine

            vectors = embedder.embed([query] + ["\n".join(r.entry.text_fields()) for _, r in ranked])
            qv = vectors[0]
            sims = [cosine(qv, v) for v in vectors[1:]]
            order = sorted(range(len(ranked)), key=lambda i: (-sims[i], ranked[i][1].insert_seq))
            ranked = [ranked[i] for i in order]

        hits: list[SearchHit] = []
        seen: set[tuple[TraceKind, str]] = set()
        for score, rec in ranked:
            key = (rec.entry.kind, rec.anchor)
            if key in seen:
                continue
            hits.append(SearchHit(rec, score))
            seen.add(key)
            mate = self.partner(rec)
            if mate is not None:
                mkey = (mate.entry.kind, mate.anchor)
                if mkey not in seen:
                    mate_score = next((s for s, r in ranked if r is mate), None)
                    hits.append(SearchHit(mate, mate_score if mate_score is not None else 0, completed=mate_score is None))
                    seen.add(mkey)
        return hits

    def coverage_stats(self) -> CoverageStats:
        with self._lock:
            return coverage_from_outcomes(s["outcome"] for s in self._sessions.values())

    def audit(self) -> list[str]:
        """Referential-integrity problems across the whole store (empty list = clean)."""
        problems = []
        with self._lock:
            for (kind, anchor), rec in sorted(self._records.items(), key=lambda kv: kv[1].insert_seq):
                fm = rec.entry.frontmatter
                if kind is TraceKind.FACT and fm.linked_scene is not None:
                    scene = self._records.get((TraceKind.SCENE, fm.linked_scene))
                    if scene is None:
                        problems.append(f"FACT {anchor}: linked_scene {fm.linked_scene} missing")
                    elif scene.entry.frontmatter.linked_fact != anchor:
                        problems.append(f"FACT {anchor}: scene {fm.linked_scene} does not link back")
                if kind is TraceKind.SCENE:
                    if fm.linked_fact is None:
                        problems.append(f"SCENE {anchor}: missing linked_fact")
                        continue
                    fact = self._records.get((TraceKind.FACT, fm.linked_fact))
                    if fact is None:
                        problems.append(f"SCENE {anchor}: linked_fact {fm.linked_fact} missing")
                    elif fact.entry.frontmatter.linked_scene != anchor:
                        problems.append(f"SCENE {anchor}: fact {fm.linked_fact} does not link forward")
        return problems

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def dump(self) -> str:
        """All current entries in insert order, in the log format."""
        return "".join(serialize_entry(r.entry) + RECORD_SEP for r in self.records())
