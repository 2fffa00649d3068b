"""Benchmark sessions and recall questions, plus loaders.

Two on-disk schemas are accepted by :func:`load_benchmark`:

* the internal fixture schema, a JSON object with ``sessions``, ``cases`` and
  optional ``annotations`` lists;
* the LongMemEval distribution schema, a JSON list of question instances each
  carrying its own haystack of sessions. Sessions are de-duplicated by id
  across instances.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

from .traces import normalize_timestamp


class BenchmarkSchemaError(ValueError):
    pass


class QuestionType(str, enum.Enum):
    SINGLE_SESSION = "single_session"
    MULTI_SESSION = "multi_session"
    KNOWLEDGE_UPDATE = "knowledge_update"
    TEMPORAL = "temporal"
    ABSTENTION = "abstention"


CATEGORY_ORDER = (
    QuestionType.SINGLE_SESSION,
    QuestionType.MULTI_SESSION,
    QuestionType.KNOWLEDGE_UPDATE,
    QuestionType.TEMPORAL,
    QuestionType.ABSTENTION,
)

CATEGORY_LABELS = {
    QuestionType.SINGLE_SESSION: "Single-session",
    QuestionType.MULTI_SESSION: "Multi-session",
    QuestionType.KNOWLEDGE_UPDATE: "Knowledge-update",
    QuestionType.TEMPORAL: "Temporal reasoning",
    QuestionType.ABSTENTION: "Abstention",
}


@dataclass(frozen=True)
class Turn:
    role: str
    content: str


@dataclass(frozen=True)
class Session:
    session_id: str
    date: datetime
    messages: tuple[Turn, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "date", normalize_timestamp(self.date))

    def transcript(self) -> str:
        lines = [f"Session {self.session_id} ({self.date:%Y-%m-%d %H:%M} UTC)"]
        lines.extend(f"{t.role}: {t.content}" for t in self.messages)
        return "\n".join(lines)


@dataclass(frozen=True)
class BenchmarkCase:
    question_id: str
    question_type: QuestionType
    question: str
    oracle_answer: str
    evidence_session_ids: tuple[str, ...] = ()
    abstention: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "question_type", QuestionType(self.question_type))
        object.__setattr__(self, "evidence_session_ids", tuple(self.evidence_session_ids))
        if self.question_type is QuestionType.ABSTENTION:
            object.__setattr__(self, "abstention", True)

    @property
    def category(self) -> QuestionType:
        """Scoring category: abstention cases pool together whatever their surface type."""
        return QuestionType.ABSTENTION if self.abstention else self.question_type


@dataclass
class Benchmark:
    sessions: list[Session]
    cases: list[BenchmarkCase]
    annotations: dict[str, dict] = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.sessions), len(self.cases)

    def case_index(self) -> dict[str, BenchmarkCase]:
        return {c.question_id: c for c in self.cases}


def parse_date(value) -> datetime:
    """ISO-8601 or LongMemEval's ``2023/05/20 (Sat) 02:21`` style; naive values are UTC."""
    if isinstance(value, datetime):
        return normalize_timestamp(value)
    text = str(value).strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        return normalize_timestamp(datetime.fromisoformat(text))
    except ValueError:
        pass
    for fmt in ("%Y/%m/%d (%a) %H:%M", "%Y/%m/%d %H:%M", "%Y/%m/%d", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            continue
    raise BenchmarkSchemaError(f"unrecognized date {value!r}")


def _require(obj: Mapping, key: str, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise BenchmarkSchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _parse_session(raw: Mapping, where: str) -> Session:
    sid = str(_require(raw, "session_id", where))
    turns = []
    for j, msg in enumerate(_require(raw, "messages", where)):
        turns.append(Turn(str(_require(msg, "role", f"{where}.messages[{j}]")), str(_require(msg, "content", f"{where}.messages[{j}]"))))
    if not turns:
        raise BenchmarkSchemaError(f"{where}: session {sid!r} has no messages")
    return Session(sid, parse_date(_require(raw, "date", where)), tuple(turns))


def _parse_case(raw: Mapping, where: str) -> BenchmarkCase:
    qtype = _require(raw, "question_type", where)
    try:
        qtype = QuestionType(qtype)
    except ValueError:
        raise BenchmarkSchemaError(f"{where}: unknown question_type {qtype!r}") from None
    return BenchmarkCase(
        question_id=str(_require(raw, "question_id", where)),
        question_type=qtype,
        question=str(_require(raw, "question", where)),
        oracle_answer=str(_require(raw, "answer", where)),
        evidence_session_ids=tuple(raw.get("evidence_session_ids", ())),
        abstention=bool(raw.get("abstention", False)),
    )


def from_internal(data: Mapping) -> Benchmark:
    sessions = [_parse_session(s, f"sessions[{i}]") for i, s in enumerate(_require(data, "sessions", "benchmark"))]
    cases = [_parse_case(c, f"cases[{i}]") for i, c in enumerate(_require(data, "cases", "benchmark"))]
    annotations = {}
    for i, ann in enumerate(data.get("annotations", [])):
        where = f"annotations[{i}]"
        for key in ("session_id", "relevance", "specificity", "explicitness"):
            _require(ann, key, where)
        annotations[str(ann["session_id"])] = dict(ann)
    _check_unique([s.session_id for s in sessions], "session_id")
    _check_unique([c.question_id for c in cases], "question_id")
    return Benchmark(sessions, cases, annotations)


_LME_TYPES = {
    "single-session-user": QuestionType.SINGLE_SESSION,
    "single-session-assistant": QuestionType.SINGLE_SESSION,
    "single-session-preference": QuestionType.SINGLE_SESSION,
    "multi-session": QuestionType.MULTI_SESSION,
    "knowledge-update": QuestionType.KNOWLEDGE_UPDATE,
    "temporal-reasoning": QuestionType.TEMPORAL,
}


def from_longmemeval(data: list) -> Benchmark:
    """Adapt the LongMemEval JSON distribution. Abstention ids end in ``_abs``."""
    sessions: dict[str, Session] = {}
    cases = []
    for i, inst in enumerate(data):
        where = f"instances[{i}]"
        qid = str(_require(inst, "question_id", where))
        raw_type = _require(inst, "question_type", where)
        if raw_type not in _LME_TYPES:
            raise BenchmarkSchemaError(f"{where}: unknown question_type {raw_type!r}")
        ids = _require(inst, "haystack_session_ids", where)
        dates = _require(inst, "haystack_dates", where)
        hay = _require(inst, "haystack_sessions", where)
        if not len(ids) == len(dates) == len(hay):
            raise BenchmarkSchemaError(f"{where}: haystack id/date/session lengths differ")
        for sid, date, turns in zip(ids, dates, hay):
            sid = str(sid)
            if sid in sessions:
                continue
            msgs = tuple(Turn(str(_require(t, "role", where)), str(_require(t, "content", where))) for t in turns)
            if msgs:
                sessions[sid] = Session(sid, parse_date(date), msgs)
        cases.append(
            BenchmarkCase(
                question_id=qid,
                question_type=_LME_TYPES[raw_type],
                question=str(_require(inst, "question", where)),
                oracle_answer=str(_require(inst, "answer", where)),
                evidence_session_ids=tuple(str(s) for s in inst.get("answer_session_ids", ())),
                abstention=qid.endswith("_abs"),
            )
        )
    ordered = sorted(sessions.values(), key=lambda s: (s.date, s.session_id))
    return Benchmark(ordered, cases, {})


def _check_unique(values: list[str], name: str) -> None:
    seen = set()
    for v in values:
        if v in seen:
            raise BenchmarkSchemaError(f"duplicate {name} {v!r}")
        seen.add(v)


def load_benchmark(path: str | Path) -> Benchmark:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return from_longmemeval(data)
    return from_internal(data)


def load_cases(path: str | Path) -> list[BenchmarkCase]:
    """Cases from a benchmark file, or from a JSON-lines file of case objects."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return [_parse_case(json.loads(line), f"{path}:{i}") for i, line in enumerate(path.read_text().splitlines(), 1) if line.strip()]
    return load_benchmark(path).cases
