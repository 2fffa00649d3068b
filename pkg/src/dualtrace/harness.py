"""Teach/recall drivers, judging and accuracy/token accounting.

Artifacts are JSON-lines files:

* run ledger: a ``{"record": "config", ...}`` header echoing the effective run
  configuration, then one ``{"record": "session", ...}`` line per processed
  session, in input order;
* answers: one answer record per question;
* grades: one grade record per question.

The teach checkpoint is a small JSON file next to the ledger. It counts the
completed prefix of the session list, so a resumed run neither repeats nor
skips a session. Sessions that failed are listed and retried by the next run.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .benchmark import CATEGORY_ORDER, BenchmarkCase, QuestionType, Session
from .encoding import (
    SESSION_ERRORS,
    ConditionConfig,
    EncodeResult,
    Outcome,
    commit_plan,
    prepare_session,
    result_from_plan,
)
from .provider import FatalProviderError, Message, Provider, ProviderError, ProviderRequest, Usage, call_with_retries
from .retrieval import ABSTENTION, RetrievalError, answer_question
from .store import CoverageStats, IntegrityError, MemoryStore

logger = logging.getLogger(__name__)

DEFAULT_SESSION_TIMEOUT = 300.0


# -- JSON lines ----------------------------------------------------------------


def dumps_line(obj: Mapping) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | os.PathLike, records: Iterable[Mapping]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")
    os.replace(tmp, path)


def _append_line(path: Path, obj: Mapping) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps_line(obj) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


# -- teach -----------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


@dataclass
class RunCheckpoint:
    completed: int = 0
    last_completed_session: str | None = None
    failed: list[str] = field(default_factory=list)
    ledger: str | None = None
    ledger_records: int = 0
    # Completion times (seconds since epoch) of the most recent sessions.
    rate_window: list[float] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunCheckpoint:
        path = Path(path)
        if not path.exists():
            return cls()
        data = json.loads(path.read_text())
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True))
        os.replace(tmp, path)

    def sessions_per_minute(self) -> float | None:
        w = self.rate_window
        if len(w) < 2 or w[-1] <= w[0]:
            return None
        return 60.0 * (len(w) - 1) / (w[-1] - w[0])


@dataclass
class TeachRun:
    results: list[EncodeResult]
    checkpoint: RunCheckpoint
    coverage: CoverageStats
    usage: Usage
    stopped: str | None = None

    @property
    def complete(self) -> bool:
        return self.stopped is None and not self.checkpoint.failed


def _prepare_timed(session, config, scorer, generator, clock):
    start = clock()
    plan = prepare_session(session, config, scorer, generator)
    return plan, clock() - start


def _ledger_lines(path: Path) -> list[str]:
    if not path.exists():
        return []
    return path.read_text(encoding="utf-8").splitlines()


def run_teach(
    sessions: Sequence[Session],
    config: ConditionConfig,
    store: MemoryStore,
    scorer,
    generator,
    *,
    ledger_path: str | os.PathLike,
    checkpoint_path: str | os.PathLike,
    parallel: int = 1,
    session_timeout: float = DEFAULT_SESSION_TIMEOUT,
    run_config: Mapping | None = None,
    max_sessions: int | None = None,
    clock: Callable[[], float] = time.monotonic,
    rate_window: int = 20,
) -> TeachRun:
    """Encode ``sessions`` in order, checkpointing after every session.

    Model calls for up to ``parallel`` sessions run concurrently; store writes,
    ledger lines and checkpoint updates happen in session order on the calling
    thread. A session that does not finish within ``session_timeout`` seconds
    is recorded as failed and the run moves on with a fresh worker pool.
    Failed sessions from an earlier run are retried after the pending ones.
    A FatalProviderError stops the run cleanly; calling again resumes.
    ``max_sessions`` caps how many sessions this call processes.
    """
    ledger_path = Path(ledger_path)
    checkpoint_path = Path(checkpoint_path)
    ckpt = RunCheckpoint.load(checkpoint_path)
    header = {"record": "config", "condition": config.to_dict(), "run": dict(run_config or {})}

    lines = _ledger_lines(ledger_path)
    if ckpt.completed == 0 and not ckpt.failed and not lines:
        _append_line(ledger_path, header)
    else:
        if not lines or json.loads(lines[0]) != json.loads(dumps_line(header)):
            raise CheckpointError(f"{ledger_path} was written by a different run configuration")
        session_lines = [ln for ln in lines[1:] if ln.strip()]
        expected = ckpt.ledger_records
        if len(session_lines) < expected:
            raise CheckpointError(f"ledger has {len(session_lines)} session records, checkpoint expects {expected}")
        if len(session_lines) > expected:
            # Lines written after the last checkpoint save belong to an interrupted step.
            ledger_path.write_text("\n".join(lines[: 1 + expected]) + "\n", encoding="utf-8")
    ckpt.ledger = str(ledger_path)

    by_id = {s.session_id: s for s in sessions}
    retry = [by_id[sid] for sid in ckpt.failed if sid in by_id]
    pending = list(sessions[ckpt.completed :])
    work = [(s, "pending") for s in pending] + [(s, "retry") for s in retry]
    if max_sessions is not None:
        work = work[:max_sessions]

    results: list[EncodeResult] = []
    stopped = None
    window = deque(ckpt.rate_window, maxlen=rate_window)
    pool = ThreadPoolExecutor(max_workers=max(1, parallel))
    futures: dict[int, object] = {}

    def submit(i: int) -> None:
        session = work[i][0]
        futures[i] = pool.submit(_prepare_timed, session, config, scorer, generator, clock)

    try:
        for i in range(min(len(work), parallel)):
            submit(i)
        for i, (session, kind) in enumerate(work):
            if i not in futures:
                submit(i)
            try:
                plan, elapsed = futures.pop(i).result(timeout=session_timeout)
                outcome, anchors = commit_plan(plan, store)
                result = result_from_plan(plan, outcome, anchors, elapsed)
            except FutureTimeout:
                logger.error("session %s stalled past %.1fs; marking failed", session.session_id, session_timeout)
                result = EncodeResult(session.session_id, None, Outcome.FAILED, wall_time=session_timeout, error="stalled: no completion within window")
                # The stuck worker is abandoned; it never touches the store.
                pool.shutdown(wait=False, cancel_futures=True)
                pool = ThreadPoolExecutor(max_workers=max(1, parallel))
                futures.clear()
            except FatalProviderError as exc:
                logger.error("fatal provider error at session %s: %s", session.session_id, exc)
                stopped = f"fatal provider error at {session.session_id}: {exc}"
                break
            except (*SESSION_ERRORS, IntegrityError) as exc:
                logger.error("session %s failed: %s", session.session_id, exc)
                result = EncodeResult(session.session_id, None, Outcome.FAILED, error=str(exc))

            _append_line(ledger_path, {"record": "session", **result.to_record()})
            failed = [sid for sid in ckpt.failed if sid != session.session_id]
            if result.outcome is Outcome.FAILED:
                failed.append(session.session_id)
            ckpt.failed = failed
            if kind == "pending":
                ckpt.completed += 1
            ckpt.last_completed_session = session.session_id
            ckpt.ledger_records += 1
            window.append(time.time())
            ckpt.rate_window = list(window)
            ckpt.save(checkpoint_path)
            results.append(result)
            for j in range(i + 1, min(len(work), i + 1 + parallel)):
                if j not in futures:
                    submit(j)
    finally:
        pool.shutdown(wait=False, cancel_futures=True)

    if stopped is None and max_sessions is not None and len(results) < len(pending) + len(retry):
        stopped = "max_sessions reached"
    usage = Usage()
    for r in results:
        usage = usage + Usage(r.prompt_tokens, r.completion_tokens)
    return TeachRun(results, ckpt, store.coverage_stats(), usage, stopped)


# -- recall ----------------------------------------------------------------------


def run_recall(
    cases: Sequence[BenchmarkCase],
    store: MemoryStore,
    provider: Provider,
    *,
    parallel: int = 1,
    embedder=None,
    k: int = 10,
) -> list[dict]:
    """One answer record per case; a failed question yields a record with ``error``."""

    def one(case: BenchmarkCase) -> dict:
        try:
            outcome = answer_question(case.question, store, provider, k=k, embedder=embedder)
        except (RetrievalError, IntegrityError, ProviderError) as exc:
            logger.error("question %s failed: %s", case.question_id, exc)
            return {"question_id": case.question_id, "error": str(exc)}
        return outcome.to_record(case.question_id)

    if parallel <= 1:
        return [one(c) for c in cases]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(one, cases))


# -- judging ---------------------------------------------------------------------


@dataclass(frozen=True)
class GradedAnswer:
    question_id: str
    correct: bool | None
    judge_rationale: str
    category: str | None = None

    @property
    def flagged(self) -> bool:
        return self.correct is None

    def to_record(self) -> dict:
        rec = {"question_id": self.question_id, "correct": self.correct, "judge_rationale": self.judge_rationale}
        if self.category is not None:
            rec["category"] = self.category
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> GradedAnswer:
        return cls(rec["question_id"], rec.get("correct"), rec.get("judge_rationale", ""), rec.get("category"))


_PUNCT_RE = re.compile(r"[^\w\s]")


def normalized_tokens(text: str) -> list[str]:
    return _PUNCT_RE.sub("", text.lower()).split()


class DeterministicJudge:
    """Normalized containment: every gold-answer token appears in the response."""

    def grade(self, answer: str, case: BenchmarkCase) -> tuple[bool, str]:
        if case.abstention:
            ok = answer.strip() == ABSTENTION
            return ok, "abstained" if ok else "answered an unanswerable question"
        gold = normalized_tokens(case.oracle_answer)
        have = set(normalized_tokens(answer))
        missing = [t for t in gold if t not in have]
        if not gold:
            return False, "empty gold answer"
        if missing:
            return False, "missing: " + " ".join(missing)
        return True, "all gold tokens present"


JUDGE_PROMPT = """\
I will give you a question, a correct answer, and a response from a model. Please answer yes if \
the response contains the correct answer. Otherwise, answer no. If the response is equivalent to \
the correct answer or contains all the intermediate steps to get the correct answer, you should \
also answer yes. If the response only contains a subset of the information required by the \
answer, answer no.

Question: {question}

Correct answer: {answer}

Model response: {response}

Is the model response correct? Answer yes or no only."""

ABSTENTION_JUDGE_PROMPT = """\
I will give you an unanswerable question, an explanation, and a response from a model. Please \
answer yes if the model correctly identifies the question as unanswerable. The model could say \
that the information is incomplete, or some other information is given but the asked information \
is not.

Question: {question}

Explanation: {answer}

Model response: {response}

Does the model correctly identify the question as unanswerable? Answer yes or no only."""


class ModelJudge:
    """Asks a model to compare the response with the gold answer (yes/no)."""

    def __init__(self, provider: Provider, *, retries: int = 3):
        self.provider = provider
        self.retries = retries

    def grade(self, answer: str, case: BenchmarkCase) -> tuple[bool, str]:
        template = ABSTENTION_JUDGE_PROMPT if case.abstention else JUDGE_PROMPT
        prompt = template.format(question=case.question, answer=case.oracle_answer, response=answer)
        request = ProviderRequest(messages=(Message("user", prompt),), max_tokens=10, meta={"task": "judge"})
        reply = call_with_retries(self.provider.generate, request, attempts=self.retries).text.strip().lower()
        if reply.startswith("yes"):
            return True, reply
        if reply.startswith("no"):
            return False, reply
        raise ValueError(f"judge reply is neither yes nor no: {reply[:60]!r}")


def judge(answer: Mapping, case: BenchmarkCase, judge_impl) -> GradedAnswer:
    """Grade one answer record; failures (errored answer, judge error) come back flagged."""
    category = case.category.value
    if "error" in answer:
        return GradedAnswer(case.question_id, None, f"ungraded: answer failed ({answer['error']})", category)
    try:
        ok, why = judge_impl.grade(str(answer.get("answer", "")), case)
    except (ProviderError, ValueError) as exc:
        return GradedAnswer(case.question_id, None, f"ungraded: judge failed ({exc})", category)
    return GradedAnswer(case.question_id, bool(ok), why, category)


def grade_answers(answers: Sequence[Mapping], cases: Sequence[BenchmarkCase], judge_impl) -> list[GradedAnswer]:
    """One grade per case: answered cases are judged, unanswered ones are flagged."""
    by_q = {a["question_id"]: a for a in answers}
    unknown = sorted(set(by_q) - {c.question_id for c in cases})
    if unknown:
        raise KeyError(f"answers for unknown question ids: {unknown[:5]}")
    grades = []
    for case in cases:
        ans = by_q.get(case.question_id)
        if ans is None:
            grades.append(GradedAnswer(case.question_id, None, "ungraded: no answer", case.category.value))
        else:
            grades.append(judge(ans, case, judge_impl))
    return grades


# -- accuracy --------------------------------------------------------------------


@dataclass(frozen=True)
class CategoryAccuracy:
    correct: int
    total: int

    @property
    def percent(self) -> float | None:
        return 100.0 * self.correct / self.total if self.total else None


@dataclass(frozen=True)
class AccuracyTable:
    categories: dict[str, CategoryAccuracy]
    overall: CategoryAccuracy
    flagged: int = 0

    def percent(self, category: str | QuestionType) -> float | None:
        key = category.value if isinstance(category, QuestionType) else category
        return self.categories[key].percent

    def display(self) -> dict[str, str]:
        """Per-type figures to whole percent, overall to one decimal."""
        out = {}
        for key, acc in self.categories.items():
            out[key] = "-" if acc.percent is None else f"{acc.percent:.0f}"
        out["overall"] = "-" if self.overall.percent is None else f"{self.overall.percent:.1f}"
        return out

    def to_dict(self) -> dict:
        rows = {k: {"correct": v.correct, "total": v.total, "percent": v.percent} for k, v in self.categories.items()}
        rows["overall"] = {"correct": self.overall.correct, "total": self.overall.total, "percent": self.overall.percent}
        return {"categories": rows, "flagged": self.flagged}


def per_category_accuracy(
    grades: Sequence[GradedAnswer],
    cases: Sequence[BenchmarkCase],
    *,
    overall_ids: Iterable[str] | None = None,
) -> AccuracyTable:
    """Accuracy per scoring category plus overall.

    Abstention cases count only in the abstention category. Flagged grades are
    left out of every denominator. ``overall_ids`` restricts the overall figure
    to a question subset (e.g. the ids shared with another condition).
    """
    by_case = {c.question_id: c for c in cases}
    missing = [g.question_id for g in grades if g.question_id not in by_case]
    if missing:
        raise KeyError(f"grades for unknown question ids: {missing[:5]}")
    restrict = set(overall_ids) if overall_ids is not None else None
    counts = {cat.value: [0, 0] for cat in CATEGORY_ORDER}
    overall = [0, 0]
    flagged = 0
    for g in grades:
        if g.flagged:
            flagged += 1
            continue
        cat = by_case[g.question_id].category.value
        counts[cat][1] += 1
        counts[cat][0] += int(g.correct)
        if restrict is None or g.question_id in restrict:
            overall[1] += 1
            overall[0] += int(g.correct)
    return AccuracyTable(
        {k: CategoryAccuracy(c, t) for k, (c, t) in counts.items()},
        CategoryAccuracy(*overall),
        flagged,
    )


# -- tokens ----------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseTokens:
    count: int
    prompt_mean: float
    completion_mean: float

    @property
    def total_mean(self) -> float:
        return self.prompt_mean + self.completion_mean


@dataclass(frozen=True)
class TokenReport:
    teach: PhaseTokens | None
    recall: PhaseTokens | None

    @property
    def empty(self) -> bool:
        return self.teach is None and self.recall is None

    def to_dict(self) -> dict:
        out = {"empty": self.empty}
        for name in ("teach", "recall"):
            phase = getattr(self, name)
            out[name] = None if phase is None else {
                "count": phase.count,
                "prompt_mean": phase.prompt_mean,
                "completion_mean": phase.completion_mean,
                "total_mean": phase.total_mean,
            }
        return out


def _phase(records: Iterable[Mapping]) -> PhaseTokens | None:
    rows = [r for r in records if r.get("record", "session") == "session" and "prompt_tokens" in r]
    if not rows:
        return None
    n = len(rows)
    return PhaseTokens(
        n,
        sum(r["prompt_tokens"] for r in rows) / n,
        sum(r["completion_tokens"] for r in rows) / n,
    )


def token_report(teach_records: Iterable[Mapping] = (), recall_records: Iterable[Mapping] = ()) -> TokenReport:
    """Mean prompt/completion tokens per session (teach ledger) and per query (answer records)."""
    return TokenReport(_phase(teach_records), _phase(recall_records))


def relative_delta(a: float, b: float) -> float | None:
    """(a - b) / b in percent; negative means ``a`` is cheaper."""
    if b == 0:
        return None
    return 100.0 * (a - b) / b


def compare_token_reports(a: TokenReport, b: TokenReport) -> dict:
    out = {}
    for name in ("teach", "recall"):
        pa, pb = getattr(a, name), getattr(b, name)
        if pa is None or pb is None:
            out[name] = None
            continue
        out[name] = {
            "total_delta_pct": relative_delta(pa.total_mean, pb.total_mean),
            "prompt_delta_pct": relative_delta(pa.prompt_mean, pb.prompt_mean),
            "completion_delta_pct": relative_delta(pa.completion_mean, pb.completion_mean),
            "completion_ratio": pa.completion_mean / pb.completion_mean if pb.completion_mean else None,
        }
    return out
