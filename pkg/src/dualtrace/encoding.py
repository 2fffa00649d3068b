"""Turn a scored session into stored traces for the active condition.

Encoding is split in two so that slow model calls can run in parallel while
store writes stay single-writer and in session order:

* :func:`prepare_session` scores, routes and drafts the entries (no store access);
* :func:`commit_plan` writes the drafted entries (or the drop) to the store.
"""

from __future__ import annotations

import enum
import logging
import re
import time
from dataclasses import dataclass, field

from .gate import EvidenceScore, Scheme, Scorer, ScoringError, Tier, extract_json_object, route
from .provider import FatalProviderError, Message, Provider, ProviderError, ProviderRequest, Usage, call_with_retries
from .store import MemoryStore
from .traces import (
    DISCLAIMER,
    MAX_ANCHOR_LEN,
    PICTURE_PREFIX,
    Confidence,
    Frontmatter,
    MemoryEntry,
    TraceError,
    TraceKind,
    validate_entry,
)

logger = logging.getLogger(__name__)


class Condition(str, enum.Enum):
    DUAL_TRACE = "dual_trace"
    FACT_ONLY = "fact_only"


@dataclass(frozen=True)
class ConditionConfig:
    condition: Condition
    routing_scheme: Scheme

    def to_dict(self) -> dict:
        return {"condition": self.condition.value, "routing_scheme": self.routing_scheme.value}


C6_DRAW = ConditionConfig(Condition.DUAL_TRACE, Scheme.TWO_TIER)
C7_CONTROL = ConditionConfig(Condition.FACT_ONLY, Scheme.TWO_TIER)
C4_EVIDENCE = ConditionConfig(Condition.DUAL_TRACE, Scheme.THREE_TIER)
PRESETS = {"c6": C6_DRAW, "c7": C7_CONTROL, "c4": C4_EVIDENCE}


class Outcome(str, enum.Enum):
    DROPPED = "dropped"
    FACT_STORED = "fact_stored"
    PAIR_STORED = "pair_stored"
    FAILED = "failed"


class EncodingError(RuntimeError):
    pass


_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    slug = _SLUG_RE.sub("_", text.lower()).strip("_")
    return slug[:MAX_ANCHOR_LEN].rstrip("_")


def make_anchor(proposal: str, session_id: str) -> str:
    """Slug from the generator's topic phrase, falling back to ``session_<id>``."""
    slug = slugify(proposal or "")
    if slug:
        return slug
    return slugify(f"session_{session_id}") or "session"


def repair_scene(text: str, prefix: str = PICTURE_PREFIX) -> str:
    """Force the required prefix and trailing disclaimer onto generator output."""
    lines = [ln.strip() for ln in text.replace("\r", "").split("\n")]
    body = "\n".join(ln for ln in lines if ln)
    if DISCLAIMER in body:
        body = body.replace(DISCLAIMER, "").strip()
    if not body.startswith(prefix):
        body = f"{prefix} {body}" if body else prefix
    return f"{body} {DISCLAIMER}"


def _clean_line(text: str) -> str:
    return " ".join(str(text).split())


@dataclass(frozen=True)
class FactDraft:
    topic: str
    category: str
    info_type: str
    components: tuple[str, ...]

    def __post_init__(self) -> None:
        comps = tuple(c for c in (_clean_line(x) for x in self.components) if c)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "category", _clean_line(self.category) or "general")
        object.__setattr__(self, "info_type", _clean_line(self.info_type) or "personal_fact")


FACT_PROMPT = """\
Extract the personal information the user shared in this conversation.

Reply with one JSON object:
{"topic": "<short descriptive topic phrase, e.g. Car Maintenance March>",
 "category": "<topical category>",
 "info_type": "<kind of information, e.g. event, preference_personal, background>",
 "components": ["<one specific detail per item: names, numbers, dates, events>", ...]}
"""

SCENE_PROMPT = """\
Write a scene trace for the facts below: one concrete, imageable moment that embeds every
listed detail. Commit to specifics: the spatial layout and the objects present, and explicit
temporal markers (the session date, and words like before, after, first, then).
Begin with exactly "Picture:" and end with exactly "(Mnemonic depiction only. Not evidence.)".
Write a single paragraph.

Example: Picture: a corkboard above the desk, a race bib reading "Finished: 35:00" pinned next
to a church bulletin with "$200 raised" circled, both dated the first weekend of March.
(Mnemonic depiction only. Not evidence.)
"""


class ModelGenerator:
    """Drafts fact components and scene text through the provider."""

    def __init__(self, provider: Provider, *, retries: int = 3, max_tokens: int = 800):
        self.provider = provider
        self.retries = retries
        self.max_tokens = max_tokens

    def _call(self, system: str, user: str, task: str, session_id: str):
        request = ProviderRequest(
            messages=(Message("system", system), Message("user", user)),
            max_tokens=self.max_tokens,
            meta={"task": task, "session_id": session_id},
        )
        return call_with_retries(self.provider.generate, request, attempts=self.retries)

    def draft_fact(self, session) -> tuple[FactDraft, Usage]:
        resp = self._call(FACT_PROMPT, session.transcript(), "fact", session.session_id)
        try:
            obj = extract_json_object(resp.text)
            comps = obj["components"]
            if isinstance(comps, str) or not isinstance(comps, list):
                raise TypeError("components must be a list")
            draft = FactDraft(
                topic=str(obj.get("topic", "")),
                category=str(obj.get("category", "")),
                info_type=str(obj.get("info_type", "")),
                components=tuple(str(c) for c in comps),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise EncodingError(f"unparseable fact draft for {session.session_id!r}: {exc}") from exc
        return draft, resp.usage

    def draft_scene(self, session, draft: FactDraft) -> tuple[str, Usage]:
        user = "\n".join(
            [
                f"Session date: {session.date:%Y-%m-%d}",
                f"Topic: {draft.topic}",
                "Facts:",
                *(f"- {c}" for c in draft.components),
            ]
        )
        resp = self._call(SCENE_PROMPT, user, "scene", session.session_id)
        return resp.text, resp.usage


@dataclass
class EncodePlan:
    session_id: str
    score: EvidenceScore | None = None
    tier: Tier | None = None
    fact: MemoryEntry | None = None
    scene: MemoryEntry | None = None
    usage: Usage = Usage()
    error: str | None = None


@dataclass
class EncodeResult:
    session_id: str
    tier: str | None
    outcome: Outcome
    anchors: list[str] = field(default_factory=list)
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_time: float = 0.0
    score: dict | None = None
    error: str | None = None

    def to_record(self) -> dict:
        rec = {
            "session_id": self.session_id,
            "tier": self.tier,
            "outcome": self.outcome.value,
            "anchors": list(self.anchors),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_time": round(self.wall_time, 6),
            "score": self.score,
        }
        if self.error is not None:
            rec["error"] = self.error
        return rec


SESSION_ERRORS = (ScoringError, EncodingError, ProviderError, TraceError)


def entry_confidence(score_total: int, with_scene: bool, admit_threshold: int = 3) -> Confidence:
    if score_total <= admit_threshold:
        return Confidence.LOW
    return Confidence.HIGH if with_scene else Confidence.MEDIUM


def prepare_session(session, config: ConditionConfig, scorer: Scorer, generator) -> EncodePlan:
    """Score, route and draft; raises ScoringError / EncodingError / ProviderError on failure."""
    if not session.messages:
        raise EncodingError(f"session {session.session_id!r} is empty")
    scored = scorer.score(session)
    decision = route(scored.score, config.routing_scheme)
    plan = EncodePlan(session.session_id, scored.score, decision.tier, usage=scored.usage)
    if decision.tier is Tier.DROP:
        return plan

    want_scene = decision.tier is Tier.FULL and config.condition is Condition.DUAL_TRACE
    draft, usage = generator.draft_fact(session)
    plan.usage = plan.usage + usage
    if not draft.components:
        raise EncodingError(f"generator produced no components for {session.session_id!r}")
    anchor = make_anchor(draft.topic, session.session_id)
    total = scored.score.total()
    fm = Frontmatter(
        info_type=draft.info_type,
        category=draft.category,
        confidence=entry_confidence(total, want_scene),
        evidence_score=total,
        timestamp=session.date,
        linked_scene=anchor if want_scene else None,
    )
    plan.fact = MemoryEntry(TraceKind.FACT, anchor, fm, components=draft.components)
    validate_entry(plan.fact)

    if want_scene:
        text, usage = generator.draft_scene(session, draft)
        plan.usage = plan.usage + usage
        scene_fm = Frontmatter(
            info_type=draft.info_type,
            category=draft.category,
            confidence=fm.confidence,
            evidence_score=total,
            timestamp=session.date,
            linked_fact=anchor,
        )
        scene = MemoryEntry(TraceKind.SCENE, anchor, scene_fm, body=text)
        try:
            validate_entry(scene)
        except TraceError:
            scene = MemoryEntry(TraceKind.SCENE, anchor, scene_fm, body=repair_scene(text))
            validate_entry(scene)
        plan.scene = scene
    return plan


def commit_plan(plan: EncodePlan, store: MemoryStore) -> tuple[Outcome, list[str]]:
    """Write a prepared plan. Idempotent per session id."""
    done = store.session_outcome(plan.session_id)
    if done is not None:
        return Outcome(done["outcome"]), list(done["anchors"])
    if plan.fact is None:
        store.record_drop(plan.session_id)
        return Outcome.DROPPED, []
    if plan.scene is not None:
        anchor = store.insert_pair(plan.fact, plan.scene, plan.session_id)
        return Outcome.PAIR_STORED, [anchor]
    anchor = store.insert_fact(plan.fact, plan.session_id)
    return Outcome.FACT_STORED, [anchor]


def encode_session(session, config: ConditionConfig, store: MemoryStore, scorer: Scorer, generator, *, clock=time.monotonic) -> EncodeResult:
    """Encode one session end to end.

    Per-session failures come back as a FAILED result, never a silent skip.
    FatalProviderError propagates: the run cannot continue.
    """
    start = clock()
    try:
        plan = prepare_session(session, config, scorer, generator)
        outcome, anchors = commit_plan(plan, store)
    except FatalProviderError:
        raise
    except SESSION_ERRORS as exc:
        logger.error("session %s failed: %s", session.session_id, exc)
        return EncodeResult(session.session_id, None, Outcome.FAILED, wall_time=clock() - start, error=str(exc))
    return result_from_plan(plan, outcome, anchors, clock() - start)


def result_from_plan(plan: EncodePlan, outcome: Outcome, anchors: list[str], wall_time: float) -> EncodeResult:
    return EncodeResult(
        session_id=plan.session_id,
        tier=plan.tier.value if plan.tier else None,
        outcome=outcome,
        anchors=anchors,
        prompt_tokens=plan.usage.prompt_tokens,
        completion_tokens=plan.usage.completion_tokens,
        wall_time=wall_time,
        score=plan.score.to_dict() if plan.score else None,
    )
