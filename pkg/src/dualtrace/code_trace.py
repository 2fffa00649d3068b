"""Coding-agent variant: four-dimension scoring, SKIP/RECORD/FULL routing and
``Moment:`` scenes with Timeline, Prior and After lines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .encoding import slugify
from .store import MemoryStore
from .traces import (
    DISCLAIMER,
    MOMENT_PREFIX,
    Confidence,
    Frontmatter,
    MemoryEntry,
    TraceError,
    TraceKind,
    validate_entry,
)

DIMENSIONS = ("durability", "scope", "rationale_richness", "retrieval_likelihood")


class CodeInfoType(str, enum.Enum):
    DECISION = "decision"
    INCIDENT = "incident"
    CONVENTION = "convention"
    PATTERN = "pattern"
    LEARNING_PROGRESSION = "learning_progression"
    PREFERENCE = "preference"


class CodeTier(str, enum.Enum):
    SKIP = "skip"
    RECORD = "record"
    FULL = "full"


@dataclass(frozen=True)
class CodeEvidenceScore:
    durability: int
    scope: int
    rationale_richness: int
    retrieval_likelihood: int

    def __post_init__(self) -> None:
        for name in DIMENSIONS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= 3:
                raise ValueError(f"{name} must be an integer in [0, 3], got {v!r}")

    def total(self) -> int:
        return sum(getattr(self, n) for n in DIMENSIONS)

    @classmethod
    def parse(cls, text: str) -> "CodeEvidenceScore":
        """From ``"3,2,3,2"`` in dimension order."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated ratings, got {text!r}")
        return cls(*(int(p) for p in parts))

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in DIMENSIONS}


def route_code(score: CodeEvidenceScore) -> CodeTier:
    total = score.total()
    if total <= 4:
        return CodeTier.SKIP
    if total <= 7:
        return CodeTier.RECORD
    return CodeTier.FULL


@dataclass(frozen=True)
class MomentScene:
    body: str
    timeline: tuple[str, ...] = ()
    prior: str = ""
    after: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "timeline", tuple(self.timeline))
        if not self.body.startswith(MOMENT_PREFIX):
            raise TraceError("missing scene prefix", f"moment body must start with {MOMENT_PREFIX!r}")
        for label, value in (("body", self.body), ("prior", self.prior), ("after", self.after), *(("timeline", t) for t in self.timeline)):
            if "\n" in value or "\r" in value or value != value.strip():
                raise TraceError("invalid field value", "must be a single line", field=label)
        if any(not t for t in self.timeline):
            raise TraceError("invalid field value", "timeline events cannot be empty", field="timeline")


def render_moment(scene: MomentScene) -> str:
    lines = [scene.body]
    if scene.timeline:
        lines.append("Timeline:")
        lines.extend(f"- {t}" for t in scene.timeline)
    if scene.prior:
        lines.append(f"Prior: {scene.prior}")
    if scene.after:
        lines.append(f"After: {scene.after}")
    lines.append(DISCLAIMER)
    return "\n".join(lines)


def parse_moment(body: str) -> MomentScene:
    lines = body.split("\n")
    if not lines or lines[-1] != DISCLAIMER:
        raise TraceError("missing disclaimer", f"moment must end with a {DISCLAIMER!r} line")
    lines = lines[:-1]
    narrative = lines[0] if lines else ""
    timeline: list[str] = []
    prior = after = ""
    in_timeline = False
    for ln in lines[1:]:
        if ln == "Timeline:":
            in_timeline = True
        elif in_timeline and ln.startswith("- "):
            timeline.append(ln[2:])
        elif ln.startswith("Prior: "):
            prior, in_timeline = ln[len("Prior: ") :], False
        elif ln.startswith("After: "):
            after, in_timeline = ln[len("After: ") :], False
        else:
            raise TraceError("invalid body", f"unexpected moment line {ln!r}")
    return MomentScene(narrative, tuple(timeline), prior, after)


@dataclass(frozen=True)
class CodeKnowledge:
    kind: CodeInfoType
    facts: tuple[str, ...]
    artifacts: tuple[str, ...] = ()
    timeline: tuple[str, ...] = ()
    prior: str = ""
    after: str = ""
    narrative: str = ""
    topic: str = ""
    category: str = "codebase"

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CodeInfoType(self.kind))
        object.__setattr__(self, "facts", tuple(self.facts))
        object.__setattr__(self, "artifacts", tuple(self.artifacts))
        object.__setattr__(self, "timeline", tuple(self.timeline))
        if not self.facts:
            raise ValueError("a code knowledge item needs at least one fact")


@dataclass(frozen=True)
class CodeEncodeResult:
    tier: CodeTier
    anchor: str | None
    updated: bool = False
    entries: tuple[MemoryEntry, ...] = field(default=())


def moment_for(item: CodeKnowledge) -> MomentScene:
    narrative = item.narrative.strip() or f"{MOMENT_PREFIX} {'; '.join(item.facts)}."
    if not narrative.startswith(MOMENT_PREFIX):
        narrative = f"{MOMENT_PREFIX} {narrative}"
    missing = [a for a in item.artifacts if a not in narrative]
    if missing:
        narrative += " In view: " + ", ".join(missing) + "."
    if item.kind is CodeInfoType.INCIDENT and not item.timeline:
        raise TraceError("empty timeline", "incident moments need at least one timeline event", field="timeline")
    return MomentScene(narrative, item.timeline, item.prior, item.after)


def _components(item: CodeKnowledge) -> tuple[str, ...]:
    return (*item.facts, *(f"Artifact: {a}" for a in item.artifacts))


def encode_code_knowledge(
    item: CodeKnowledge,
    score: CodeEvidenceScore,
    store: MemoryStore,
    *,
    anchor: str | None = None,
    timestamp: datetime | None = None,
) -> CodeEncodeResult:
    """Route and store one item. Passing the ``anchor`` of a stored item revises it in place."""
    tier = route_code(score)
    if tier is CodeTier.SKIP:
        return CodeEncodeResult(tier, None)

    ts = timestamp or datetime.now(timezone.utc)
    slug = anchor or slugify(item.topic or item.facts[0]) or item.kind.value
    existing = store.get(TraceKind.FACT, slug) if anchor else None
    full = tier is CodeTier.FULL
    # A RECORD-tier revision keeps a previously stored scene linked.
    keep_scene = existing is not None and not full and store.get(TraceKind.SCENE, slug) is not None

    fm = Frontmatter(
        info_type=item.kind.value,
        category=item.category,
        confidence=Confidence.HIGH if full else Confidence.MEDIUM,
        evidence_score=score.total(),
        timestamp=ts,
        linked_scene=slug if (full or keep_scene) else None,
    )
    fact = MemoryEntry(TraceKind.FACT, slug, fm, components=_components(item))
    validate_entry(fact)
    scene = None
    if full:
        scene_fm = Frontmatter(
            info_type=item.kind.value,
            category=item.category,
            confidence=Confidence.HIGH,
            evidence_score=score.total(),
            timestamp=ts,
            linked_fact=slug,
        )
        scene = MemoryEntry(TraceKind.SCENE, slug, scene_fm, body=render_moment(moment_for(item)))
        validate_entry(scene)

    if existing is not None:
        store.replace(fact, scene)
        return CodeEncodeResult(tier, slug, updated=True, entries=tuple(e for e in (fact, scene) if e))
    if scene is not None:
        final = store.insert_pair(fact, scene)
    else:
        final = store.insert_fact(fact)
    return CodeEncodeResult(tier, final, entries=tuple(e for e in (fact, scene) if e))
