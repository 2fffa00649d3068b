"""Fact/scene trace entries and their text serialization.

A stored memory is a ``[FACT:anchor]`` entry, optionally paired with a
``[SCENE:anchor]`` entry under the same anchor. Both carry a frontmatter block
and are cross-linked through ``linked_scene`` / ``linked_fact``.

Serialized form (no trailing newline)::

    [FACT:car_maintenance_march]
    ---
    info_type: event
    category: vehicle
    confidence: high
    evidence_score: 5
    timestamp: 2023-03-14T09:30:00Z
    linked_scene: car_maintenance_march
    ---
    Components:
    - Oil change at 30,000 miles

A SCENE entry replaces the ``Components:`` section with its body, which starts
with ``Picture:`` (conversational) or ``Moment:`` (coding) and ends with the
mnemonic disclaimer.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

DISCLAIMER = "(Mnemonic depiction only. Not evidence.)"
PICTURE_PREFIX = "Picture:"
MOMENT_PREFIX = "Moment:"
MAX_ANCHOR_LEN = 64

# Info types that put an entry on the coding rubric (0-12 score, "Moment:" scenes).
CODE_INFO_TYPES = frozenset(
    {"decision", "incident", "convention", "pattern", "learning_progression", "preference"}
)

_ANCHOR_RE = re.compile(r"^[a-z0-9_]{1,64}$")
_TAG_RE = re.compile(r"^\[(FACT|SCENE):([^\]]*)\]$")
_TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
_FRONTMATTER_KEYS = (
    "info_type",
    "category",
    "confidence",
    "evidence_score",
    "timestamp",
    "linked_scene",
    "linked_fact",
)


class TraceError(ValueError):
    """An entry violates a structural rule.

    ``rule`` is a short machine-readable name ("invalid anchor",
    "missing disclaimer", ...). Parse errors also carry ``line`` (1-based) and
    ``field`` when known.
    """

    def __init__(self, rule: str, detail: str = "", *, line: int | None = None, field: str | None = None):
        self.rule = rule
        self.detail = detail
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        msg = rule
        if where:
            msg += f" ({', '.join(where)})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TraceParseError(TraceError):
    pass


class TraceKind(str, enum.Enum):
    FACT = "FACT"
    SCENE = "SCENE"


class Confidence(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


class Rubric(str, enum.Enum):
    CONVERSATIONAL = "conversational"
    CODING = "coding"

    @property
    def max_score(self) -> int:
        return 6 if self is Rubric.CONVERSATIONAL else 12

    @property
    def scene_prefix(self) -> str:
        return PICTURE_PREFIX if self is Rubric.CONVERSATIONAL else MOMENT_PREFIX


def rubric_for(info_type: str) -> Rubric:
    return Rubric.CODING if info_type in CODE_INFO_TYPES else Rubric.CONVERSATIONAL


def validate_anchor(slug: str) -> str:
    if not isinstance(slug, str) or not _ANCHOR_RE.match(slug):
        raise TraceError("invalid anchor", f"{slug!r} must be 1-{MAX_ANCHOR_LEN} chars of [a-z0-9_]")
    return slug


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(_TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, _TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


def normalize_timestamp(ts: datetime) -> datetime:
    """UTC, truncated to whole seconds. Naive datetimes are taken as UTC."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class Frontmatter:
    info_type: str
    category: str
    confidence: Confidence
    evidence_score: int
    timestamp: datetime
    linked_scene: str | None = None
    linked_fact: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "confidence", Confidence(self.confidence))
        object.__setattr__(self, "timestamp", normalize_timestamp(self.timestamp))

    @property
    def rubric(self) -> Rubric:
        return rubric_for(self.info_type)


@dataclass(frozen=True)
class MemoryEntry:
    kind: TraceKind
    anchor: str
    frontmatter: Frontmatter
    components: tuple[str, ...] = ()
    body: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TraceKind(self.kind))
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def is_fact(self) -> bool:
        return self.kind is TraceKind.FACT

    @property
    def is_scene(self) -> bool:
        return self.kind is TraceKind.SCENE

    def text_fields(self) -> list[str]:
        """Searchable text: category, components (fact) or body (scene)."""
        if self.is_fact:
            return [self.frontmatter.category, *self.components]
        return [self.frontmatter.category, self.body or ""]


def _check_single_line(value: str, field_name: str) -> None:
    if not isinstance(value, str) or not value or value != value.strip() or "\n" in value or "\r" in value:
        raise TraceError("invalid field value", "must be a non-empty single line without surrounding whitespace", field=field_name)


def validate_entry(entry: MemoryEntry) -> None:
    """Raise TraceError naming the first violated invariant."""
    validate_anchor(entry.anchor)
    fm = entry.frontmatter
    _check_single_line(fm.info_type, "info_type")
    _check_single_line(fm.category, "category")
    if isinstance(fm.evidence_score, bool) or not isinstance(fm.evidence_score, int):
        raise TraceError("invalid evidence score", "must be an integer", field="evidence_score")
    rubric = fm.rubric
    if not 0 <= fm.evidence_score <= rubric.max_score:
        raise TraceError(
            "evidence score out of range",
            f"{fm.evidence_score} not in [0, {rubric.max_score}] for the {rubric.value} rubric",
            field="evidence_score",
        )
    if entry.is_fact:
        if fm.linked_fact is not None:
            raise TraceError("cross-link on wrong kind", "FACT entries cannot carry linked_fact", field="linked_fact")
        if fm.linked_scene is not None:
            validate_anchor(fm.linked_scene)
        if entry.body is not None:
            raise TraceError("fact with body", "FACT entries carry components, not a body")
        if not entry.components:
            raise TraceError("empty components", "FACT entries need at least one component")
        for item in entry.components:
            _check_single_line(item, "components")
    else:
        if fm.linked_scene is not None:
            raise TraceError("cross-link on wrong kind", "SCENE entries cannot carry linked_scene", field="linked_scene")
        if fm.linked_fact is not None:
            validate_anchor(fm.linked_fact)
        if entry.components:
            raise TraceError("scene with components", "SCENE entries carry a body, not components")
        body = entry.body
        if not isinstance(body, str) or not body:
            raise TraceError("empty body", "SCENE entries need a body")
        if body != body.strip() or "\r" in body or any(not ln.strip() for ln in body.split("\n")):
            raise TraceError("invalid body", "body must not contain blank lines or surrounding whitespace")
        if not body.startswith(rubric.scene_prefix):
            raise TraceError("missing scene prefix", f"body must start with {rubric.scene_prefix!r}")
        if not body.endswith(DISCLAIMER):
            raise TraceError("missing disclaimer", f"body must end with {DISCLAIMER!r}")


def serialize_entry(entry: MemoryEntry) -> str:
    validate_entry(entry)
    fm = entry.frontmatter
    lines = [
        f"[{entry.kind.value}:{entry.anchor}]",
        "---",
        f"info_type: {fm.info_type}",
        f"category: {fm.category}",
        f"confidence: {fm.confidence.value}",
        f"evidence_score: {fm.evidence_score}",
        f"timestamp: {format_timestamp(fm.timestamp)}",
    ]
    if fm.linked_scene is not None:
        lines.append(f"linked_scene: {fm.linked_scene}")
    if fm.linked_fact is not None:
        lines.append(f"linked_fact: {fm.linked_fact}")
    lines.append("---")
    if entry.is_fact:
        lines.append("Components:")
        lines.extend(f"- {item}" for item in entry.components)
    else:
        lines.append(entry.body)
    return "\n".join(lines)


def parse_entry(text: str) -> MemoryEntry:
    lines = text.split("\n")
    m = _TAG_RE.match(lines[0])
    if not m:
        raise TraceParseError("malformed tag line", repr(lines[0][:80]), line=1)
    kind = TraceKind(m.group(1))
    anchor = m.group(2)
    if not _ANCHOR_RE.match(anchor):
        raise TraceParseError("invalid anchor", repr(anchor), line=1)

    if len(lines) < 2 or lines[1] != "---":
        raise TraceParseError("missing frontmatter", "expected '---'", line=2)
    values: dict[str, str] = {}
    i = 2
    while i < len(lines) and lines[i] != "---":
        key, sep, value = lines[i].partition(": ")
        if not sep:
            raise TraceParseError("malformed frontmatter line", repr(lines[i]), line=i + 1)
        if key not in _FRONTMATTER_KEYS:
            raise TraceParseError("unknown frontmatter key", repr(key), line=i + 1, field=key)
        if key in values:
            raise TraceParseError("duplicate frontmatter key", repr(key), line=i + 1, field=key)
        expected_order = [k for k in _FRONTMATTER_KEYS if k in values or k == key]
        if list(values) + [key] != expected_order:
            raise TraceParseError("frontmatter key out of order", repr(key), line=i + 1, field=key)
        values[key] = value
        i += 1
    if i >= len(lines):
        raise TraceParseError("unterminated frontmatter", line=i)
    for required in _FRONTMATTER_KEYS[:5]:
        if required not in values:
            raise TraceParseError("missing frontmatter key", repr(required), line=i + 1, field=required)
    if kind is TraceKind.FACT and "linked_fact" in values:
        raise TraceParseError("cross-link on wrong kind", "FACT with linked_fact", field="linked_fact")
    if kind is TraceKind.SCENE and "linked_scene" in values:
        raise TraceParseError("cross-link on wrong kind", "SCENE with linked_scene", field="linked_scene")

    try:
        confidence = Confidence(values["confidence"])
    except ValueError:
        raise TraceParseError("invalid confidence", repr(values["confidence"]), field="confidence") from None
    if not re.fullmatch(r"0|[1-9][0-9]*", values["evidence_score"]):
        raise TraceParseError("invalid evidence score", repr(values["evidence_score"]), field="evidence_score")
    try:
        timestamp = parse_timestamp(values["timestamp"])
    except ValueError:
        raise TraceParseError("invalid timestamp", repr(values["timestamp"]), field="timestamp") from None
    fm = Frontmatter(
        info_type=values["info_type"],
        category=values["category"],
        confidence=confidence,
        evidence_score=int(values["evidence_score"]),
        timestamp=timestamp,
        linked_scene=values.get("linked_scene"),
        linked_fact=values.get("linked_fact"),
    )

    rest = lines[i + 1 :]
    body_line = i + 2
    if kind is TraceKind.FACT:
        if not rest or rest[0] != "Components:":
            raise TraceParseError("missing components", "expected 'Components:'", line=body_line)
        components = []
        for offset, ln in enumerate(rest[1:], start=1):
            if not ln.startswith("- "):
                raise TraceParseError("malformed component", repr(ln), line=body_line + offset)
            components.append(ln[2:])
        entry = MemoryEntry(kind=kind, anchor=anchor, frontmatter=fm, components=tuple(components))
    else:
        body = "\n".join(rest)
        if not body.endswith(DISCLAIMER):
            raise TraceParseError("missing disclaimer", line=body_line)
        entry = MemoryEntry(kind=kind, anchor=anchor, frontmatter=fm, body=body)

    try:
        validate_entry(entry)
    except TraceError as exc:
        raise TraceParseError(exc.rule, exc.detail, line=exc.line, field=exc.field) from None
    return entry


@dataclass
class PairReport:
    violations: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_pair(fact: MemoryEntry, scene: MemoryEntry) -> PairReport:
    report = PairReport()
    if not fact.is_fact:
        report.violations.append("first entry is not a FACT")
    if not scene.is_scene:
        report.violations.append("second entry is not a SCENE")
    if fact.anchor != scene.anchor:
        report.violations.append("anchor mismatch")
    if fact.frontmatter.linked_scene is None:
        report.violations.append("missing forward link")
    elif fact.frontmatter.linked_scene != scene.anchor:
        report.violations.append("forward link mismatch")
    if scene.frontmatter.linked_fact is None:
        report.violations.append("missing back-link")
    elif scene.frontmatter.linked_fact != fact.anchor:
        report.violations.append("back-link mismatch")
    if fact.frontmatter.evidence_score != scene.frontmatter.evidence_score:
        report.violations.append("evidence score mismatch")
    return report


def relink(entry: MemoryEntry, anchor: str) -> MemoryEntry:
    """Copy of ``entry`` re-anchored, with its cross-link (if any) pointing at ``anchor``."""
    fm = entry.frontmatter
    if entry.is_fact:
        fm = replace(fm, linked_scene=anchor if fm.linked_scene is not None else None)
    else:
        fm = replace(fm, linked_fact=anchor if fm.linked_fact is not None else None)
    return MemoryEntry(kind=entry.kind, anchor=anchor, frontmatter=fm, components=entry.components, body=entry.body)

