from datetime import datetime, timezone
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import TS, fact, scene
from dualtrace.traces import (
    CODE_INFO_TYPES,
    DISCLAIMER,
    Confidence,
    Frontmatter,
    MemoryEntry,
    Rubric,
    TraceError,
    TraceKind,
    TraceParseError,
    parse_entry,
    relink,
    rubric_for,
    serialize_entry,
    validate_entry,
    validate_pair,
)

GOLDEN = Path(__file__).parent / "golden"

# Written out by hand from the format description, not produced by the serializer.
FACT_TEXT = """[FACT:car_maintenance_march]
---
info_type: event
category: vehicle
confidence: high
evidence_score: 5
timestamp: 2023-03-14T09:30:00Z
linked_scene: car_maintenance_march
---
Components:
- Oil change at 30,000 miles"""

SCENE_TEXT = """[SCENE:car_maintenance_march]
---
info_type: event
category: vehicle
confidence: high
evidence_score: 5
timestamp: 2023-03-14T09:30:00Z
linked_fact: car_maintenance_march
---
Picture: a garage bay, the odometer reading 30,000. (Mnemonic depiction only. Not evidence.)"""


def test_serialize_matches_hand_written_text():
    assert serialize_entry(fact()) == FACT_TEXT
    assert serialize_entry(scene()) == SCENE_TEXT
    assert parse_entry(FACT_TEXT) == fact()
    assert parse_entry(SCENE_TEXT) == scene()


@pytest.mark.parametrize("path", sorted(GOLDEN.glob("*.txt")), ids=lambda p: p.name)
def test_golden_files_round_trip(path):
    text = path.read_text()
    assert serialize_entry(parse_entry(text)) == text


def test_every_scene_golden_ends_with_disclaimer():
    scenes = sorted(GOLDEN.glob("scene_*.txt"))
    assert scenes
    for path in scenes:
        assert path.read_text().endswith("(Mnemonic depiction only. Not evidence.)")


# -- generated entries -----------------------------------------------------------

_line_chars = st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r")
line = st.text(_line_chars, min_size=1, max_size=40).filter(lambda s: s == s.strip() and s.strip())
anchors = st.from_regex(r"[a-z0-9_]{1,64}", fullmatch=True)
timestamps = st.datetimes(min_value=datetime(1900, 1, 1), max_value=datetime(2100, 1, 1)).map(
    lambda d: d.replace(microsecond=0, tzinfo=timezone.utc)
)
info_types = st.one_of(st.sampled_from(sorted(CODE_INFO_TYPES)), line.filter(lambda s: s not in CODE_INFO_TYPES))


@st.composite
def entries(draw):
    kind = draw(st.sampled_from(list(TraceKind)))
    anchor = draw(anchors)
    info_type = draw(info_types)
    rubric = rubric_for(info_type)
    link = draw(st.one_of(st.none(), anchors))
    fm = Frontmatter(
        info_type=info_type,
        category=draw(line),
        confidence=draw(st.sampled_from(list(Confidence))),
        evidence_score=draw(st.integers(0, rubric.max_score)),
        timestamp=draw(timestamps),
        linked_scene=link if kind is TraceKind.FACT else None,
        linked_fact=link if kind is TraceKind.SCENE else None,
    )
    if kind is TraceKind.FACT:
        return MemoryEntry(kind, anchor, fm, components=tuple(draw(st.lists(line, min_size=1, max_size=5))))
    middle = draw(st.lists(line, min_size=0, max_size=4))
    first = f"{rubric.scene_prefix} {draw(line)}"
    tail = draw(st.sampled_from(["inline", "own line"]))
    lines = [first, *middle]
    if tail == "inline":
        lines[-1] = f"{lines[-1]} {DISCLAIMER}"
    else:
        lines.append(DISCLAIMER)
    return MemoryEntry(kind, anchor, fm, body="\n".join(lines))


@settings(max_examples=1000, deadline=None)
@given(entries())
def test_generated_entries_round_trip(entry):
    text = serialize_entry(entry)
    assert parse_entry(text) == entry
    assert serialize_entry(parse_entry(text)) == text


# -- parse errors ------------------------------------------------------------------


def _swap(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


@pytest.mark.parametrize(
    "text, rule",
    [
        (_swap(FACT_TEXT, "[FACT:", "[FAKT:"), "malformed tag line"),
        (_swap(FACT_TEXT, "[FACT:car_maintenance_march]", "[FACT:Car-Maintenance]"), "invalid anchor"),
        (_swap(FACT_TEXT, "---\ninfo_type", "info_type"), "missing frontmatter"),
        (_swap(FACT_TEXT, "category: vehicle\n", ""), "missing frontmatter key"),
        (_swap(FACT_TEXT, "info_type: event\ncategory: vehicle", "category: vehicle\ninfo_type: event"), "frontmatter key out of order"),
        (_swap(FACT_TEXT, "category: vehicle", "category: vehicle\ncategory: car"), "duplicate frontmatter key"),
        (_swap(FACT_TEXT, "category: vehicle", "category: vehicle\nmood: happy"), "unknown frontmatter key"),
        (_swap(FACT_TEXT, "confidence: high", "confidence: certain"), "invalid confidence"),
        (_swap(FACT_TEXT, "evidence_score: 5", "evidence_score: 05"), "invalid evidence score"),
        (_swap(FACT_TEXT, "evidence_score: 5", "evidence_score: 7"), "evidence score out of range"),
        (_swap(FACT_TEXT, "2023-03-14T09:30:00Z", "2023-03-14 09:30"), "invalid timestamp"),
        (_swap(FACT_TEXT, "linked_scene:", "linked_fact:"), "cross-link on wrong kind"),
        (_swap(FACT_TEXT, "Components:", "Details:"), "missing components"),
        (_swap(FACT_TEXT, "- Oil", "* Oil"), "malformed component"),
        (FACT_TEXT.split("Components:")[0] + "Components:", "empty components"),
        (_swap(FACT_TEXT, "category: vehicle", "category vehicle"), "malformed frontmatter line"),
        (FACT_TEXT.replace("\n---\nComponents:\n- Oil change at 30,000 miles", ""), "unterminated frontmatter"),
        (_swap(SCENE_TEXT, " (Mnemonic depiction only. Not evidence.)", ""), "missing disclaimer"),
        (_swap(SCENE_TEXT, "Picture: a garage", "A garage"), "missing scene prefix"),
        (_swap(SCENE_TEXT, "Picture:", "Moment:"), "missing scene prefix"),
        (_swap(SCENE_TEXT, "Picture: a garage bay,", "Picture: a garage bay,\n\n"), "invalid body"),
    ],
)
def test_parse_errors_name_the_rule(text, rule):
    with pytest.raises(TraceParseError) as info:
        parse_entry(text)
    assert info.value.rule == rule


def test_parse_error_reports_line_number():
    text = _swap(FACT_TEXT, "- Oil", "* Oil")
    with pytest.raises(TraceParseError) as info:
        parse_entry(text)
    assert info.value.line == 11


def test_coding_rubric_allows_score_up_to_twelve():
    e = fact(info_type="incident", score=12)
    assert e.frontmatter.rubric is Rubric.CODING
    validate_entry(e)
    with pytest.raises(TraceError):
        validate_entry(fact(info_type="incident", score=13))
    with pytest.raises(TraceError):
        validate_entry(fact(info_type="event", score=7))


def test_coding_scene_needs_moment_prefix():
    ok = scene(info_type="decision", score=9, body=f"Moment: picked sqlite in db/engine.py. {DISCLAIMER}")
    validate_entry(ok)
    with pytest.raises(TraceError, match="missing scene prefix"):
        validate_entry(scene(info_type="decision", score=9))


def test_naive_timestamps_are_taken_as_utc_and_truncated():
    fm = Frontmatter("event", "x", "high", 1, datetime(2023, 1, 2, 3, 4, 5, 999))
    assert fm.timestamp == datetime(2023, 1, 2, 3, 4, 5, tzinfo=timezone.utc)


@pytest.mark.parametrize(
    "f, s, violation",
    [
        (fact("a"), scene("b", linked_fact="a"), "anchor mismatch"),
        (fact(linked=False), scene(), "missing forward link"),
        (fact(), scene(linked_fact="other"), "back-link mismatch"),
        (fact(score=5), scene(score=4), "evidence score mismatch"),
    ],
)
def test_pair_violations(f, s, violation):
    report = validate_pair(f, s)
    assert not report.valid
    assert violation in report.violations


def test_valid_pair_and_relink():
    assert validate_pair(fact(), scene()).valid
    f2, s2 = relink(fact(), "car_maintenance_march_2"), relink(scene(), "car_maintenance_march_2")
    assert validate_pair(f2, s2).valid
    assert f2.frontmatter.linked_scene == "car_maintenance_march_2"
    assert relink(fact(linked=False), "x").frontmatter.linked_scene is None


def test_timestamp_round_trip_is_utc():
    assert "timestamp: 2023-03-14T09:30:00Z" in serialize_entry(fact(ts=TS))
