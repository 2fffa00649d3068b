"""Exit criteria 1-9. Each test carries ``acceptance(n)``; the terminal summary
prints one PASS/FAIL line per criterion."""

import itertools
import math
import time
from importlib.resources import files
from pathlib import Path

import pytest
from hypothesis import given, settings

from builders import reference_grades, write_raw_store
from test_retrieval import COMBOS, CONFIGS, Q, oracle
from test_traces import entries as entry_strategy
from dualtrace.benchmark import BenchmarkCase, load_benchmark
from dualtrace.code_trace import CodeEvidenceScore, CodeTier, route_code
from dualtrace.encoding import C6_DRAW, C7_CONTROL, ModelGenerator
from dualtrace.gate import EvidenceScore, ModelScorer, Tier, route_three_tier, route_two_tier
from dualtrace.harness import (
    DeterministicJudge,
    compare_token_reports,
    grade_answers,
    per_category_accuracy,
    read_jsonl,
    run_recall,
    run_teach,
    token_report,
)
from dualtrace.mock import FixtureBackend
from dualtrace.provider import MockProvider
from dualtrace.report import compare_grades
from dualtrace.retrieval import ABSTENTION, answer_question
from dualtrace.stats import (
    AgreementTable,
    bootstrap_paired,
    mcnemar,
    outcomes_from_table,
    paired_delta_se,
    per_category_bootstrap,
)
from dualtrace.store import IntegrityError, MemoryStore
from dualtrace.traces import DISCLAIMER, TraceKind, parse_entry, serialize_entry

GOLDEN = Path(__file__).parent / "golden"
SYNTH = files("dualtrace") / "data" / "synthetic_benchmark.json"
REFERENCE_TABLE = AgreementTable(51, 22, 2, 24)


# -- 1 -------------------------------------------------------------------------


@pytest.mark.acceptance(1)
def test_mcnemar_on_reference_table():
    start = time.perf_counter()
    res = mcnemar(REFERENCE_TABLE)
    assert time.perf_counter() - start < 1.0
    # (|22 - 2| - 1)^2 / 24 = 361 / 24
    assert res.chi_squared == pytest.approx(15.04, abs=0.01)
    assert res.chi_squared == pytest.approx(361 / 24)
    assert res.p_value < 0.001


# -- 2 -------------------------------------------------------------------------


@pytest.mark.acceptance(2)
def test_bootstrap_on_reconstructed_outcomes():
    outcomes = outcomes_from_table(REFERENCE_TABLE)
    assert len(outcomes) == 99

    # Independent plug-in SE from the cell counts, before running anything.
    n, disc, net = 99, 22 + 2, 22 - 2
    se = 100 * math.sqrt((disc / n - (net / n) ** 2) / n)
    assert se == pytest.approx(4.5, abs=0.1)
    assert paired_delta_se(outcomes) == pytest.approx(se)

    start = time.perf_counter()
    res = bootstrap_paired(outcomes, 10_000, 42)
    assert time.perf_counter() - start < 5.0
    assert res.point_delta == pytest.approx(20.2, abs=0.1)
    assert res.ci_low == pytest.approx(12.1, abs=1.5)
    assert res.ci_high == pytest.approx(29.3, abs=1.5)
    # A normal interval of the same width agrees with the percentile one.
    assert res.ci_high - res.ci_low == pytest.approx(2 * 1.96 * se, abs=1.5)
    assert res.p_one_sided <= 0.0001


# -- 3 -------------------------------------------------------------------------


@pytest.mark.acceptance(3)
def test_per_category_bootstrap():
    temporal = outcomes_from_table(AgreementTable(4, 9, 1, 6), prefix="t", category="temporal")
    single = outcomes_from_table(AgreementTable(14, 1, 1, 4), prefix="s", category="single_session")
    res = per_category_bootstrap([*single, *temporal], 10_000, 42).results

    t = res["temporal"]
    assert (t.a_accuracy, t.b_accuracy) == (65.0, 25.0)
    assert t.point_delta == pytest.approx(40.0)
    assert t.ci_low == pytest.approx(15, abs=3)
    assert t.ci_high == pytest.approx(65, abs=3)
    assert t.p_one_sided <= 0.01

    s = res["single_session"]
    assert s.point_delta == 0
    assert s.p_one_sided == pytest.approx(0.657, abs=0.1)


@pytest.mark.acceptance(3)
def test_full_comparison_report_matches_rows():
    a, b, cases = reference_grades()
    rows = {r["category"]: r for r in compare_grades(a, b, cases=cases)["rows"]}
    t, s = rows["Temporal reasoning"], rows["Single-session"]
    assert t["delta"] == pytest.approx(40) and t["p"] <= 0.01
    assert t["ci"][0] == pytest.approx(15, abs=3) and t["ci"][1] == pytest.approx(65, abs=3)
    assert s["delta"] == 0 and s["p"] == pytest.approx(0.657, abs=0.1)


# -- 4 -------------------------------------------------------------------------

TYPES = ("single_session", "multi_session", "knowledge_update", "temporal")

# Printed row: overall, four per-type percentages, abstention percentage, and
# how the 20th abstention question is graded (None = not answered).
CONDITION_ROWS = {
    "Vanilla": ("20.0", (0, 0, 0, 0), 100, True),
    "C1": ("40.4", (50, 0, 35, 20), 100, True),
    "C2": ("38.4", (40, 15, 30, 20), 85, False),
    "C3": ("47.5", (55, 5, 55, 30), 95, True),
    "C4": ("47.5", (60, 10, 45, 30), 95, True),
    "C5-FS": ("48.5", (60, 20, 45, 25), 95, True),
    "C7": ("53.5", (75, 20, 55, 25), 95, True),
    "C6": ("73.7", (75, 50, 80, 65), 100, None),
}


def _condition_cases():
    cases = [BenchmarkCase(f"{t}_{i:02d}", t, "q", "gold") for t in TYPES for i in range(1, 21)]
    cases += [BenchmarkCase(f"abs_{i:02d}", "abstention", "q", "gold", abstention=True) for i in range(1, 21)]
    return cases


def _condition_grades(per_type, abst_pct, last_abst):
    from dualtrace.harness import GradedAnswer

    grades = []
    for t, pct in zip(TYPES, per_type):
        k = pct * 20 // 100
        grades += [GradedAnswer(f"{t}_{i:02d}", i <= k, "", t) for i in range(1, 21)]
    answered = 19 if last_abst is None else 20
    k = round(abst_pct * answered / 100)
    head = k - 1 if last_abst else k
    grades += [GradedAnswer(f"abs_{i:02d}", i <= head, "", "abstention") for i in range(1, 20)]
    if last_abst is not None:
        grades.append(GradedAnswer("abs_20", last_abst, "", "abstention"))
    return grades


@pytest.mark.acceptance(4)
@pytest.mark.parametrize("label", list(CONDITION_ROWS))
def test_condition_rows_reconstruct(label):
    overall, per_type, abst, last = CONDITION_ROWS[label]
    cases = _condition_cases()
    grades = _condition_grades(per_type, abst, last)
    # The shared 99 exclude the abstention question one condition never answered;
    # the no-memory baseline is reported over all 100.
    shared = None if label == "Vanilla" else [c.question_id for c in cases if c.question_id != "abs_20"]
    table = per_category_accuracy(grades, cases, overall_ids=shared)
    shown = table.display()
    assert shown["overall"] == overall
    assert [shown[t] for t in TYPES] == [str(p) for p in per_type]
    assert shown["abstention"] == str(abst)
    assert table.overall.total == (100 if label == "Vanilla" else 99)


def test_c6_abstention_denominator():
    table = per_category_accuracy(_condition_grades((75, 50, 80, 65), 100, None), _condition_cases())
    assert table.categories["abstention"].total == 19
    assert (table.overall.correct, table.overall.total) == (73, 99)


# -- 5 -------------------------------------------------------------------------


def _two_tier_oracle(r, s, e, stakes):
    return "DROP" if r + s + e <= 2 else "FULL"


def _three_tier_oracle(r, s, e, stakes):
    total = r + s + e
    if total <= 2:
        return "DROP"
    if stakes:
        return "FULL"
    return {3: "STREAMLINED", 4: "STREAMLINED", 5: "FULL", 6: "FULL"}[total]


def _code_oracle(d):
    total = sum(d)
    return "skip" if total <= 4 else "record" if total <= 7 else "full"


@pytest.mark.acceptance(5)
def test_routing_truth_tables_exhaustive():
    start = time.perf_counter()
    rows = 0
    for r, s, e in itertools.product(range(3), repeat=3):
        for stakes in (False, True):
            score = EvidenceScore(r, s, e, stakes)
            assert route_two_tier(score).tier is Tier(_two_tier_oracle(r, s, e, stakes))
            assert route_three_tier(score).tier is Tier(_three_tier_oracle(r, s, e, stakes))
            rows += 1
    for dims in itertools.product(range(4), repeat=4):
        assert route_code(CodeEvidenceScore(*dims)) is CodeTier(_code_oracle(dims))
        rows += 1
    assert rows == 27 * 2 + 256
    assert time.perf_counter() - start < 1.0


# -- 6 -------------------------------------------------------------------------


@pytest.mark.acceptance(6)
@settings(max_examples=1000, deadline=None, database=None)
@given(entry_strategy())
def test_generated_entries_round_trip(entry):
    text = serialize_entry(entry)
    assert parse_entry(text) == entry
    assert serialize_entry(parse_entry(text)) == text


@pytest.mark.acceptance(6)
def test_scene_goldens_end_with_disclaimer():
    scenes = [p for p in sorted(GOLDEN.glob("*.txt")) if p.read_text().startswith("[SCENE:")]
    assert scenes
    for path in scenes:
        text = path.read_text()
        assert text.rstrip("\n").endswith(DISCLAIMER), path.name
        assert serialize_entry(parse_entry(text)) == text.rstrip("\n")


# -- 7 -------------------------------------------------------------------------


@pytest.mark.acceptance(7)
@pytest.mark.parametrize("parts", COMBOS, ids="+".join)
def test_three_state_oracle(tmp_path, parts):
    write_raw_store(tmp_path, [e for p in parts for e in CONFIGS[p]])
    provider = MockProvider(handler=FixtureBackend())
    expected = oracle(parts)
    if expected == "integrity-error":
        with pytest.raises(IntegrityError):
            answer_question(Q, MemoryStore(tmp_path), provider)
        return
    out = answer_question(Q, MemoryStore(tmp_path), provider)
    assert out.state.value == expected
    if expected == "C":
        assert out.answer.encode() == ABSTENTION.encode() == b"I don't have that information stored."
        assert provider.calls == 0


# -- 8 -------------------------------------------------------------------------

# Hand count from the fixture annotations: totals <= 2 are dropped.
STORED = ["s01", "s03", "s05", "s07", "s08", "s10", "s11", "s12"]
DROPPED = ["s02", "s04", "s06", "s09"]


def _teach(bench, root, config, **kw):
    provider = MockProvider(handler=FixtureBackend(bench.annotations))
    store = MemoryStore(root / "store")
    run = run_teach(
        bench.sessions, config, store, ModelScorer(provider), ModelGenerator(provider),
        ledger_path=root / "ledger.jsonl", checkpoint_path=root / "ckpt.json",
        run_config={"benchmark": "synthetic", "seed": 42}, clock=lambda: 0.0, **kw,
    )
    return run, store, provider


def _end_to_end(bench, root, config):
    run, store, provider = _teach(bench, root, config)
    answers = run_recall(bench.cases, store, provider)
    grades = grade_answers(answers, bench.cases, DeterministicJudge())
    return run, store, grades


@pytest.mark.acceptance(8)
def test_end_to_end_mock_run(tmp_path):
    start = time.perf_counter()
    bench = load_benchmark(SYNTH)
    assert bench.counts == (12, 8)

    c6, c6_store, c6_grades = _end_to_end(bench, tmp_path / "c6", C6_DRAW)
    c7, c7_store, c7_grades = _end_to_end(bench, tmp_path / "c7", C7_CONTROL)
    assert c6.complete and c7.complete

    full = sorted(r.session_id for r in c6.results if r.tier == "FULL")
    assert full == STORED
    scene_sessions = sorted(r.session_id for r in c6_store.records() if r.entry.kind is TraceKind.SCENE)
    assert scene_sessions == full
    assert not [r for r in c7_store.records() if r.entry.kind is TraceKind.SCENE]

    for run in (c6, c7):
        cov = run.coverage
        assert (cov.sessions_processed, cov.sessions_stored) == (12, 8)
        assert cov.coverage_ratio == pytest.approx(8 / 12)
        assert sorted(r.session_id for r in run.results if r.outcome.value == "dropped") == DROPPED
    assert c6.coverage.sessions_dual == 8 and c7.coverage.sessions_dual == 0

    # Same inputs, same outputs.
    again, _, again_grades = _end_to_end(bench, tmp_path / "c6_again", C6_DRAW)
    assert (tmp_path / "c6_again" / "ledger.jsonl").read_bytes() == (tmp_path / "c6" / "ledger.jsonl").read_bytes()
    assert again_grades == c6_grades
    assert all(g.correct is not None for g in c6_grades + c7_grades)

    reference = (tmp_path / "c6" / "ledger.jsonl").read_bytes()
    for cut in (1, 5, 11):
        root = tmp_path / f"cut{cut}"
        first, _, _ = _teach(bench, root, C6_DRAW, max_sessions=cut)
        assert first.stopped == "max_sessions reached"
        _teach(bench, root, C6_DRAW)
        assert (root / "ledger.jsonl").read_bytes() == reference
        assert (root / "store" / "entries.log").read_bytes() == (tmp_path / "c6" / "store" / "entries.log").read_bytes()

    assert time.perf_counter() - start < 10.0


# -- 9 -------------------------------------------------------------------------


@pytest.mark.acceptance(9)
def test_ledger_totals_equal_mock_counts(tmp_path):
    bench = load_benchmark(SYNTH)
    run, _, provider = _teach(bench, tmp_path, C6_DRAW)
    rows = [r for r in read_jsonl(tmp_path / "ledger.jsonl") if r["record"] == "session"]
    ledger_prompt = sum(r["prompt_tokens"] for r in rows)
    ledger_completion = sum(r["completion_tokens"] for r in rows)
    mock = provider.total_usage()
    assert (ledger_prompt, ledger_completion) == (mock.prompt_tokens, mock.completion_tokens)
    assert (run.usage.prompt_tokens, run.usage.completion_tokens) == (mock.prompt_tokens, mock.completion_tokens)
    assert mock.prompt_tokens > 0 and mock.completion_tokens > 0


def _session(p, c):
    return {"record": "session", "prompt_tokens": p, "completion_tokens": c}


@pytest.mark.acceptance(9)
def test_report_deltas_match_hand_computation():
    header = {"record": "config"}
    a = token_report(
        [header, _session(100, 20), _session(300, 40)],
        [{"prompt_tokens": 1000, "completion_tokens": 50}, {"prompt_tokens": 1200, "completion_tokens": 70}],
    )
    b = token_report(
        [header, _session(150, 10), _session(250, 10)],
        [{"prompt_tokens": 1100, "completion_tokens": 40}],
    )
    # Per-session means: a = 200 + 30 = 230, b = 200 + 10 = 210.
    assert (a.teach.prompt_mean, a.teach.completion_mean, a.teach.total_mean) == (200, 30, 230)
    assert (b.teach.prompt_mean, b.teach.completion_mean, b.teach.total_mean) == (200, 10, 210)
    d = compare_token_reports(a, b)
    assert d["teach"]["total_delta_pct"] == pytest.approx(100 * 20 / 210)
    assert d["teach"]["prompt_delta_pct"] == 0
    assert d["teach"]["completion_delta_pct"] == pytest.approx(200.0)
    assert d["teach"]["completion_ratio"] == pytest.approx(3.0)
    # Per-query means: a = 1100 + 60, b = 1100 + 40.
    assert d["recall"]["total_delta_pct"] == pytest.approx(100 * 20 / 1140)
    assert d["recall"]["completion_ratio"] == pytest.approx(1.5)
