"""Command-line entry point: ``dualtrace <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .benchmark import BenchmarkSchemaError, load_benchmark, load_cases
from .code_trace import CodeEvidenceScore, CodeInfoType, CodeKnowledge, encode_code_knowledge
from .encoding import PRESETS, ModelGenerator
from .gate import ModelScorer
from .harness import (
    DEFAULT_SESSION_TIMEOUT,
    CheckpointError,
    DeterministicJudge,
    GradedAnswer,
    ModelJudge,
    compare_token_reports,
    grade_answers,
    per_category_accuracy,
    read_jsonl,
    run_recall,
    run_teach,
    token_report,
    write_jsonl,
)
from .mock import FixtureBackend
from .provider import MockProvider, OpenAICompatibleProvider, ProviderConfig, ProviderError
from .report import accuracy_markdown, compare_grades, render_markdown
from .stats import DEFAULT_RESAMPLES, DEFAULT_SEED, StatsError
from .store import IntegrityError, MemoryStore, StoreError
from .traces import TraceError, parse_timestamp, serialize_entry

logger = logging.getLogger("dualtrace")

DEFAULTS = {
    "provider": "mock",
    "parallel": 1,
    "session_timeout": DEFAULT_SESSION_TIMEOUT,
    "seed": DEFAULT_SEED,
    "resamples": DEFAULT_RESAMPLES,
    "condition": "c6",
    "k": 10,
    "provider_config": {},
}


class UsageError(Exception):
    pass


def load_config(path: str | None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS) - {"store"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    return cfg


def effective(args: argparse.Namespace, cfg: dict, key: str):
    value = getattr(args, key, None)
    return cfg.get(key) if value is None else value


def make_provider(kind: str, cfg: dict, annotations=None):
    if kind == "mock":
        return MockProvider(handler=FixtureBackend(annotations))
    if kind == "openai":
        return OpenAICompatibleProvider(ProviderConfig.from_env(cfg.get("provider_config")))
    raise UsageError(f"unknown provider {kind!r}")


# -- subcommands ------------------------------------------------------------------


def cmd_teach(args, cfg) -> int:
    bench = load_benchmark(args.benchmark)
    condition = effective(args, cfg, "condition")
    if condition not in PRESETS:
        raise UsageError(f"unknown condition {condition!r}; choose from {', '.join(PRESETS)}")
    kind = effective(args, cfg, "provider")
    provider = make_provider(kind, cfg, bench.annotations)
    parallel = int(effective(args, cfg, "parallel"))
    timeout = float(effective(args, cfg, "session_timeout"))
    store_dir = args.store or cfg.get("store")
    if not store_dir:
        raise UsageError("teach needs --store")
    ledger = Path(args.ledger)
    checkpoint = Path(args.checkpoint) if args.checkpoint else ledger.with_name(ledger.name + ".ckpt.json")
    run_config = {
        "benchmark": str(args.benchmark),
        "provider": kind,
        "parallel": parallel,
        "session_timeout": timeout,
        "seed": int(effective(args, cfg, "seed")),
    }
    if kind == "openai":
        pc = ProviderConfig.from_env(cfg.get("provider_config"))
        run_config["model"] = pc.model
        run_config["base_url"] = pc.base_url
    extra = {}
    if args.fixed_clock:
        extra["clock"] = lambda: 0.0
    run = run_teach(
        bench.sessions,
        PRESETS[condition],
        MemoryStore(store_dir),
        ModelScorer(provider),
        ModelGenerator(provider),
        ledger_path=ledger,
        checkpoint_path=checkpoint,
        parallel=parallel,
        session_timeout=timeout,
        run_config=run_config,
        max_sessions=args.max_sessions,
        **extra,
    )
    summary = {
        "processed": len(run.results),
        "failed": run.checkpoint.failed,
        "coverage": run.coverage.to_dict(),
        "prompt_tokens": run.usage.prompt_tokens,
        "completion_tokens": run.usage.completion_tokens,
        "stopped": run.stopped,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    if run.checkpoint.failed or (run.stopped and run.stopped != "max_sessions reached"):
        return 1
    return 0


def cmd_recall(args, cfg) -> int:
    cases = load_cases(args.cases)
    provider = make_provider(effective(args, cfg, "provider"), cfg)
    store = MemoryStore(args.store or cfg.get("store"))
    records = run_recall(
        cases,
        store,
        provider,
        parallel=int(effective(args, cfg, "parallel")),
        embedder=provider if args.embed else None,
        k=int(effective(args, cfg, "k")),
    )
    write_jsonl(args.out, records)
    errors = sum("error" in r for r in records)
    print(f"{len(records)} answers written to {args.out} ({errors} failed)")
    return 1 if errors else 0


def cmd_grade(args, cfg) -> int:
    cases = load_cases(args.cases)
    answers = read_jsonl(args.answers)
    if args.judge == "deterministic":
        impl = DeterministicJudge()
    else:
        impl = ModelJudge(make_provider(effective(args, cfg, "provider"), cfg))
    grades = grade_answers(answers, cases, impl)
    write_jsonl(args.out, [g.to_record() for g in grades])
    flagged = sum(g.flagged for g in grades)
    correct = sum(bool(g.correct) for g in grades)
    print(f"{correct}/{len(grades) - flagged} correct, {flagged} ungraded; grades written to {args.out}")
    return 1 if flagged else 0


def _grades(path: str) -> list[GradedAnswer]:
    return [GradedAnswer.from_record(r) for r in read_jsonl(path)]


def cmd_report(args, cfg) -> int:
    out: dict = {}
    text = []
    if args.grades:
        if not args.cases:
            raise UsageError("report --grades needs --cases")
        table = per_category_accuracy(_grades(args.grades), load_cases(args.cases))
        out["accuracy"] = table.to_dict()
        text.append(accuracy_markdown({Path(args.grades).stem: table}))
    if args.ledger or args.answers:
        tr = token_report(read_jsonl(args.ledger) if args.ledger else (), read_jsonl(args.answers) if args.answers else ())
        out["tokens"] = tr.to_dict()
        text.append(json.dumps(tr.to_dict(), indent=2, sort_keys=True))
    if not out:
        raise UsageError("report needs --grades and/or --ledger/--answers")
    if args.json:
        Path(args.json).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print("\n".join(text))
    return 0


def cmd_compare(args, cfg) -> int:
    cases = load_cases(args.cases) if args.cases else None
    labels = tuple(args.labels.split(",")) if args.labels else (Path(args.a).stem, Path(args.b).stem)
    if len(labels) != 2:
        raise UsageError("--labels takes two comma-separated names")
    report = compare_grades(
        _grades(args.a),
        _grades(args.b),
        cases=cases,
        resamples=int(effective(args, cfg, "resamples")),
        seed=int(effective(args, cfg, "seed")),
        labels=labels,
    )
    if args.ledgers:
        ta = token_report(read_jsonl(args.ledgers[0]), read_jsonl(args.answers[0]) if args.answers else ())
        tb = token_report(read_jsonl(args.ledgers[1]), read_jsonl(args.answers[1]) if args.answers else ())
        report["tokens"] = compare_token_reports(ta, tb)
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(render_markdown(report), end="")
    if "tokens" in report:
        print(json.dumps({"tokens": report["tokens"]}, indent=2, sort_keys=True))
    return 0


def cmd_code_add(args, cfg) -> int:
    item = CodeKnowledge(
        kind=CodeInfoType(args.kind),
        facts=tuple(args.facts),
        artifacts=tuple(args.artifacts or ()),
        timeline=tuple(args.timeline or ()),
        prior=args.prior or "",
        after=args.after or "",
        narrative=args.narrative or "",
        topic=args.topic or "",
        category=args.category,
    )
    ts = parse_timestamp(args.timestamp) if args.timestamp else None
    result = encode_code_knowledge(item, CodeEvidenceScore.parse(args.score), MemoryStore(args.store), anchor=args.anchor, timestamp=ts)
    print(json.dumps({"tier": result.tier.value, "anchor": result.anchor, "updated": result.updated}, sort_keys=True))
    return 0


def cmd_inspect(args, cfg) -> int:
    store = MemoryStore(args.store)
    try:
        found = store.get_by_anchor(args.anchor)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 1
    if found is None:
        print(f"no fact stored under {args.anchor!r}", file=sys.stderr)
        return 1
    fact, scene = found
    print(serialize_entry(fact.entry))
    if scene is not None:
        print()
        print(serialize_entry(scene.entry))
    problems = [p for p in store.audit() if f" {args.anchor}:" in p or p.endswith(f" {args.anchor} missing")]
    print()
    print("links: ok" if not problems else "links: " + "; ".join(problems))
    return 1 if problems else 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualtrace", description="Dual-trace agent memory: encode, recall, grade and compare.")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("teach", help="encode benchmark sessions into a store")
    t.add_argument("--benchmark", required=True)
    t.add_argument("--condition", choices=sorted(PRESETS))
    t.add_argument("--store")
    t.add_argument("--ledger", required=True)
    t.add_argument("--checkpoint")
    t.add_argument("--parallel", type=int)
    t.add_argument("--provider", choices=["mock", "openai"])
    t.add_argument("--session-timeout", dest="session_timeout", type=float)
    t.add_argument("--max-sessions", dest="max_sessions", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--fixed-clock", dest="fixed_clock", action="store_true", help="record zero wall time (reproducible ledgers)")
    t.set_defaults(func=cmd_teach)

    r = sub.add_parser("recall", help="answer benchmark questions from a store")
    r.add_argument("--cases", required=True)
    r.add_argument("--store")
    r.add_argument("--out", required=True)
    r.add_argument("--parallel", type=int)
    r.add_argument("--provider", choices=["mock", "openai"])
    r.add_argument("--k", type=int)
    r.add_argument("--embed", action="store_true", help="re-rank hits by embedding similarity")
    r.set_defaults(func=cmd_recall)

    g = sub.add_parser("grade", help="judge answers against gold answers")
    g.add_argument("--answers", required=True)
    g.add_argument("--cases", required=True)
    g.add_argument("--judge", choices=["deterministic", "model"], default="deterministic")
    g.add_argument("--provider", choices=["mock", "openai"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_grade)

    rep = sub.add_parser("report", help="per-category accuracy and token usage for one run")
    rep.add_argument("--grades")
    rep.add_argument("--cases")
    rep.add_argument("--ledger")
    rep.add_argument("--answers")
    rep.add_argument("--json")
    rep.set_defaults(func=cmd_report)

    c = sub.add_parser("compare", help="paired comparison of two graded runs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--cases")
    c.add_argument("--labels")
    c.add_argument("--seed", type=int)
    c.add_argument("--resamples", type=int)
    c.add_argument("--ledgers", nargs=2)
    c.add_argument("--answers", nargs=2)
    c.add_argument("--json")
    c.set_defaults(func=cmd_compare)

    ct = sub.add_parser("code-trace", help="coding-agent memory entries")
    ct_sub = ct.add_subparsers(dest="code_command", required=True)
    add = ct_sub.add_parser("add", help="score, route and store one item")
    add.add_argument("--store", required=True)
    add.add_argument("--kind", required=True, choices=[k.value for k in CodeInfoType])
    add.add_argument("--score", required=True, help="durability,scope,rationale,retrieval (each 0-3)")
    add.add_argument("--facts", nargs="+", required=True)
    add.add_argument("--artifacts", nargs="*")
    add.add_argument("--timeline", nargs="*")
    add.add_argument("--prior")
    add.add_argument("--after")
    add.add_argument("--narrative")
    add.add_argument("--topic")
    add.add_argument("--category", default="codebase")
    add.add_argument("--anchor", help="anchor of an existing item to revise")
    add.add_argument("--timestamp", help="YYYY-MM-DDTHH:MM:SSZ (default now)")
    add.set_defaults(func=cmd_code_add)

    ins = sub.add_parser("inspect", help="print a stored pair and its link audit")
    ins.add_argument("anchor")
    ins.add_argument("--store", required=True)
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return int(args.func(args, cfg))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dualtrace: error: {exc}", file=sys.stderr)
        return 2
    except (
        BenchmarkSchemaError,
        CheckpointError,
        ProviderError,
        StatsError,
        StoreError,
        TraceError,
        KeyError,
        ValueError,
        OSError,
    ) as exc:
        print(f"dualtrace: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
