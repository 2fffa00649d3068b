"""Three-state retrieval over the archival store.

* State A: at least one fact with its linked scene was found. The prompt quotes
  the scene(s) and asks for the scene to be reconstructed before answering
  (high confidence).
* State B: facts but no scenes. The prompt carries fact components only and
  forbids inventing a scene (medium confidence).
* State C: nothing relevant. The fixed abstention sentence is returned and the
  provider is not called.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .provider import Message, Provider, ProviderError, ProviderRequest, Usage, call_with_retries
from .store import DEFAULT_K, IntegrityError, MemoryStore, SearchHit, StoreRecord
from .traces import TraceKind, serialize_entry

ABSTENTION = "I don't have that information stored."

# Hits at or below this lexical score count as "nothing found".
RELEVANCE_FLOOR = 0


class State(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"


CONFIDENCE = {State.A: "high", State.B: "medium", State.C: "none"}


class RetrievalError(RuntimeError):
    """The answer call failed; retry the question rather than downgrading its state."""

    retryable = True


@dataclass
class RetrievalOutcome:
    state: State
    confidence: str
    evidence: list[StoreRecord]
    answer: str
    prompt: str | None = None
    usage: Usage = Usage()
    aggregative: bool = False

    @property
    def anchors_used(self) -> list[str]:
        return list(dict.fromkeys(r.anchor for r in self.evidence))

    def to_record(self, question_id: str) -> dict:
        return {
            "question_id": question_id,
            "state": self.state.value,
            "confidence": self.confidence,
            "anchors_used": self.anchors_used,
            "answer": self.answer,
            "prompt_tokens": self.usage.prompt_tokens,
            "completion_tokens": self.usage.completion_tokens,
        }


@dataclass
class _Pair:
    fact: StoreRecord
    scene: StoreRecord | None
    rank: int


def relevant_hits(hits: Sequence[SearchHit]) -> list[SearchHit]:
    return [h for h in hits if h.score > RELEVANCE_FLOOR or h.completed]


def _pairs(hits: Sequence[SearchHit]) -> list[_Pair]:
    facts: dict[str, tuple[int, StoreRecord]] = {}
    scenes: dict[str, StoreRecord] = {}
    for rank, hit in enumerate(relevant_hits(hits)):
        rec = hit.record
        if rec.entry.kind is TraceKind.FACT:
            facts.setdefault(rec.anchor, (rank, rec))
        else:
            scenes[rec.anchor] = rec
    pairs = []
    for anchor, (rank, fact) in facts.items():
        linked = fact.entry.frontmatter.linked_scene
        scene = None
        if linked is not None:
            scene = scenes.get(linked)
            if scene is None:
                raise IntegrityError(f"fact {anchor!r} links scene {linked!r}, which is not stored")
        pairs.append(_Pair(fact, scene, rank))
    paired_scene_anchors = {p.scene.anchor for p in pairs if p.scene is not None}
    for anchor, scene in scenes.items():
        if anchor not in paired_scene_anchors:
            raise IntegrityError(f"scene {anchor!r} has no stored fact")
    return sorted(pairs, key=lambda p: p.rank)


def classify_state(hits: Sequence[SearchHit]) -> State:
    """A if any fact arrives with its scene, B if only facts, C if nothing relevant.

    Raises IntegrityError when a cross-link is dangling (search pair-completion
    would have pulled the partner in had it existed).
    """
    pairs = _pairs(hits)
    if not pairs:
        return State.C
    if any(p.scene is not None for p in pairs):
        return State.A
    return State.B


ANSWER_SYSTEM = """\
You answer questions about the user from your stored memory entries only. Do not use general \
knowledge to fill gaps about the user's own experiences."""

STATE_A_INSTRUCTIONS = """\
Memory state A: facts with scene traces were found.
Step 1: reconstruct each scene below in your own words, re-entering the moment it depicts \
(where, when, what was present). Scenes are mnemonic depictions; the facts are the evidence.
Step 2: answer the question with high confidence, grounded in the fact components."""

STATE_B_INSTRUCTIONS = """\
Memory state B: facts were found but no scene traces.
Answer from the fact components only, with medium confidence. Do not fabricate or hallucinate \
a scene."""

AGGREGATION_INSTRUCTIONS = """\
Several distinct memories match. Read every entry in full. Before answering, list the relevant \
events in explicit chronological order using the timestamps and any temporal anchors in the \
scenes, then synthesize one composite answer."""


def build_prompt(question: str, state: State, pairs: Sequence[_Pair], aggregative: bool) -> tuple[list[Message], list[StoreRecord]]:
    evidence: list[StoreRecord] = []
    blocks = []
    for p in pairs:
        evidence.append(p.fact)
        blocks.append(serialize_entry(p.fact.entry))
        if state is State.A and p.scene is not None:
            evidence.append(p.scene)
            blocks.append(serialize_entry(p.scene.entry))
    parts = [STATE_A_INSTRUCTIONS if state is State.A else STATE_B_INSTRUCTIONS]
    if aggregative:
        parts.append(AGGREGATION_INSTRUCTIONS)
    parts.append("Memory entries:\n\n" + "\n\n".join(blocks))
    parts.append(f"Question: {question}")
    return [Message("system", ANSWER_SYSTEM), Message("user", "\n\n".join(parts))], evidence


def answer_question(
    question: str,
    store: MemoryStore,
    provider: Provider,
    *,
    k: int = DEFAULT_K,
    embedder=None,
    retries: int = 3,
    max_tokens: int = 600,
) -> RetrievalOutcome:
    hits = store.search(question, k, embedder=embedder)
    state = classify_state(hits)
    if state is State.C:
        return RetrievalOutcome(State.C, CONFIDENCE[State.C], [], ABSTENTION)

    pairs = _pairs(hits)
    aggregative = len({p.fact.anchor for p in pairs}) >= 2
    if aggregative:
        pairs = sorted(pairs, key=lambda p: (p.fact.entry.frontmatter.timestamp, p.fact.insert_seq))
    messages, evidence = build_prompt(question, state, pairs, aggregative)
    request = ProviderRequest(messages=tuple(messages), max_tokens=max_tokens, meta={"task": "answer"})
    try:
        response = call_with_retries(provider.generate, request, attempts=retries)
    except ProviderError as exc:
        raise RetrievalError(f"answer call failed in state {state.value}: {exc}") from exc
    return RetrievalOutcome(
        state=state,
        confidence=CONFIDENCE[state],
        evidence=evidence,
        answer=response.text.strip(),
        prompt=messages[-1].content,
        usage=response.usage,
        aggregative=aggregative,
    )
