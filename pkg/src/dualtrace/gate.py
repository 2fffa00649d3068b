"""Evidence scoring gate: rate a session, then route it to an encoding tier.

Scoring is delegated to a pluggable :class:`Scorer`; routing is a pure table
lookup on the score total.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass
from typing import Mapping, Protocol

from .provider import FatalProviderError, Message, Provider, ProviderError, ProviderRequest, Usage, call_with_retries

logger = logging.getLogger(__name__)


class Tier(str, enum.Enum):
    DROP = "DROP"
    STREAMLINED = "STREAMLINED"
    FULL = "FULL"


class Scheme(str, enum.Enum):
    TWO_TIER = "two_tier"
    THREE_TIER = "three_tier"


@dataclass(frozen=True)
class EvidenceScore:
    relevance: int
    specificity: int
    explicitness: int
    stakes_flag: bool = False

    def __post_init__(self) -> None:
        for name in ("relevance", "specificity", "explicitness"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 2:
                raise ValueError(f"{name} must be an integer in [0, 2], got {value!r}")

    def total(self) -> int:
        return self.relevance + self.specificity + self.explicitness

    def to_dict(self) -> dict:
        return {
            "relevance": self.relevance,
            "specificity": self.specificity,
            "explicitness": self.explicitness,
            "stakes": self.stakes_flag,
        }


@dataclass(frozen=True)
class RoutingDecision:
    tier: Tier
    scheme: Scheme


def route_two_tier(score: EvidenceScore) -> RoutingDecision:
    tier = Tier.DROP if score.total() <= 2 else Tier.FULL
    return RoutingDecision(tier, Scheme.TWO_TIER)


def route_three_tier(score: EvidenceScore) -> RoutingDecision:
    total = score.total()
    if total <= 2:
        tier = Tier.DROP
    elif score.stakes_flag or total >= 5:
        tier = Tier.FULL
    else:
        tier = Tier.STREAMLINED
    return RoutingDecision(tier, Scheme.THREE_TIER)


def route(score: EvidenceScore, scheme: Scheme) -> RoutingDecision:
    if Scheme(scheme) is Scheme.TWO_TIER:
        return route_two_tier(score)
    return route_three_tier(score)


class ScoringError(RuntimeError):
    """The scorer could not rate a session. The session must be retried, not dropped."""


@dataclass(frozen=True)
class Scored:
    score: EvidenceScore
    usage: Usage = Usage()


class Scorer(Protocol):
    def score(self, session) -> Scored: ...


class FixtureScorer:
    """Reads ratings from per-session annotation records (tests and dry runs)."""

    def __init__(self, annotations: Mapping[str, Mapping]):
        self.annotations = annotations

    def score(self, session) -> Scored:
        try:
            ann = self.annotations[session.session_id]
        except KeyError:
            raise ScoringError(f"no annotation for session {session.session_id!r}") from None
        return Scored(score_from_annotation(ann))


def score_from_annotation(ann: Mapping) -> EvidenceScore:
    return EvidenceScore(
        relevance=int(ann["relevance"]),
        specificity=int(ann["specificity"]),
        explicitness=int(ann["explicitness"]),
        stakes_flag=bool(ann.get("stakes", False)),
    )


SCORING_PROMPT = """\
Rate the conversation below for personal information worth remembering about the user.

relevance: 0 = task context only, 1 = incidental personal context, 2 = explicit personal disclosure
specificity: 0 = vague, 1 = general, 2 = specific with names, numbers, dates, or events
explicitness: 0 = implied, 1 = casual mention, 2 = direct statement
stakes: true only for discrete items with real-world retrieval consequences (appointments, \
medications, account numbers, deadlines), else false

Reply with a single JSON object: {"relevance": int, "specificity": int, "explicitness": int, "stakes": bool}
"""

_JSON_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


def extract_json_object(text: str) -> dict:
    m = _JSON_OBJECT_RE.search(text)
    if not m:
        raise ValueError("no JSON object in reply")
    obj = json.loads(m.group(0))
    if not isinstance(obj, dict):
        raise ValueError("reply is not a JSON object")
    return obj


class ModelScorer:
    """Asks the provider to rate the session on the rubric."""

    def __init__(self, provider: Provider, *, retries: int = 3, max_tokens: int = 200):
        self.provider = provider
        self.retries = retries
        self.max_tokens = max_tokens

    def score(self, session) -> Scored:
        request = ProviderRequest(
            messages=(
                Message("system", SCORING_PROMPT),
                Message("user", session.transcript()),
            ),
            max_tokens=self.max_tokens,
            meta={"task": "score", "session_id": session.session_id},
        )
        try:
            response = call_with_retries(self.provider.generate, request, attempts=self.retries)
        except FatalProviderError:
            raise
        except ProviderError as exc:
            raise ScoringError(f"scoring failed for {session.session_id!r}: {exc}") from exc
        try:
            score = score_from_annotation(extract_json_object(response.text))
        except (ValueError, KeyError, TypeError) as exc:
            raise ScoringError(f"unparseable score for {session.session_id!r}: {exc}") from exc
        return Scored(score, response.usage)
