"""Deterministic reply handler for :class:`~dualtrace.provider.MockProvider`.

The handler answers each task from the fixture annotations or from the prompt
text itself, so the real prompt-building and parsing code runs unchanged in
offline tests:

score   the annotated ratings as JSON
fact    the annotated topic/category/info_type/components as JSON
scene   a templated "Picture:" scene embedding every fact and the session date
answer  the components of each FACT entry in the prompt, in prompt order,
        formatted ``anchor: c1; c2`` and joined by `` | ``
judge   "yes"/"no" by normalized token containment of the gold answer
"""

from __future__ import annotations

import json
import re
from typing import Mapping

from .provider import FatalProviderError, ProviderRequest
from .traces import DISCLAIMER

_FACT_TAG_RE = re.compile(r"^\[FACT:([a-z0-9_]+)\]$")


def answer_from_prompt(prompt: str) -> str:
    segments = []
    anchor = None
    in_components = False
    items: list[str] = []
    for line in prompt.split("\n") + [""]:
        m = _FACT_TAG_RE.match(line)
        if m:
            anchor, items, in_components = m.group(1), [], False
            continue
        if anchor is None:
            continue
        if line == "Components:":
            in_components = True
        elif in_components and line.startswith("- "):
            items.append(line[2:])
        elif in_components:
            segments.append(f"{anchor}: {'; '.join(items)}")
            anchor, in_components = None, False
    return " | ".join(segments) if segments else "No stored facts were provided."


def scene_from_prompt(prompt: str) -> str:
    date = topic = ""
    facts = []
    for line in prompt.split("\n"):
        if line.startswith("Session date: "):
            date = line[len("Session date: ") :]
        elif line.startswith("Topic: "):
            topic = line[len("Topic: ") :]
        elif line.startswith("- "):
            facts.append(line[2:])
    notes = "; ".join(f'"{f}"' for f in facts)
    return (
        f"Picture: a corkboard above the desk on {date}, a card titled \"{topic}\" pinned at the "
        f"center, and around it, left to right, notes reading {notes}. {DISCLAIMER}"
    )


def _tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9:]+", text.lower()))


class FixtureBackend:
    """Callable handler keyed on ``request.meta['task']``."""

    def __init__(self, annotations: Mapping[str, Mapping] | None = None):
        self.annotations = dict(annotations or {})

    def _annotation(self, request: ProviderRequest) -> Mapping:
        sid = request.meta.get("session_id")
        if sid not in self.annotations:
            raise FatalProviderError(f"fixture backend has no annotation for session {sid!r}")
        return self.annotations[sid]

    def __call__(self, request: ProviderRequest) -> str:
        task = request.meta.get("task", "")
        prompt = request.messages[-1].content
        if task == "score":
            ann = self._annotation(request)
            return json.dumps(
                {
                    "relevance": ann["relevance"],
                    "specificity": ann["specificity"],
                    "explicitness": ann["explicitness"],
                    "stakes": bool(ann.get("stakes", False)),
                }
            )
        if task == "fact":
            ann = self._annotation(request)
            return json.dumps(
                {
                    "topic": ann.get("topic", ""),
                    "category": ann.get("category", "general"),
                    "info_type": ann.get("info_type", "personal_fact"),
                    "components": list(ann.get("components", [])),
                }
            )
        if task == "scene":
            return scene_from_prompt(prompt)
        if task == "answer":
            return answer_from_prompt(prompt)
        if task == "judge":
            gold = re.search(r"^Correct answer: (.*)$", prompt, re.MULTILINE)
            resp = re.search(r"^Model response: (.*)$", prompt, re.MULTILINE)
            if gold and resp and _tokens(gold.group(1)) <= _tokens(resp.group(1)):
                return "yes"
            return "no"
        users = [m.content for m in request.messages if m.role == "user"]
        return users[-1] if users else ""
