"""Dual-trace memory for LLM agents: linked fact/scene entries behind an
evidence gate, three-state retrieval, and a paired evaluation harness."""

from .gate import EvidenceScore, Scheme, Tier, route
from .provider import MockProvider, OpenAICompatibleProvider, ProviderConfig
from .retrieval import ABSTENTION, RetrievalOutcome, State, answer_question
from .stats import AgreementTable, BootstrapResult, bootstrap_paired, mcnemar
from .store import MemoryStore
from .traces import DISCLAIMER, Frontmatter, MemoryEntry, TraceKind, parse_entry, serialize_entry

__version__ = "0.1.0"

__all__ = [
    "ABSTENTION",
    "DISCLAIMER",
    "AgreementTable",
    "BootstrapResult",
    "EvidenceScore",
    "Frontmatter",
    "MemoryEntry",
    "MemoryStore",
    "MockProvider",
    "OpenAICompatibleProvider",
    "ProviderConfig",
    "RetrievalOutcome",
    "Scheme",
    "State",
    "Tier",
    "TraceKind",
    "answer_question",
    "bootstrap_paired",
    "mcnemar",
    "parse_entry",
    "route",
    "serialize_entry",
]
