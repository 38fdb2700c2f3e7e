"""Category-bound long-term preference memory for in-car conversational assistants."""

from __future__ import annotations

from .dataset import load_corpus, load_fixture, mock_records
from .evaluation import Harness, render_report
from .extraction import CandidatePreference, ConversationTranscript, Turn, extract
from .llm_gateway import GatewayConfig, MockGateway, build_gateway
from .maintenance import Action, Maintainer
from .prefstore import Preference, PreferenceStore
from .retrieval import EmbeddingMode, RetrievalQuery, retrieve
from .taxonomy import CategoryPath, CategoryTaxonomy, compile_schema, load_default_taxonomy, opt_out

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CandidatePreference",
    "CategoryPath",
    "CategoryTaxonomy",
    "ConversationTranscript",
    "EmbeddingMode",
    "GatewayConfig",
    "Harness",
    "Maintainer",
    "MockGateway",
    "Preference",
    "PreferenceStore",
    "RetrievalQuery",
    "Turn",
    "build_gateway",
    "compile_schema",
    "extract",
    "load_corpus",
    "load_default_taxonomy",
    "load_fixture",
    "mock_records",
    "opt_out",
    "render_report",
    "retrieve",
]
