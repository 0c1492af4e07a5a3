"""Typed, provenance-aware agent memory with budgeted forgetting policies."""

from .errors import BudgetUnsatisfiable, MarsError
from .mem_graph import MemoryStore
from .policies import PolicyConfig, PolicyId, apply_policy
from .schema import MemoryEdge, MemoryNode, NodeDraft, NodeType, Provenance, Relation

__version__ = "0.1.0"

__all__ = [
    "BudgetUnsatisfiable",
    "MarsError",
    "MemoryEdge",
    "MemoryNode",
    "MemoryStore",
    "NodeDraft",
    "NodeType",
    "PolicyConfig",
    "PolicyId",
    "Provenance",
    "Relation",
    "apply_policy",
]
