"""Node, edge and provenance types of the memory graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .errors import InvalidPayload


class NodeType(str, Enum):
    EPISODIC = "Episodic"
    SEMANTIC = "Semantic"
    SOCIAL = "Social"
    TASK = "Task"


NODE_TYPES = tuple(NodeType)


class Relation(str, Enum):
    TEMPORAL_NEXT = "temporalNext"
    DERIVES_FROM = "derivesFrom"
    IS_A = "isA"
    PART_OF = "partOf"
    FRIEND_OF = "friendOf"
    COLLEAGUE_OF = "colleagueOf"
    REPORTS_TO = "reportsTo"
    REQUIRES = "requires"
    ATTACHES_TO_GOAL = "attachesToGoal"


PROVENANCE_RELATIONS = frozenset({Relation.DERIVES_FROM, Relation.REQUIRES})
# E_sem and E_soc; centrality and recall walk these.
ASSOCIATIVE_RELATIONS = frozenset(
    {Relation.IS_A, Relation.PART_OF, Relation.FRIEND_OF, Relation.COLLEAGUE_OF, Relation.REPORTS_TO}
)

TASK_STATUSES = ("pending", "active", "completed", "cancelled")

_PAYLOAD_DEFAULTS: dict[NodeType, dict[str, Any]] = {
    NodeType.EPISODIC: {"event": "", "context": "", "participants": [], "valence": 0.0},
    NodeType.SEMANTIC: {"concept": "", "relations": [], "confidence": 1.0, "generality": 0.0},
    NodeType.SOCIAL: {"entity": "", "relationship_type": "", "attributes": {}, "interaction_history": []},
    NodeType.TASK: {"goal": "", "status": "active", "dependencies": [], "priority": 0.5, "deadline": None},
}


def make_payload(node_type: NodeType, payload: dict | None = None) -> dict:
    """Fill defaults and validate a type payload.

    Unknown keys are kept (callers stash bookkeeping such as ``ref`` there);
    known keys are type-checked.
    """
    if payload is not None and not isinstance(payload, dict):
        raise InvalidPayload(f"payload must be a mapping, got {type(payload).__name__}")
    merged = dict(_PAYLOAD_DEFAULTS[node_type])
    merged.update(payload or {})
    if node_type is NodeType.EPISODIC:
        if not isinstance(merged["participants"], (list, tuple)):
            raise InvalidPayload("episodic participants must be a list")
        merged["participants"] = list(merged["participants"])
    elif node_type is NodeType.SEMANTIC:
        conf = merged["confidence"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise InvalidPayload("semantic confidence must lie in [0, 1]")
    elif node_type is NodeType.SOCIAL:
        if not isinstance(merged["attributes"], dict):
            raise InvalidPayload("social attributes must be a mapping")
    elif node_type is NodeType.TASK:
        if merged["status"] not in TASK_STATUSES:
            raise InvalidPayload(f"unknown task status {merged['status']!r}")
        if not isinstance(merged["dependencies"], (list, tuple)):
            raise InvalidPayload("task dependencies must be a list of node ids")
        merged["dependencies"] = list(merged["dependencies"])
    return merged


@dataclass(frozen=True)
class Provenance:
    source: str = "dialogue"
    consent: bool = True
    parents: tuple[str, ...] = ()
    user_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "consent": self.consent,
            "parents": list(self.parents),
            "userId": self.user_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Provenance":
        return cls(
            source=data["source"],
            consent=bool(data["consent"]),
            parents=tuple(data["parents"]),
            user_id=data.get("userId"),
        )


@dataclass
class NodeDraft:
    """Everything needed to materialize a node; unset fields are derived on insert."""

    content: str
    node_type: NodeType
    payload: dict | None = None
    provenance: Provenance = field(default_factory=Provenance)
    requires: tuple[str, ...] = ()
    links: tuple[tuple[Relation, str], ...] = ()
    sensitivity: float | None = None
    weight: int | None = None
    embedding: np.ndarray | None = None
    entities: tuple[str, ...] = ()
    node_id: str | None = None
    created_at: int | None = None


_IMMUTABLE = frozenset({"id", "content", "node_type", "created_at", "weight", "embedding"})


@dataclass(eq=False)
class MemoryNode:
    id: str
    content: str
    embedding: np.ndarray
    node_type: NodeType
    created_at: int
    sensitivity: float
    weight: int
    provenance: Provenance
    payload: dict
    entities: tuple[str, ...] = ()
    parents: tuple[str, ...] = ()
    access_count: int = 0
    last_access: int = 0
    structural_parent: str | None = None

    def __setattr__(self, name, value):
        # copy-on-write: content-bearing fields are fixed once set
        if name in _IMMUTABLE and name in self.__dict__:
            raise AttributeError(f"MemoryNode.{name} is immutable; derive a new node instead")
        object.__setattr__(self, name, value)

    @property
    def is_active_task(self) -> bool:
        return self.node_type is NodeType.TASK and self.payload.get("status") == "active"


@dataclass(frozen=True)
class MemoryEdge:
    src: str
    dst: str
    relation: Relation

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.src, self.relation.value, self.dst)


@dataclass
class Tombstone:
    """Provenance record left behind by eviction or consolidation; holds no content."""

    id: str
    node_type: NodeType
    content_hash: str
    weight: int
    created_at: int
    removed_at: int
    reason: str
    parents: tuple[str, ...] = ()
    user_id: str | None = None
    entities: tuple[str, ...] = ()
