"""Typed, provenance-aware memory graph with its index layer.

The store keeps live nodes, tombstones for evicted or consolidated nodes,
relational edges and five indices.  Feasibility bookkeeping (which nodes can
be dropped without breaking provenance closure or task safety) is maintained
incrementally so that eviction candidates are available without a scan.
"""

from __future__ import annotations

import bisect
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .audit import AuditEvent, AuditLog
from .errors import (
    DanglingReference,
    InvalidFilter,
    InvalidPayload,
    InvalidSensitivity,
    MalformedDocument,
    NonPositiveWeight,
    UnknownAnchor,
    UnknownId,
    UnknownParent,
    UnknownPredicate,
)
from .schema import (
    ASSOCIATIVE_RELATIONS,
    NODE_TYPES,
    MemoryEdge,
    MemoryNode,
    NodeDraft,
    NodeType,
    Provenance,
    Relation,
    Tombstone,
    make_payload,
)
from .text import EMBED_DIM, canonical_entity, content_hash, embed, token_count

JSONLD_CONTEXT = {
    "@vocab": "https://example.org/mars#",
    "subject": {"@type": "@id"},
    "object": {"@type": "@id"},
}


class OpCounters:
    """Instrumentation for the complexity assertions."""

    __slots__ = ("nodes_touched", "pq_ops", "heap_builds", "similarity_calls")

    def __init__(self):
        self.nodes_touched = 0
        self.pq_ops = 0
        self.heap_builds = 0
        self.similarity_calls = 0

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__slots__}

    def snapshot(self) -> tuple:
        return tuple(getattr(self, name) for name in self.__slots__)

    def since(self, snap: tuple) -> dict:
        return {name: getattr(self, name) - old for name, old in zip(self.__slots__, snap)}


class SortedView:
    """A sorted list of keys with an id -> key map for O(log n) lookup."""

    def __init__(self):
        self._keys: list[tuple] = []
        self._key_of: dict[str, tuple] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._key_of

    def add(self, node_id: str, key: tuple) -> None:
        if node_id in self._key_of:
            self.discard(node_id)
        self._key_of[node_id] = key
        bisect.insort(self._keys, key)

    def discard(self, node_id: str) -> None:
        key = self._key_of.pop(node_id, None)
        if key is None:
            return
        i = bisect.bisect_left(self._keys, key)
        del self._keys[i]

    def key(self, node_id: str) -> tuple:
        return self._key_of[node_id]

    def first(self):
        return self._keys[0][-1] if self._keys else None

    def ids(self) -> list[str]:
        return [k[-1] for k in self._keys]

    def __iter__(self):
        return (k[-1] for k in list(self._keys))


class TemporalIndex:
    """Creation-ordered queue over all live nodes plus its eviction-candidate subview."""

    def __init__(self):
        self.all = SortedView()
        self.leaves = SortedView()

    @staticmethod
    def key(node: MemoryNode) -> tuple:
        return (node.created_at, node.id)


class AccessIndex:
    """Recency-ordered sequence with keyed lookup, again with a candidate subview."""

    def __init__(self):
        self.all = SortedView()
        self.leaves = SortedView()

    @staticmethod
    def key(node: MemoryNode) -> tuple:
        return (node.last_access, node.created_at, node.id)


class ImportanceIndex:
    """Priority queue keyed by a caller-supplied score.

    Keys depend on the clock, so the queue is rebuilt from fresh keys when a
    trigger starts and popped lazily; stale entries are skipped.
    """

    def __init__(self, counters: OpCounters):
        self.members: set[str] = set()
        self._heap: list[tuple] = []
        self._counters = counters

    def add(self, node_id: str) -> None:
        self.members.add(node_id)

    def discard(self, node_id: str) -> None:
        self.members.discard(node_id)

    def rebuild(self, entries: list[tuple]) -> None:
        """entries are (key..., node_id) tuples; the id must be last."""
        self._heap = list(entries)
        heapq.heapify(self._heap)
        self._counters.heap_builds += 1

    def _log_cost(self) -> int:
        return max(1, math.ceil(math.log2(max(2, len(self._heap)))))

    def push(self, entry: tuple) -> None:
        self._counters.pq_ops += self._log_cost()
        heapq.heappush(self._heap, entry)

    def pop(self, accept) -> tuple | None:
        """Pop the smallest entry whose id satisfies ``accept``."""
        while self._heap:
            self._counters.pq_ops += self._log_cost()
            entry = heapq.heappop(self._heap)
            if entry[-1] in self.members and accept(entry):
                return entry
        return None

    def __len__(self) -> int:
        return len(self._heap)


class EntityIndex:
    def __init__(self):
        self.postings: dict[str, list[str]] = {}

    def add(self, node: MemoryNode) -> None:
        for ent in node.entities:
            self.postings.setdefault(ent, []).append(node.id)

    def discard(self, node: MemoryNode) -> None:
        for ent in node.entities:
            ids = self.postings.get(ent)
            if ids and node.id in ids:
                ids.remove(node.id)
                if not ids:
                    del self.postings[ent]

    def lookup(self, entity: str) -> list[str]:
        return list(self.postings.get(canonical_entity(entity), ()))


class EmbeddingIndex:
    """Exact cosine scan over a dense matrix; rows are swap-deleted on removal."""

    def __init__(self, counters: OpCounters, dim: int = EMBED_DIM):
        self.dim = dim
        self._matrix = np.zeros((64, dim))
        self._ids: list[str] = []
        self._row: dict[str, int] = {}
        self._counters = counters

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._row

    def add(self, node_id: str, vec: np.ndarray) -> None:
        n = len(self._ids)
        if n == self._matrix.shape[0]:
            grown = np.zeros((2 * n, self.dim))
            grown[:n] = self._matrix
            self._matrix = grown
        norm = float(np.linalg.norm(vec))
        self._matrix[n] = vec / norm if norm > 0.0 else 0.0
        self._ids.append(node_id)
        self._row[node_id] = n

    def discard(self, node_id: str) -> None:
        row = self._row.pop(node_id, None)
        if row is None:
            return
        last = len(self._ids) - 1
        if row != last:
            moved = self._ids[last]
            self._matrix[row] = self._matrix[last]
            self._ids[row] = moved
            self._row[moved] = row
        self._ids.pop()
        self._matrix[last] = 0.0

    def similarities(self, query: np.ndarray, ids=None) -> tuple[list[str], np.ndarray]:
        """Cosine of ``query`` against the given ids (or every row).

        Stored rows are unit length or zero, so a dot product suffices once
        the query is normalized.
        """
        q = np.asarray(query, dtype=float)
        norm = float(np.linalg.norm(q))
        if ids is None:
            ids = list(self._ids)
            block = self._matrix[: len(ids)]
        else:
            ids = list(ids)
            block = self._matrix[[self._row[i] for i in ids]] if ids else np.zeros((0, self.dim))
        self._counters.similarity_calls += len(ids)
        if norm == 0.0 or not ids:
            return ids, np.zeros(len(ids))
        return ids, block @ (q / norm)

    def vectors(self, ids) -> np.ndarray:
        """Unit-normalized rows for the given ids."""
        ids = list(ids)
        if not ids:
            return np.zeros((0, self.dim))
        return self._matrix[[self._row[i] for i in ids]]


@dataclass(frozen=True)
class RetrieveFilter:
    node_types: frozenset[NodeType] | None = None
    time_window: tuple[int, int] | None = None
    max_sensitivity: float | None = None

    @classmethod
    def coerce(cls, filters) -> "RetrieveFilter":
        if filters is None:
            return cls()
        if isinstance(filters, RetrieveFilter):
            flt = filters
        elif isinstance(filters, dict):
            unknown = set(filters) - {"node_types", "time_window", "max_sensitivity"}
            if unknown:
                raise InvalidFilter(f"unknown filter keys {sorted(unknown)}")
            types = filters.get("node_types")
            if types is not None:
                try:
                    types = frozenset(NodeType(t) for t in types)
                except ValueError as exc:
                    raise InvalidFilter(str(exc)) from None
            window = filters.get("time_window")
            flt = cls(types, tuple(window) if window is not None else None, filters.get("max_sensitivity"))
        else:
            raise InvalidFilter(f"filters must be a mapping, got {type(filters).__name__}")
        if flt.max_sensitivity is not None and not 0.0 <= flt.max_sensitivity <= 1.0:
            raise InvalidFilter("max_sensitivity must lie in [0, 1]")
        if flt.time_window is not None:
            if len(flt.time_window) != 2 or flt.time_window[0] > flt.time_window[1]:
                raise InvalidFilter("time_window must be (start, end) with start <= end")
        return flt

    def admits(self, node: MemoryNode) -> bool:
        if self.node_types is not None and node.node_type not in self.node_types:
            return False
        if self.max_sensitivity is not None and node.sensitivity > self.max_sensitivity:
            return False
        if self.time_window is not None:
            lo, hi = self.time_window
            if not lo <= node.created_at <= hi:
                return False
        return True


@dataclass
class ErasureReport:
    removed: list[str]
    degraded: list[str]
    freed: int
    tombstones_removed: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "removed": list(self.removed),
            "degraded": list(self.degraded),
            "freed": self.freed,
            "tombstones_removed": list(self.tombstones_removed),
        }


@dataclass
class FeasibleSetPredicate:
    """Feasibility of retained sets over a fixed universe of live nodes.

    ``parent`` is the structural dependency forest (first declared live
    parent).  ``prerequisites`` maps each active goal to the ids it requires
    and ``covers`` maps a prerequisite to the nodes holding a derivesFrom
    edge to it.  Prerequisites may be tombstones; then only a cover can
    satisfy them, and with no live cover the constraint is void.
    """

    universe: frozenset[str]
    parent: dict[str, str | None]
    active_goals: frozenset[str]
    prerequisites: dict[str, tuple[str, ...]]
    covers: dict[str, frozenset[str]]

    def is_closed(self, retained) -> bool:
        retained = set(retained)
        for x in retained:
            p = self.parent.get(x)
            if p is not None and p not in retained:
                return False
        return True

    def is_task_safe(self, retained) -> bool:
        retained = set(retained)
        for g in self.active_goals:
            if g not in retained:
                return False
            for p in self.prerequisites.get(g, ()):
                cov = self.covers.get(p, frozenset())
                if p in self.universe:
                    if p not in retained and not (cov & retained):
                        return False
                elif cov and not (cov & retained):
                    return False
        return True

    def __call__(self, retained) -> bool:
        return self.is_closed(retained) and self.is_task_safe(retained)


_EDGE_VOCAB = {r.value: r for r in Relation}


class MemoryStore:
    """The labeled memory graph with budget, type shares and indices."""

    def __init__(
        self,
        budget: int,
        *,
        type_budgets: dict | None = None,
        working_set_fraction: float = 0.25,
        audit: AuditLog | None = None,
        scoring=None,
        rules=None,
        id_prefix: str = "n",
    ):
        if budget <= 0:
            raise ValueError("budget must be positive")
        self.budget = int(budget)
        self.type_budgets = self._check_shares(type_budgets) if type_budgets else equal_shares(self.budget)
        self.working_set_fraction = working_set_fraction
        self.audit = audit
        self.scoring = scoring
        self.rules = rules
        self.accountant = None
        self.params_digest = ""
        self.id_prefix = id_prefix
        self.now = 0
        self.total_weight = 0
        self._next_id = 1

        self.nodes: dict[str, MemoryNode] = {}
        self.tombstones: dict[str, Tombstone] = {}
        self._edges: dict[tuple, MemoryEdge] = {}
        self._out: dict[str, dict[tuple, None]] = {}
        self._in: dict[str, dict[tuple, None]] = {}

        self.counters = OpCounters()
        self.temporal = TemporalIndex()
        self.access = AccessIndex()
        self.importance = ImportanceIndex(self.counters)
        self.entities = EntityIndex()
        self.embeddings = EmbeddingIndex(self.counters)

        # feasibility bookkeeping
        self._children: dict[str, int] = {}
        self._protect: dict[str, int] = {}
        self._cover: dict[str, int] = {}
        self._degree: dict[str, int] = {}
        self.active_tasks: set[str] = set()
        # user ids seen, and which node ids each user owns (kept after removal)
        self.users: set[str] = set()
        self.attribution: dict[str, str] = {}
        # policy-private state (hysteresis marks, bandit stats, ...)
        self.policy_state: dict = {}

    def _check_shares(self, shares: dict) -> dict:
        out = {NodeType(k): int(v) for k, v in shares.items()}
        if set(out) != set(NODE_TYPES) or sum(out.values()) != self.budget or min(out.values()) < 0:
            raise ValueError("type budgets must cover all four types and sum to the budget")
        return out

    # ------------------------------------------------------------------ basics

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def advance(self, now: int) -> None:
        if now < self.now:
            raise ValueError("logical time cannot run backwards")
        self.now = int(now)

    @property
    def edges(self) -> list[MemoryEdge]:
        return [self._edges[k] for k in sorted(self._edges)]

    def edges_of(self, node_id: str, relation: Relation | None = None, direction: str = "out") -> list[MemoryEdge]:
        table = self._out if direction == "out" else self._in
        keys = table.get(node_id, {})
        return [self._edges[k] for k in keys if relation is None or self._edges[k].relation is relation]

    def neighbors(self, node_id: str, relations=ASSOCIATIVE_RELATIONS) -> list[str]:
        """Live nodes adjacent through the given relations, either direction."""
        out = []
        for k in self._out.get(node_id, {}):
            e = self._edges[k]
            if e.relation in relations and e.dst in self.nodes:
                out.append(e.dst)
        for k in self._in.get(node_id, {}):
            e = self._edges[k]
            if e.relation in relations and e.src in self.nodes:
                out.append(e.src)
        return out

    def degree(self, node_id: str) -> int:
        return self._degree.get(node_id, 0)

    def type_weight(self, node_type: NodeType) -> int:
        return sum(n.weight for n in self.nodes.values() if n.node_type is node_type)

    def live_ids(self) -> list[str]:
        """Live ids in creation order."""
        return self.temporal.all.ids()

    def register_user(self, user_id: str) -> None:
        self.users.add(user_id)

    def known(self, node_id: str) -> bool:
        return node_id in self.nodes or node_id in self.tombstones

    # ------------------------------------------------------------------ edges

    def _add_edge(self, src: str, relation: Relation, dst: str) -> MemoryEdge:
        edge = MemoryEdge(src, dst, relation)
        key = edge.key
        if key in self._edges:
            return self._edges[key]
        self._edges[key] = edge
        self._out.setdefault(src, {})[key] = None
        self._in.setdefault(dst, {})[key] = None
        if relation in ASSOCIATIVE_RELATIONS and src in self.nodes and dst in self.nodes:
            self._degree[src] = self._degree.get(src, 0) + 1
            self._degree[dst] = self._degree.get(dst, 0) + 1
        return edge

    def _drop_edge(self, key: tuple) -> None:
        edge = self._edges.pop(key, None)
        if edge is None:
            return
        self._out.get(edge.src, {}).pop(key, None)
        self._in.get(edge.dst, {}).pop(key, None)
        if edge.relation in ASSOCIATIVE_RELATIONS and edge.src in self.nodes and edge.dst in self.nodes:
            self._degree[edge.src] -= 1
            self._degree[edge.dst] -= 1

    def add_link(self, src: str, relation: Relation, dst: str) -> MemoryEdge:
        """Add a non-provenance edge between two live nodes."""
        relation = Relation(relation)
        if relation in (Relation.DERIVES_FROM, Relation.REQUIRES):
            raise InvalidPayload("provenance edges are only created at insert time")
        for nid in (src, dst):
            if nid not in self.nodes:
                raise UnknownId(nid)
        return self._add_edge(src, relation, dst)

    def _derives_targets(self, node_id: str) -> list[str]:
        return [self._edges[k].dst for k in self._out.get(node_id, {}) if self._edges[k].relation is Relation.DERIVES_FROM]

    def _derives_sources(self, node_id: str) -> list[str]:
        return [self._edges[k].src for k in self._in.get(node_id, {}) if self._edges[k].relation is Relation.DERIVES_FROM]

    def _requires_targets(self, node_id: str) -> list[str]:
        return [self._edges[k].dst for k in self._out.get(node_id, {}) if self._edges[k].relation is Relation.REQUIRES]

    # ------------------------------------------------------------------ feasibility bookkeeping

    def is_candidate(self, node_id: str) -> bool:
        node = self.nodes[node_id]
        if self._children.get(node_id, 0) > 0 or node.is_active_task:
            return False
        if self._protect.get(node_id, 0) > 0 and self._cover.get(node_id, 0) == 0:
            return False
        # a cover of a protected prerequisite must not be its last support
        for p in self._derives_targets(node_id):
            if self._protect.get(p, 0) > 0 and p not in self.nodes and self._cover.get(p, 0) < 2:
                return False
        return True

    def _sync(self, node_id: str) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        if self.is_candidate(node_id):
            if node_id not in self.temporal.leaves:
                self.temporal.leaves.add(node_id, self.temporal.all.key(node_id))
                self.access.leaves.add(node_id, self.access.all.key(node_id))
        else:
            self.temporal.leaves.discard(node_id)
            self.access.leaves.discard(node_id)

    def _sync_around(self, node_id: str) -> None:
        self._sync(node_id)
        for c in self._derives_sources(node_id):
            self._sync(c)

    def _protect_targets(self, task_id: str, delta: int) -> None:
        for p in self._requires_targets(task_id):
            self._protect[p] = self._protect.get(p, 0) + delta
            if self._protect[p] == 0:
                del self._protect[p]
            self._sync_around(p)

    def set_task_status(self, task_id: str, status: str) -> None:
        node = self.nodes.get(task_id)
        if node is None:
            raise UnknownId(task_id)
        if node.node_type is not NodeType.TASK:
            raise InvalidPayload(f"{task_id} is not a task")
        if status not in ("pending", "active", "completed", "cancelled"):
            raise InvalidPayload(f"unknown task status {status!r}")
        was = node.is_active_task
        node.payload["status"] = status
        now = node.is_active_task
        if was and not now:
            self.active_tasks.discard(task_id)
            self._protect_targets(task_id, -1)
        elif now and not was:
            self.active_tasks.add(task_id)
            self._protect_targets(task_id, +1)
        self._sync(task_id)

    def feasibility(self) -> FeasibleSetPredicate:
        universe = frozenset(self.nodes)
        parent = {nid: n.structural_parent for nid, n in self.nodes.items()}
        prereq = {g: tuple(self._requires_targets(g)) for g in self.active_tasks}
        covers = {}
        for targets in prereq.values():
            for p in targets:
                covers[p] = frozenset(c for c in self._derives_sources(p) if c in self.nodes)
        return FeasibleSetPredicate(universe, parent, frozenset(self.active_tasks), prereq, covers)

    def eviction_candidates(self) -> list[str]:
        """Live nodes removable without breaking feasibility, in creation order."""
        return self.temporal.leaves.ids()

    def is_provenance_closed(self, candidate_set) -> bool:
        ids = set(candidate_set)
        for nid in ids:
            if nid not in self.nodes:
                raise UnknownId(nid)
        return self.feasibility().is_closed(ids)

    # ------------------------------------------------------------------ audit

    def _emit(self, op: str, node_ids, *, before: int, deltas: dict | None = None, **extra) -> None:
        if self.audit is None:
            return
        acct = self.accountant.snapshot() if self.accountant is not None else (0.0, 0.0)
        self.audit.record(
            AuditEvent(
                turn=self.now,
                op=op,
                node_ids=tuple(node_ids),
                params_digest=extra.pop("params_digest", self.params_digest),
                budget_before=before,
                budget_after=self.total_weight,
                privacy_accountant=acct,
                delta_weights=deltas or {},
                **extra,
            )
        )

    def emit_policy_trigger(self, policy: str, note: str = "") -> None:
        self._emit("policy_trigger", (), before=self.total_weight, policy=policy, rationale="budget exceeded", note=note)

    # ------------------------------------------------------------------ insert

    def _new_id(self) -> str:
        while True:
            nid = f"{self.id_prefix}{self._next_id:06d}"
            self._next_id += 1
            if not self.known(nid):
                return nid

    def insert_node(self, draft: NodeDraft) -> str:
        """Materialize a draft as a live node; never triggers eviction."""
        node_type = NodeType(draft.node_type)
        payload = make_payload(node_type, draft.payload)
        derives = tuple(draft.provenance.parents)
        requires = tuple(dict.fromkeys(tuple(draft.requires) + tuple(payload.get("dependencies", ()) if node_type is NodeType.TASK else ())))
        for pid in derives + requires:
            if not self.known(pid):
                raise UnknownParent(pid)
        links = []
        for rel, dst in draft.links:
            rel = Relation(rel)
            if rel in (Relation.DERIVES_FROM, Relation.REQUIRES):
                raise InvalidPayload("use provenance.parents or requires for dependency edges")
            if dst not in self.nodes:
                raise UnknownId(dst)
            links.append((rel, dst))

        if draft.sensitivity is None:
            from .privacy_engine import DEFAULT_RULES, sensitivity_score

            sensitivity = sensitivity_score(draft.content, node_type, draft.provenance, self.rules or DEFAULT_RULES)
        else:
            sensitivity = float(draft.sensitivity)
        if not (0.0 <= sensitivity <= 1.0) or math.isnan(sensitivity):
            raise InvalidSensitivity(f"sensitivity {sensitivity} outside [0, 1]")
        weight = token_count(draft.content) if draft.weight is None else draft.weight
        if not isinstance(weight, (int, np.integer)) or weight < 1:
            raise NonPositiveWeight(f"weight must be a positive integer, got {weight!r}")
        vec = embed(draft.content) if draft.embedding is None else np.asarray(draft.embedding, dtype=float)
        if vec.shape != (EMBED_DIM,):
            raise InvalidPayload(f"embedding must have dimension {EMBED_DIM}")

        ents = list(draft.entities)
        if node_type is NodeType.EPISODIC:
            ents.extend(payload["participants"])
        elif node_type is NodeType.SOCIAL and payload["entity"]:
            ents.append(payload["entity"])
        entities = tuple(dict.fromkeys(canonical_entity(e) for e in ents if e))

        nid = draft.node_id or self._new_id()
        if self.known(nid):
            raise InvalidPayload(f"id {nid!r} already in use")
        created = self.now if draft.created_at is None else int(draft.created_at)
        parents = derives + tuple(r for r in requires if r not in derives)
        structural = next((p for p in parents if p in self.nodes), None)
        node = MemoryNode(
            id=nid,
            content=draft.content,
            embedding=vec,
            node_type=node_type,
            created_at=created,
            sensitivity=sensitivity,
            weight=int(weight),
            provenance=Provenance(draft.provenance.source, draft.provenance.consent, derives, draft.provenance.user_id),
            payload=payload,
            entities=entities,
            parents=parents,
            access_count=0,
            last_access=created,
            structural_parent=structural,
        )
        before = self.total_weight
        self._attach(node)
        if node.provenance.user_id is not None:
            self.users.add(node.provenance.user_id)
            self.attribution[nid] = node.provenance.user_id
        for p in derives:
            self._add_edge(nid, Relation.DERIVES_FROM, p)
        for p in requires:
            self._add_edge(nid, Relation.REQUIRES, p)
        for rel, dst in links:
            self._add_edge(nid, rel, dst)
        self._register_dependencies(node)
        self._emit("insert", (nid,), before=before, deltas={nid: node.weight}, content_hash=content_hash(node.content))
        return nid

    def _attach(self, node: MemoryNode) -> None:
        self.nodes[node.id] = node
        self.total_weight += node.weight
        self.temporal.all.add(node.id, TemporalIndex.key(node))
        self.access.all.add(node.id, AccessIndex.key(node))
        self.importance.add(node.id)
        self.entities.add(node)
        self.embeddings.add(node.id, node.embedding)
        self._degree.setdefault(node.id, 0)

    def _register_dependencies(self, node: MemoryNode) -> None:
        nid = node.id
        if node.structural_parent is not None:
            p = node.structural_parent
            self._children[p] = self._children.get(p, 0) + 1
            self._sync(p)
        for p in self._derives_targets(nid):
            self._cover[p] = self._cover.get(p, 0) + 1
            self._sync_around(p)
        if node.is_active_task:
            self.active_tasks.add(nid)
            self._protect_targets(nid, +1)
        self._sync(nid)

    # ------------------------------------------------------------------ access

    def touch(self, node_ids, now: int | None = None) -> None:
        now = self.now if now is None else now
        for nid in node_ids:
            node = self.nodes[nid]
            node.access_count += 1
            node.last_access = max(node.last_access, now)
            key = AccessIndex.key(node)
            self.access.all.add(nid, key)
            if nid in self.access.leaves:
                self.access.leaves.add(nid, key)

    @property
    def max_access(self) -> int:
        return max((n.access_count for n in self.nodes.values()), default=0)

    # ------------------------------------------------------------------ removal

    def _detach(self, node_id: str, *, keep_provenance: bool) -> MemoryNode:
        node = self.nodes[node_id]
        # bookkeeping that reads edges/liveness before the node disappears
        if node.is_active_task:
            self._protect_targets(node_id, -1)
            self.active_tasks.discard(node_id)
        derives = self._derives_targets(node_id)
        for key in list(self._out.get(node_id, {})) + list(self._in.get(node_id, {})):
            edge = self._edges[key]
            if edge.relation in (Relation.DERIVES_FROM, Relation.REQUIRES) and keep_provenance:
                continue
            self._drop_edge(key)
        del self.nodes[node_id]
        self.total_weight -= node.weight
        self.temporal.all.discard(node_id)
        self.temporal.leaves.discard(node_id)
        self.access.all.discard(node_id)
        self.access.leaves.discard(node_id)
        self.importance.discard(node_id)
        self.entities.discard(node)
        self.embeddings.discard(node_id)
        self._degree.pop(node_id, None)
        self._children.pop(node_id, None)

        p = node.structural_parent
        if p is not None and p in self.nodes:
            self._children[p] -= 1
            self._sync(p)
        for t in derives:
            if t in self._cover:
                self._cover[t] -= 1
                if self._cover[t] == 0:
                    del self._cover[t]
            self._sync_around(t)
        # the removed node may have been a live prerequisite; its covers change status
        for c in self._derives_sources(node_id):
            self._sync(c)
        return node

    def _tombstone(self, node: MemoryNode, reason: str) -> None:
        self.tombstones[node.id] = Tombstone(
            id=node.id,
            node_type=node.node_type,
            content_hash=content_hash(node.content),
            weight=node.weight,
            created_at=node.created_at,
            removed_at=self.now,
            reason=reason,
            parents=node.parents,
            user_id=node.provenance.user_id,
            entities=node.entities,
        )

    def evict(
        self,
        node_id: str,
        *,
        policy: str | None = None,
        rationale: str = "evicted",
        features: dict | None = None,
        emit: bool = True,
    ) -> int:
        """Remove one eviction candidate, leaving a tombstone; returns freed weight."""
        if node_id not in self.nodes:
            raise UnknownId(node_id)
        if not self.is_candidate(node_id):
            raise ValueError(f"{node_id} is not an eviction candidate")
        before = self.total_weight
        node = self._detach(node_id, keep_provenance=True)
        # the evicted leaf plus the parent whose candidacy was re-checked
        self.counters.nodes_touched += 1 + (node.structural_parent is not None)
        self._tombstone(node, "evicted")
        if emit:
            self._emit(
                "evict",
                (node_id,),
                before=before,
                deltas={node_id: -node.weight},
                policy=policy,
                rationale=rationale,
                features=features,
                content_hash=content_hash(node.content),
            )
        return node.weight

    def consolidate_nodes(self, member_ids, draft: NodeDraft, *, policy=None, rationale="", features=None) -> str:
        """Replace members by one derived node; members become tombstones.

        Used by reflection; gates are the caller's business.
        """
        for m in member_ids:
            if m not in self.nodes:
                raise UnknownId(m)
        before = self.total_weight
        deltas = {}
        hashes = []
        for m in member_ids:
            node = self._detach(m, keep_provenance=True)
            self._tombstone(node, "consolidated")
            deltas[m] = -node.weight
            hashes.append(content_hash(node.content))
        audit, self.audit = self.audit, None
        try:
            sid = self.insert_node(draft)
        finally:
            self.audit = audit
        deltas[sid] = self.nodes[sid].weight
        self._emit(
            "summarize",
            tuple(member_ids) + (sid,),
            before=before,
            deltas=deltas,
            policy=policy,
            rationale=rationale or "summarize due to near-duplicate episodes",
            features=features,
            content_hash=content_hash(self.nodes[sid].content),
        )
        return sid

    def erase_cascade(self, target_ids) -> ErasureReport:
        """Erase targets and every transitive derivesFrom descendant, tombstones included."""
        targets = list(dict.fromkeys(target_ids))
        for t in targets:
            if not self.known(t):
                raise UnknownId(t)
        closure = set()
        queue = deque(targets)
        while queue:
            x = queue.popleft()
            if x in closure:
                continue
            closure.add(x)
            queue.extend(s for s in self._derives_sources(x) if s not in closure)

        live = sorted((x for x in closure if x in self.nodes), key=lambda x: (self.nodes[x].created_at, x))
        stones = sorted(x for x in closure if x in self.tombstones)
        degraded = set()
        for x in closure:
            for k in self._in.get(x, {}):
                e = self._edges[k]
                if e.relation is Relation.REQUIRES and e.src in self.nodes and e.src not in closure:
                    degraded.add(e.src)

        before = self.total_weight
        deltas = {}
        freed = 0
        # children before parents keeps the counters consistent
        for x in reversed(live):
            node = self._detach(x, keep_provenance=False)
            deltas[x] = -node.weight
            freed += node.weight
        for x in stones:
            del self.tombstones[x]
        for x in closure:
            for key in list(self._out.get(x, {})) + list(self._in.get(x, {})):
                self._drop_edge(key)
            self._out.pop(x, None)
            self._in.pop(x, None)
            self._protect.pop(x, None)
            self._cover.pop(x, None)
        for d in degraded:
            node = self.nodes[d]
            if node.structural_parent in closure:
                node.structural_parent = None
            node.parents = tuple(p for p in node.parents if p not in closure)
        for t in self.tombstones.values():
            if any(p in closure for p in t.parents):
                t.parents = tuple(p for p in t.parents if p not in closure)
        self._rebuild_counters()

        self._emit("erase", tuple(targets), before=before, rationale="erasure request")
        if live:
            self._emit(
                "evict",
                tuple(live),
                before=before,
                deltas=deltas,
                rationale="evict due to erasure request",
            )
        return ErasureReport(
            removed=live + [x for x in stones],
            degraded=sorted(degraded, key=lambda x: (self.nodes[x].created_at, x)),
            freed=freed,
            tombstones_removed=stones,
        )

    def _rebuild_counters(self) -> None:
        self._children = {}
        self._protect = {}
        self._cover = {}
        self._degree = {nid: 0 for nid in self.nodes}
        self.active_tasks = set()
        for e in self._edges.values():
            if e.relation in ASSOCIATIVE_RELATIONS and e.src in self.nodes and e.dst in self.nodes:
                self._degree[e.src] += 1
                self._degree[e.dst] += 1
            if e.relation is Relation.DERIVES_FROM and e.src in self.nodes:
                self._cover[e.dst] = self._cover.get(e.dst, 0) + 1
        for nid, node in self.nodes.items():
            if node.structural_parent is not None:
                self._children[node.structural_parent] = self._children.get(node.structural_parent, 0) + 1
            if node.is_active_task:
                self.active_tasks.add(nid)
                for p in self._requires_targets(nid):
                    self._protect[p] = self._protect.get(p, 0) + 1
        self.temporal.leaves = SortedView()
        self.access.leaves = SortedView()
        for nid in self.nodes:
            self._sync(nid)

    # ------------------------------------------------------------------ retrieval

    @property
    def working_set_cap(self) -> int:
        return max(1, int(self.working_set_fraction * self.budget))

    def retrieve(self, query_embedding, k: int, filters=None, *, goal_embedding=None, touch: bool = True) -> list[str]:
        """Budget-bounded working set: nearest neighbours re-ranked by density."""
        from .scoring import rank_by_density

        if k < 1:
            raise InvalidFilter("k must be at least 1")
        flt = RetrieveFilter.coerce(filters)
        if not self.nodes:
            return []
        eligible = [nid for nid in self.temporal.all if flt.admits(self.nodes[nid])]
        if not eligible:
            self._emit("access", (), before=self.total_weight, note="empty result")
            return []
        ids, sims = self.embeddings.similarities(query_embedding, eligible)
        pool_size = max(4 * k, 16)
        if len(ids) > pool_size:
            order = np.lexsort((np.arange(len(ids)), -sims))[:pool_size]
            pool = [ids[i] for i in order]
        else:
            pool = ids
        goal = query_embedding if goal_embedding is None else goal_embedding
        ranked = rank_by_density(self, pool, goal)
        cap = self.working_set_cap
        chosen = []
        used = 0
        for nid in ranked:
            w = self.nodes[nid].weight
            if used + w > cap:
                continue
            chosen.append(nid)
            used += w
            if len(chosen) == k:
                break
        if touch and chosen:
            self.touch(chosen)
        self._emit("access", tuple(chosen), before=self.total_weight)
        return chosen

    def anchor_nodes(self, anchor: str) -> list[str]:
        if anchor in self.nodes:
            return [anchor]
        hits = [nid for nid in self.entities.lookup(anchor) if nid in self.nodes]
        if not hits:
            raise UnknownAnchor(anchor)
        return hits

    def task_subgraph(self) -> set[str]:
        """Active tasks, their prerequisites and nodes attached to them as goals."""
        sub = set(self.active_tasks)
        for t in self.active_tasks:
            sub.update(p for p in self._requires_targets(t) if p in self.nodes)
            for k in self._in.get(t, {}):
                e = self._edges[k]
                if e.relation is Relation.ATTACHES_TO_GOAL and e.src in self.nodes:
                    sub.add(e.src)
        return sub

    def recall(self, anchor: str, radius: int, goal_embedding, *, purpose_limited: bool = False) -> list[str]:
        """Breadth-first ball over semantic/social edges, re-ranked by goal similarity."""
        if radius < 0:
            raise InvalidFilter("radius must be non-negative")
        start = self.anchor_nodes(anchor)
        dist = {nid: 0 for nid in start}
        queue = deque(start)
        while queue:
            x = queue.popleft()
            if dist[x] == radius:
                continue
            for y in self.neighbors(x):
                if y not in dist:
                    dist[y] = dist[x] + 1
                    queue.append(y)
        found = list(dist)
        if purpose_limited:
            sub = self.task_subgraph()
            task_entities = set()
            for t in sub:
                task_entities.update(self.nodes[t].entities)

            def allowed(nid):
                node = self.nodes[nid]
                if node.node_type is not NodeType.SOCIAL or nid in sub:
                    return True
                if task_entities.intersection(node.entities):
                    return True
                return any(y in sub for y in self.neighbors(nid, relations=frozenset(Relation)))

            found = [nid for nid in found if allowed(nid)]
        ids, sims = self.embeddings.similarities(goal_embedding, found)
        order = sorted(range(len(ids)), key=lambda i: (-sims[i], self.nodes[ids[i]].created_at, ids[i]))
        return [ids[i] for i in order]

    # ------------------------------------------------------------------ JSON-LD

    def to_document(self) -> dict:
        nodes = []
        for nid in self.temporal.all:
            n = self.nodes[nid]
            nodes.append(
                {
                    "@id": n.id,
                    "@type": n.node_type.value,
                    "content": n.content,
                    "embedding": [float(x) for x in n.embedding],
                    "createdAt": n.created_at,
                    "sensitivity": n.sensitivity,
                    "weight": n.weight,
                    "provenance": n.provenance.to_dict(),
                    "payload": n.payload,
                    "entities": list(n.entities),
                    "parents": list(n.parents),
                    "structuralParent": n.structural_parent,
                    "accessCount": n.access_count,
                    "lastAccess": n.last_access,
                }
            )
        stones = []
        for tid in sorted(self.tombstones):
            t = self.tombstones[tid]
            stones.append(
                {
                    "@id": t.id,
                    "@type": t.node_type.value,
                    "contentHash": t.content_hash,
                    "weight": t.weight,
                    "createdAt": t.created_at,
                    "removedAt": t.removed_at,
                    "reason": t.reason,
                    "parents": list(t.parents),
                    "userId": t.user_id,
                    "entities": list(t.entities),
                }
            )
        edges = [{"subject": e.src, "predicate": e.relation.value, "object": e.dst} for e in self.edges]
        return {
            "@context": JSONLD_CONTEXT,
            "@type": "MemoryStore",
            "budget": self.budget,
            "typeBudgets": {t.value: self.type_budgets[t] for t in NODE_TYPES},
            "workingSetFraction": self.working_set_fraction,
            "now": self.now,
            "nextId": self._next_id,
            "idPrefix": self.id_prefix,
            "nodes": nodes,
            "tombstones": stones,
            "users": sorted(self.users),
            "attribution": dict(sorted(self.attribution.items())),
            "edges": edges,
        }

    def export_jsonld(self) -> bytes:
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def import_jsonld(cls, data: bytes | str, **kwargs) -> "MemoryStore":
        try:
            doc = json.loads(data)
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedDocument(f"not JSON: {exc}") from None
        if not isinstance(doc, dict) or doc.get("@type") != "MemoryStore":
            raise MalformedDocument("top level must be a MemoryStore object")
        for key in ("budget", "typeBudgets", "nodes", "edges"):
            if key not in doc:
                raise MalformedDocument(f"missing field {key!r}")
        try:
            store = cls(
                int(doc["budget"]),
                type_budgets=doc["typeBudgets"],
                working_set_fraction=doc.get("workingSetFraction", 0.25),
                id_prefix=doc.get("idPrefix", "n"),
                **kwargs,
            )
            store.now = int(doc.get("now", 0))
            store._next_id = int(doc.get("nextId", 1))
            store.users = set(doc.get("users", ()))
            store.attribution = dict(doc.get("attribution", {}))
            for t in doc.get("tombstones", []):
                store.tombstones[t["@id"]] = Tombstone(
                    id=t["@id"],
                    node_type=NodeType(t["@type"]),
                    content_hash=t["contentHash"],
                    weight=int(t["weight"]),
                    created_at=int(t["createdAt"]),
                    removed_at=int(t["removedAt"]),
                    reason=t["reason"],
                    parents=tuple(t["parents"]),
                    user_id=t.get("userId"),
                    entities=tuple(t.get("entities", ())),
                )
            for d in doc["nodes"]:
                node_type = NodeType(d["@type"])
                s = float(d["sensitivity"])
                if not 0.0 <= s <= 1.0:
                    raise InvalidSensitivity(d["@id"])
                if int(d["weight"]) < 1:
                    raise NonPositiveWeight(d["@id"])
                if d["@id"] in store.nodes or d["@id"] in store.tombstones:
                    raise MalformedDocument(f"duplicate id {d['@id']!r}")
                node = MemoryNode(
                    id=d["@id"],
                    content=d["content"],
                    embedding=np.asarray(d["embedding"], dtype=float),
                    node_type=node_type,
                    created_at=int(d["createdAt"]),
                    sensitivity=s,
                    weight=int(d["weight"]),
                    provenance=Provenance.from_dict(d["provenance"]),
                    payload=make_payload(node_type, d["payload"]),
                    entities=tuple(d["entities"]),
                    parents=tuple(d["parents"]),
                    access_count=int(d["accessCount"]),
                    last_access=int(d["lastAccess"]),
                    structural_parent=d["structuralParent"],
                )
                if node.embedding.shape != (EMBED_DIM,):
                    raise MalformedDocument(f"bad embedding on {node.id}")
                store._attach(node)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, (InvalidSensitivity, NonPositiveWeight, MalformedDocument)):
                raise
            raise MalformedDocument(f"bad node or tombstone record: {exc!r}") from None
        for e in doc["edges"]:
            if not isinstance(e, dict) or set(e) != {"subject", "predicate", "object"}:
                raise MalformedDocument(f"edge must be a subject/predicate/object statement: {e!r}")
            rel = _EDGE_VOCAB.get(e["predicate"])
            if rel is None:
                raise UnknownPredicate(e["predicate"])
            for end in (e["subject"], e["object"]):
                if not store.known(end):
                    raise DanglingReference(end)
            store._add_edge(e["subject"], rel, e["object"])
        for node in store.nodes.values():
            for p in node.parents:
                if not store.known(p):
                    raise DanglingReference(p)
            if node.structural_parent is not None and node.structural_parent not in store.nodes:
                raise DanglingReference(node.structural_parent)
        store._rebuild_counters()
        return store


def equal_shares(budget: int) -> dict:
    base, rem = divmod(int(budget), len(NODE_TYPES))
    return {t: base + (1 if i < rem else 0) for i, t in enumerate(NODE_TYPES)}


# Function-style entry points mirroring the store methods.


def insert_node(store: MemoryStore, draft: NodeDraft) -> str:
    return store.insert_node(draft)


def is_provenance_closed(store: MemoryStore, candidate_set) -> bool:
    return store.is_provenance_closed(candidate_set)


def eviction_candidates(store: MemoryStore) -> list[str]:
    return store.eviction_candidates()


def retrieve(store: MemoryStore, query_embedding, k: int, filters=None) -> list[str]:
    return store.retrieve(query_embedding, k, filters)


def recall(store: MemoryStore, anchor: str, radius: int, goal_embedding, purpose_limited: bool = False) -> list[str]:
    return store.recall(anchor, radius, goal_embedding, purpose_limited=purpose_limited)


def erase_cascade(store: MemoryStore, target_ids) -> ErasureReport:
    return store.erase_cascade(target_ids)


def export_jsonld(store: MemoryStore) -> bytes:
    return store.export_jsonld()


def import_jsonld(data: bytes | str) -> MemoryStore:
    return MemoryStore.import_jsonld(data)
