"""Append-only audit log with a running hash chain, rationales and explain()."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import NeverSeen

OPS = ("insert", "evict", "summarize", "access", "erase", "policy_trigger")

GENESIS = "0" * 64


@dataclass(frozen=True)
class AuditEvent:
    turn: int
    op: str
    node_ids: tuple[str, ...]
    policy: str | None = None
    params_digest: str = ""
    features: dict | None = None
    content_hash: str = ""
    rationale: str = ""
    budget_before: int = 0
    budget_after: int = 0
    privacy_accountant: tuple[float, float] = (0.0, 0.0)
    # signed weight change per node id, enough to replay total_weight
    delta_weights: dict = field(default_factory=dict)
    note: str = ""
    seq: int = 0
    prev_hash: str = ""
    hash: str = ""

    def payload(self) -> dict:
        data = {name: getattr(self, name) for name in _FIELDS}
        data["node_ids"] = list(self.node_ids)
        data["privacy_accountant"] = list(self.privacy_accountant)
        data["features"] = dict(self.features) if self.features is not None else None
        data["delta_weights"] = dict(self.delta_weights)
        return data

    def to_json(self) -> str:
        return json.dumps(self.payload(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "AuditEvent":
        data = dict(data)
        data["node_ids"] = tuple(data["node_ids"])
        data["privacy_accountant"] = tuple(data["privacy_accountant"])
        return cls(**data)


_FIELDS = tuple(f.name for f in fields(AuditEvent))


def _chain_hash(prev: str, event: AuditEvent) -> str:
    body = event.payload()
    body.pop("hash")
    raw = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256((prev + raw).encode("utf-8")).hexdigest()


class AuditLog:
    """Per-store event sequence; events are immutable once recorded."""

    def __init__(self):
        self.events: list[AuditEvent] = []
        self._by_node: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def head(self) -> str:
        return self.events[-1].hash if self.events else GENESIS

    def record(self, event: AuditEvent) -> int:
        if event.op not in OPS:
            raise ValueError(f"unknown audit op {event.op!r}")
        if event.op in ("evict", "summarize"):
            if not event.rationale:
                raise ValueError(f"{event.op} events need a rationale")
            if event.budget_after > event.budget_before:
                raise ValueError(f"{event.op} cannot increase stored weight")
        seq = len(self.events) + 1
        prev = self.head
        object.__setattr__(event, "seq", seq)
        object.__setattr__(event, "prev_hash", prev)
        object.__setattr__(event, "hash", "")
        object.__setattr__(event, "hash", _chain_hash(prev, event))
        self.events.append(event)
        for nid in event.node_ids:
            self._by_node.setdefault(nid, []).append(seq - 1)
        return seq

    def for_node(self, node_id: str) -> list[AuditEvent]:
        return [self.events[i] for i in self._by_node.get(node_id, ())]

    def verify_chain(self) -> bool:
        prev = GENESIS
        for i, ev in enumerate(self.events, start=1):
            if ev.seq != i or ev.prev_hash != prev or _chain_hash(prev, ev) != ev.hash:
                return False
            prev = ev.hash
        return True

    def replay_weights(self) -> list[int]:
        """Total stored weight after each event, recomputed from deltas alone."""
        total = self.events[0].budget_before if self.events else 0
        series = []
        for ev in self.events:
            total += sum(ev.delta_weights.values())
            series.append(total)
        return series

    def write_jsonl(self, path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(ev.to_json())
                fh.write("\n")

    @classmethod
    def read_jsonl(cls, path) -> "AuditLog":
        log = cls()
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    ev = AuditEvent.from_dict(json.loads(line))
                    log.events.append(ev)
                    for nid in ev.node_ids:
                        log._by_node.setdefault(nid, []).append(len(log.events) - 1)
        return log


_POLICY_TEMPLATES = {
    "Fifo": "oldest feasible leaf",
    "Lru": "least recently accessed feasible leaf",
    "RandomDrop": "random draw among feasible leaves",
}

_FACTOR_PHRASES = {
    "sensitivity": "high sensitivity",
    "weight": "large size",
    "age": "old age",
}


def _phrase(name: str) -> str:
    return _FACTOR_PHRASES.get(name, f"low {name.replace('_', ' ')}")


def rationale(op: str, contributions: dict | None = None, policy: str | None = None) -> str:
    """Deterministic one-line reason for a decision.

    ``contributions`` maps factor name to its signed term in the decision
    key; the two largest by magnitude are named (ties broken by name).
    """
    if policy in _POLICY_TEMPLATES:
        return f"{op} due to {_POLICY_TEMPLATES[policy]}"
    if not contributions:
        return f"{op} due to budget pressure"
    ranked = sorted(contributions.items(), key=lambda kv: (-abs(kv[1]), kv[0]))[:2]
    return f"{op} due to " + " and ".join(_phrase(name) for name, _ in ranked)


def explain(log: AuditLog, store, node_id: str) -> dict:
    """Event history, provenance chain and eviction reason for one id.

    Only hashes and metadata are returned, never stored content.
    """
    history = log.for_node(node_id)
    live = store.nodes.get(node_id)
    stone = store.tombstones.get(node_id)
    if not history and live is None and stone is None:
        raise NeverSeen(node_id)

    chain = []
    seen = set()
    frontier = [node_id]
    while frontier:
        nid = frontier.pop(0)
        if nid in seen:
            continue
        seen.add(nid)
        if nid in store.nodes:
            n = store.nodes[nid]
            parents = n.parents
            chain.append({"id": nid, "state": "live", "type": n.node_type.value, "parents": list(parents)})
        elif nid in store.tombstones:
            t = store.tombstones[nid]
            parents = t.parents
            chain.append(
                {
                    "id": nid,
                    "state": "tombstone",
                    "type": t.node_type.value,
                    "content_hash": t.content_hash,
                    "reason": t.reason,
                    "parents": list(parents),
                }
            )
        else:
            chain.append({"id": nid, "state": "erased", "parents": []})
            parents = ()
        frontier.extend(p for p in parents if p not in seen)

    removal = None
    for ev in reversed(history):
        if ev.op in ("evict", "summarize", "erase"):
            removal = {"seq": ev.seq, "op": ev.op, "policy": ev.policy, "rationale": ev.rationale}
            break
    return {
        "id": node_id,
        "state": "live" if live is not None else ("tombstone" if stone is not None else "erased"),
        "history": [ev.payload() for ev in history],
        "provenance_chain": chain,
        "removal": removal,
    }
