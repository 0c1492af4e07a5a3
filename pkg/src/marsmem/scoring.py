"""Node features, the type-aware utility proxy, density and importance.

Also holds the set-utility models used by the optimizer and the gates, and
the multiplicative-weights rebalancing of per-type budget shares.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .schema import NODE_TYPES, MemoryNode, NodeType

FEATURES = ("recency", "frequency", "goal_similarity", "centrality", "novelty", "urgency")


def _default_theta() -> dict:
    return {
        NodeType.EPISODIC: (0.35, 0.10, 0.15, 0.05, 0.35, 0.0),
        NodeType.SEMANTIC: (0.10, 0.15, 0.20, 0.30, 0.25, 0.0),
        NodeType.SOCIAL: (0.10, 0.30, 0.15, 0.30, 0.15, 0.0),
        NodeType.TASK: (0.10, 0.05, 0.35, 0.10, 0.05, 0.35),
    }


def _default_type_weights() -> dict:
    return {NodeType.EPISODIC: 0.3, NodeType.SEMANTIC: 0.7, NodeType.SOCIAL: 0.6, NodeType.TASK: 0.9}


@dataclass
class ScoringConfig:
    type_weights: dict = field(default_factory=_default_theta)
    lambda_priv: float = 0.3
    lambda_age: float = 0.05
    imp_alpha: float = 0.4
    imp_beta: float = 0.4
    imp_gamma: float = 0.2
    type_weight_table: dict = field(default_factory=_default_type_weights)
    urgency_horizon: int = 50
    eta: float = 0.25
    share_floor: float = 0.10

    def __post_init__(self):
        self.type_weights = {NodeType(k): tuple(float(x) for x in v) for k, v in self.type_weights.items()}
        self.type_weight_table = {NodeType(k): float(v) for k, v in self.type_weight_table.items()}
        for t in NODE_TYPES:
            theta = self.type_weights.get(t)
            if theta is None or len(theta) != len(FEATURES) or min(theta) < 0:
                raise ValueError(f"theta for {t.value} must be six non-negative weights")
            if t not in self.type_weight_table:
                raise ValueError(f"type weight for {t.value} missing")
        if min(self.imp_alpha, self.imp_beta, self.imp_gamma) < 0 or self.imp_alpha + self.imp_beta + self.imp_gamma <= 0:
            raise ValueError("importance weights must be non-negative with a positive sum")
        if self.lambda_priv < 0 or self.lambda_age <= 0:
            raise ValueError("lambda_priv must be >= 0 and lambda_age > 0")
        self._theta = np.array([self.type_weights[t] for t in NODE_TYPES])

    def theta(self, node_type: NodeType) -> np.ndarray:
        return self._theta[NODE_TYPES.index(node_type)]

    def as_dict(self) -> dict:
        data = {k: v for k, v in asdict(self).items() if not k.startswith("_")}
        data["type_weights"] = {t.value: list(v) for t, v in self.type_weights.items()}
        data["type_weight_table"] = {t.value: v for t, v in self.type_weight_table.items()}
        return data

    def digest(self) -> str:
        raw = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(raw.encode()).hexdigest()[:12]


DEFAULT_SCORING = ScoringConfig()


@dataclass(frozen=True)
class FeatureVector:
    recency: float
    frequency: float
    goal_similarity: float
    centrality: float
    novelty: float
    urgency: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES])

    def as_dict(self) -> dict:
        return {f: round(float(getattr(self, f)), 6) for f in FEATURES}

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        return cls(*(float(x) for x in arr))


def recency(age: float, lambda_age: float) -> float:
    return math.exp(-lambda_age * max(0.0, age))


def urgency(node: MemoryNode, now: int, horizon: int) -> float:
    if node.node_type is not NodeType.TASK:
        return 0.0
    deadline = node.payload.get("deadline")
    if deadline is None or node.payload.get("status") not in ("active", "pending"):
        return 0.0
    remaining = deadline - now
    if remaining <= 0:
        return 1.0
    return max(0.0, 1.0 - remaining / horizon)


def _config(store, config) -> ScoringConfig:
    if config is not None:
        return config
    return getattr(store, "scoring", None) or DEFAULT_SCORING


def feature_matrix(store, ids, goal_embedding=None, config: ScoringConfig | None = None) -> np.ndarray:
    """Feature rows for live ids, in the FEATURES column order."""
    cfg = _config(store, config)
    ids = list(ids)
    out = np.zeros((len(ids), len(FEATURES)))
    if not ids:
        return out
    now = store.now
    nodes = [store.nodes[i] for i in ids]
    max_a = max((n.access_count for n in store.nodes.values()), default=0)
    max_deg = max(store._degree.values(), default=0)
    vecs = store.embeddings.vectors(ids)
    for r, n in enumerate(nodes):
        out[r, 0] = math.exp(-cfg.lambda_age * max(0, now - n.created_at))
        out[r, 1] = n.access_count / (1.0 + max_a)
        out[r, 3] = store.degree(n.id) / max_deg if max_deg > 0 else 0.0
        out[r, 5] = urgency(n, now, cfg.urgency_horizon)
    if goal_embedding is not None:
        g = np.asarray(goal_embedding, dtype=float)
        gn = float(np.linalg.norm(g))
        if gn > 0:
            out[:, 2] = vecs @ (g / gn)
            store.counters.similarity_calls += len(ids)
    # novelty against retained peers of the same type
    by_type: dict[NodeType, list[int]] = {}
    for r, n in enumerate(nodes):
        by_type.setdefault(n.node_type, []).append(r)
    for t, rows in by_type.items():
        peers = [nid for nid, n in store.nodes.items() if n.node_type is t]
        if len(peers) <= 1:
            out[rows, 4] = 1.0
            continue
        peer_vecs = store.embeddings.vectors(peers)
        sims = vecs[rows] @ peer_vecs.T
        store.counters.similarity_calls += sims.size
        peer_pos = {nid: j for j, nid in enumerate(peers)}
        for local, r in enumerate(rows):
            j = peer_pos.get(ids[r])
            if j is not None:
                sims[local, j] = -np.inf
        best = sims.max(axis=1)
        out[rows, 4] = np.clip(1.0 - best, 0.0, 1.0)
    return out


def compute_features(node: MemoryNode, store, goal_embedding=None, config: ScoringConfig | None = None) -> FeatureVector:
    return FeatureVector.from_array(feature_matrix(store, [node.id], goal_embedding, config)[0])


def utility_proxy(node_type: NodeType, features, config: ScoringConfig = DEFAULT_SCORING) -> float:
    psi = features.as_array() if isinstance(features, FeatureVector) else np.asarray(features, dtype=float)
    return float(config.theta(NodeType(node_type)) @ psi)


def density_value(u_hat: float, sensitivity: float, weight: int, lambda_priv: float) -> float:
    return (u_hat - lambda_priv * sensitivity) / weight


def density(node: MemoryNode, features, config: ScoringConfig = DEFAULT_SCORING) -> float:
    u_hat = utility_proxy(node.node_type, features, config)
    return density_value(u_hat, node.sensitivity, node.weight, config.lambda_priv)


def density_contributions(node: MemoryNode, features, config: ScoringConfig = DEFAULT_SCORING) -> dict:
    """Additive terms of the density, used for audit rationales."""
    psi = features.as_array() if isinstance(features, FeatureVector) else np.asarray(features, dtype=float)
    theta = config.theta(node.node_type)
    terms = {f: float(theta[j] * psi[j]) / node.weight for j, f in enumerate(FEATURES)}
    terms["sensitivity"] = -config.lambda_priv * node.sensitivity / node.weight
    return terms


def densities(store, ids, goal_embedding=None, config: ScoringConfig | None = None) -> np.ndarray:
    cfg = _config(store, config)
    ids = list(ids)
    if not ids:
        return np.zeros(0)
    feats = feature_matrix(store, ids, goal_embedding, cfg)
    nodes = [store.nodes[i] for i in ids]
    theta = np.array([cfg.theta(n.node_type) for n in nodes])
    u_hat = np.einsum("ij,ij->i", theta, feats)
    s = np.array([n.sensitivity for n in nodes])
    w = np.array([n.weight for n in nodes], dtype=float)
    return (u_hat - cfg.lambda_priv * s) / w


def rank_by_density(store, ids, goal_embedding=None, config: ScoringConfig | None = None) -> list[str]:
    """Highest density first; ties by creation time then id."""
    ids = list(ids)
    d = densities(store, ids, goal_embedding, config)
    order = sorted(range(len(ids)), key=lambda i: (-d[i], store.nodes[ids[i]].created_at, ids[i]))
    return [ids[i] for i in order]


def importance_value(type_weight: float, rec: float, freq: float, config: ScoringConfig = DEFAULT_SCORING) -> float:
    raw = config.imp_alpha * type_weight + config.imp_beta * rec + config.imp_gamma * freq
    return min(1.0, max(0.0, raw))


def importance(node: MemoryNode, config: ScoringConfig, now: int, max_access: int | None = None) -> float:
    """imp(n) from type prior, recency and access frequency, clamped to [0, 1]."""
    rec = recency(now - node.created_at, config.lambda_age)
    max_a = node.access_count if max_access is None else max_access
    freq = node.access_count / (1.0 + max_a)
    return importance_value(config.type_weight_table[node.node_type], rec, freq, config)


def rebalance_type_budgets(shares, gains, *, budget: int | None = None, eta: float = 0.25, floor: float = 0.10) -> dict:
    """Multiplicative-weights update of per-type shares.

    Shares are scaled by exp(eta * gain), renormalized to the budget, lifted
    to the floor fraction where needed and rounded to integers by largest
    remainder so they sum to the budget exactly.
    """
    shares = {NodeType(k): float(v) for k, v in dict(shares).items()}
    gains = {NodeType(k): float(v) for k, v in dict(gains).items()}
    types = list(NODE_TYPES)
    total = int(round(sum(shares.values()))) if budget is None else int(budget)
    if floor * len(types) > 1.0:
        raise ValueError("share floor too large for four types")
    raw = np.array([shares[t] * math.exp(eta * gains.get(t, 0.0)) for t in types])
    if raw.sum() <= 0:
        raw = np.ones(len(types))
    target = raw / raw.sum() * total
    # lift floored types, rescale the rest over the remaining mass
    min_share = floor * total
    fixed = np.zeros(len(types), dtype=bool)
    for _ in range(len(types)):
        low = (target < min_share - 1e-12) & ~fixed
        if not low.any():
            break
        fixed |= low
        target[fixed] = min_share
        free = ~fixed
        rest = total - target[fixed].sum()
        target[free] = raw[free] / raw[free].sum() * rest
    base = np.floor(target).astype(int)
    remainder = total - int(base.sum())
    frac = target - base
    order = sorted(range(len(types)), key=lambda i: (-frac[i], i))
    for i in order[:remainder]:
        base[i] += 1
    return {t: int(base[i]) for i, t in enumerate(types)}


# --------------------------------------------------------------------- set utilities


class UtilityModel:
    """Set function over node ids."""

    kind = "abstract"

    def evaluate(self, ids) -> float:
        raise NotImplementedError

    def marginal(self, item, ids) -> float:
        ids = set(ids)
        if item in ids:
            return 0.0
        return self.evaluate(ids | {item}) - self.evaluate(ids)


class Modular(UtilityModel):
    kind = "modular"

    def __init__(self, values: dict):
        self.values = dict(values)

    def evaluate(self, ids) -> float:
        # fsum keeps the total independent of set iteration order
        return math.fsum(self.values[i] for i in set(ids))

    def marginal(self, item, ids) -> float:
        return 0.0 if item in set(ids) else float(self.values[item])

    def lipschitz(self, weights: dict) -> float:
        """max v_i / w_i: bound on utility lost per token evicted."""
        return max((self.values[i] / weights[i] for i in self.values), default=0.0)


class RecencyDecay(Modular):
    """U(S) = sum of v_i * exp(-rate * age_i); modular with decayed values."""

    kind = "recency_decay"

    def __init__(self, values: dict, ages: dict, rate: float):
        self.base_values = dict(values)
        self.ages = dict(ages)
        self.rate = rate
        super().__init__({i: v * math.exp(-rate * ages[i]) for i, v in values.items()})


class CoverageSubmodular(UtilityModel):
    """Weighted coverage of topic sets: monotone and submodular."""

    kind = "coverage"

    def __init__(self, topics: dict, topic_weights: dict | None = None):
        self.topics = {i: frozenset(t) for i, t in topics.items()}
        self.topic_weights = dict(topic_weights or {})

    def _w(self, topic) -> float:
        return self.topic_weights.get(topic, 1.0)

    def evaluate(self, ids) -> float:
        covered = set()
        for i in set(ids):
            covered |= self.topics[i]
        return math.fsum(self._w(t) for t in covered)

    def marginal(self, item, ids) -> float:
        ids = set(ids)
        if item in ids:
            return 0.0
        covered = set()
        for i in ids:
            covered |= self.topics[i]
        return math.fsum(self._w(t) for t in self.topics[item] - covered)

    def lipschitz(self, weights: dict) -> float:
        return max((self.marginal(i, ()) / weights[i] for i in self.topics), default=0.0)


class MeanEmbeddingProbe:
    """U(C) = mean of <a, phi(c)> over the represented embeddings.

    With |a| = kappa this is kappa-Lipschitz in each embedding, so swapping a
    cluster for its summary moves U by at most kappa times the distortion.
    """

    def __init__(self, direction, kappa: float = 1.0):
        a = np.asarray(direction, dtype=float)
        n = float(np.linalg.norm(a))
        self.direction = a / n * kappa if n > 0 else a
        self.kappa = kappa

    def evaluate(self, embeddings) -> float:
        arr = np.atleast_2d(np.asarray(embeddings, dtype=float))
        if arr.shape[0] == 0:
            return 0.0
        return float(np.mean(arr @ self.direction))
