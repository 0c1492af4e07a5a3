"""Episodic clustering, extractive summaries and gated consolidation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MemberNotLive
from .privacy_engine import DEFAULT_RULES, SensitivityRuleSet, sensitivity_score
from .schema import NodeDraft, NodeType, Provenance
from .scoring import MeanEmbeddingProbe
from .text import embed, keywords, token_count


@dataclass
class ReflectionConfig:
    tau_util: float = 0.35
    tau_priv: float = 0.05
    kappa: float = 1.0
    max_summaries_per_trigger: int = 3
    cluster_similarity_threshold: float = 0.8
    temporal_gap_limit: int = 40

    def __post_init__(self):
        if self.tau_util <= 0:
            raise ValueError("tau_util must be positive")
        if self.tau_priv < 0:
            raise ValueError("tau_priv must be non-negative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.max_summaries_per_trigger < 1:
            raise ValueError("at least one summary per trigger must be allowed")


@dataclass
class ClusterCandidate:
    member_ids: tuple[str, ...]
    centroid: np.ndarray
    total_weight: int
    max_member_sensitivity: float
    min_member_sensitivity: float = 0.0


@dataclass
class SummaryDraft:
    content: str
    weight: int
    sensitivity: float
    embedding: np.ndarray
    consent: bool = True
    user_id: str | None = None


@dataclass
class ConsolidationResult:
    status: str  # "merged" or "skipped"
    reason: str = ""
    summary_id: str | None = None
    member_ids: tuple[str, ...] = ()
    distortion: float = 0.0
    freed: int = 0
    utility_bound: float = 0.0
    utility_change: float = 0.0
    details: dict = field(default_factory=dict)


def link_matrix(vecs: np.ndarray, times, threshold: float, gap: int) -> np.ndarray:
    sims = vecs @ vecs.T
    t = np.asarray(times)
    close = np.abs(t[:, None] - t[None, :]) <= gap
    links = (sims >= threshold - 1e-12) & close
    np.fill_diagonal(links, False)
    return links


def _components(links: np.ndarray) -> list[list[int]]:
    n = links.shape[0]
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    rows, cols = np.nonzero(np.triu(links, 1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [g for g in groups.values() if len(g) >= 2]


def cluster_episodes(store, config: ReflectionConfig) -> list[ClusterCandidate]:
    """Single-linkage clusters of removable episodic nodes.

    Two episodes are linked when their cosine reaches the threshold and they
    lie within the temporal gap; clusters are the connected components of
    size two or more, heaviest first.
    """
    ids = [nid for nid in store.eviction_candidates() if store.nodes[nid].node_type is NodeType.EPISODIC]
    if len(ids) < 2:
        return []
    vecs = store.embeddings.vectors(ids)
    store.counters.similarity_calls += len(ids) * (len(ids) - 1) // 2
    times = [store.nodes[i].created_at for i in ids]
    links = link_matrix(vecs, times, config.cluster_similarity_threshold, config.temporal_gap_limit)
    out = []
    for group in _components(links):
        members = tuple(ids[i] for i in group)
        nodes = [store.nodes[m] for m in members]
        sens = [n.sensitivity for n in nodes]
        out.append(
            ClusterCandidate(
                member_ids=members,
                centroid=vecs[group].mean(axis=0),
                total_weight=sum(n.weight for n in nodes),
                max_member_sensitivity=max(sens),
                min_member_sensitivity=min(sens),
            )
        )
    out.sort(key=lambda c: (-c.total_weight, store.nodes[c.member_ids[0]].created_at, c.member_ids[0]))
    return out


def _excise(text: str, rules: SensitivityRuleSet) -> str:
    pieces = []
    last = 0
    for s, e, _cat, _base in rules.pattern_hits(text):
        pieces.append(text[last:s])
        pieces.append(" ")
        last = e
    pieces.append(text[last:])
    return "".join(pieces)


def summarize_cluster(cluster: ClusterCandidate, store, rules: SensitivityRuleSet | None = None) -> SummaryDraft:
    """Sorted union of member keywords with sensitive surface spans cut out."""
    rules = rules or getattr(store, "rules", None) or DEFAULT_RULES
    words = set()
    consent = True
    users = set()
    for m in cluster.member_ids:
        node = store.nodes[m]
        words.update(keywords(_excise(node.content, rules)))
        consent = consent and node.provenance.consent
        users.add(node.provenance.user_id)
    text = " ".join(sorted(words))
    user = users.pop() if len(users) == 1 else None
    prov = Provenance(source="reflection", consent=consent, parents=(), user_id=user)
    return SummaryDraft(
        content=text,
        weight=token_count(text),
        sensitivity=sensitivity_score(text, NodeType.SEMANTIC, prov, rules),
        embedding=embed(text),
        consent=consent,
        user_id=user,
    )


def distortion(member_embeddings, summary_embedding) -> float:
    """Mean Euclidean distance from member embeddings to the summary embedding."""
    arr = np.atleast_2d(np.asarray(member_embeddings, dtype=float))
    if arr.shape[0] == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(arr - np.asarray(summary_embedding, dtype=float), axis=1)))


def gate(cluster: ClusterCandidate, summary: SummaryDraft, d: float, config: ReflectionConfig) -> str:
    """Name of the first failing gate, or '' when the cluster may be merged."""
    if d > config.tau_util:
        return "distortion"
    if summary.sensitivity > cluster.min_member_sensitivity - config.tau_priv:
        return "privacy"
    if summary.weight >= cluster.total_weight:
        return "weight"
    return ""


def consolidate(store, cluster: ClusterCandidate, summary: SummaryDraft, config: ReflectionConfig, *, policy: str | None = None) -> ConsolidationResult:
    """Replace the cluster by one semantic node when both gates pass."""
    for m in cluster.member_ids:
        if m not in store.nodes:
            raise MemberNotLive(m)
    member_vecs = np.array([store.nodes[m].embedding for m in cluster.member_ids])
    d = distortion(member_vecs, summary.embedding)
    failed = gate(cluster, summary, d, config)
    if failed:
        return ConsolidationResult("skipped", failed, member_ids=cluster.member_ids, distortion=d)

    # utility of the represented content under a kappa-Lipschitz probe
    probe = MeanEmbeddingProbe(cluster.centroid if np.linalg.norm(cluster.centroid) > 0 else member_vecs[0], config.kappa)
    u_before = probe.evaluate(member_vecs)
    u_after = probe.evaluate(summary.embedding[None, :])

    draft = NodeDraft(
        content=summary.content,
        node_type=NodeType.SEMANTIC,
        payload={"concept": "summary", "confidence": 1.0, "generality": float(len(cluster.member_ids))},
        provenance=Provenance(source="reflection", consent=summary.consent, parents=tuple(cluster.member_ids), user_id=summary.user_id),
        sensitivity=summary.sensitivity,
        weight=summary.weight,
        embedding=summary.embedding,
    )
    before = store.total_weight
    sid = store.consolidate_nodes(
        cluster.member_ids,
        draft,
        policy=policy,
        rationale=f"summarize due to {len(cluster.member_ids)} near-duplicate episodes",
        features={"distortion": round(d, 6), "summary_sensitivity": round(summary.sensitivity, 6)},
    )
    return ConsolidationResult(
        "merged",
        summary_id=sid,
        member_ids=cluster.member_ids,
        distortion=d,
        freed=before - store.total_weight,
        utility_bound=config.kappa * d,
        utility_change=abs(u_before - u_after),
    )


def reflect(store, config: ReflectionConfig, *, budget: int | None = None, policy: str | None = None, rules=None) -> list[ConsolidationResult]:
    """Consolidate up to the rate limit, stopping early once within ``budget``."""
    results = []
    merged = 0
    for cluster in cluster_episodes(store, config):
        if merged >= config.max_summaries_per_trigger:
            break
        if budget is not None and store.total_weight <= budget:
            break
        if any(m not in store.nodes for m in cluster.member_ids):
            continue
        res = consolidate(store, cluster, summarize_cluster(cluster, store, rules), config, policy=policy)
        results.append(res)
        if res.status == "merged":
            merged += 1
    return results
