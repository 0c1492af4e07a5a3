"""The six forgetting policies and the UCB1 policy selector.

Every policy only ever removes current eviction candidates (leaves of the
dependency forest that no active goal still needs), so the surviving set
stays feasible after each step.  When no candidate is left while the store
is still over budget, BudgetUnsatisfiable is raised with the partial outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .audit import rationale as make_rationale
from .errors import BudgetUnsatisfiable
from .privacy_engine import DpConfig, dp_tie_break, removal_priority_value
from .reflection import ReflectionConfig, reflect
from .scoring import DEFAULT_SCORING, ScoringConfig, density_contributions, densities, feature_matrix, importance_value, utility_proxy


class PolicyId(str, Enum):
    FIFO = "Fifo"
    LRU = "Lru"
    PRIORITY_DECAY = "PriorityDecay"
    REFLECTION_SUMMARY = "ReflectionSummary"
    RANDOM_DROP = "RandomDrop"
    HYBRID = "Hybrid"

    @classmethod
    def parse(cls, name: str) -> "PolicyId":
        key = name.strip().lower().replace("-", "").replace("_", "")
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(sorted(_ALIASES))}")

    @property
    def slug(self) -> str:
        return _SLUGS[self]


_SLUGS = {
    PolicyId.FIFO: "fifo",
    PolicyId.LRU: "lru",
    PolicyId.PRIORITY_DECAY: "priority",
    PolicyId.REFLECTION_SUMMARY: "reflection",
    PolicyId.RANDOM_DROP: "random",
    PolicyId.HYBRID: "hybrid",
}
_ALIASES = {slug: p for p, slug in _SLUGS.items()}
_ALIASES.update({p.value.lower(): p for p in PolicyId})
_ALIASES.update({"prioritydecay": PolicyId.PRIORITY_DECAY, "randomdrop": PolicyId.RANDOM_DROP})

POLICY_ORDER = tuple(PolicyId)


@dataclass
class PolicyConfig:
    scoring: ScoringConfig = field(default_factory=lambda: DEFAULT_SCORING)
    reflection: ReflectionConfig = field(default_factory=ReflectionConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    dp_enabled: bool = True
    hysteresis_fraction: float = 0.05
    stale_after: int = 40
    temporal_importance_ceiling: float = 0.5


@dataclass
class PolicyOutcome:
    policy: str
    budget: int
    budget_before: int
    budget_after: int = 0
    evicted: list = field(default_factory=list)
    summarized: list = field(default_factory=list)
    freed_weight: int = 0
    phases_executed: list = field(default_factory=list)
    op_counters: dict = field(default_factory=dict)
    needs_followup: bool = False
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "policy": self.policy,
            "budget": self.budget,
            "budget_before": self.budget_before,
            "budget_after": self.budget_after,
            "evicted": [list(e) for e in self.evicted],
            "summarized": [[list(ids), sid, round(d, 9)] for ids, sid, d in self.summarized],
            "freed_weight": self.freed_weight,
            "phases_executed": list(self.phases_executed),
            "op_counters": dict(self.op_counters),
            "needs_followup": self.needs_followup,
            "notes": list(self.notes),
        }


class _Trigger:
    """Shared bookkeeping for one policy invocation."""

    def __init__(self, store, budget: int, policy: PolicyId):
        self.store = store
        self.budget = budget
        self.policy = policy
        self.snap = store.counters.snapshot()
        self.outcome = PolicyOutcome(policy.value, budget, store.total_weight)
        if store.total_weight > budget:
            store.emit_policy_trigger(policy.value)

    @property
    def over(self) -> bool:
        return self.store.total_weight > self.budget

    def evict(self, node_id: str, why: str, features: dict | None = None) -> None:
        self.store.evict(node_id, policy=self.policy.value, rationale=why, features=features)
        self.outcome.evicted.append((node_id, why))

    def finish(self) -> PolicyOutcome:
        out = self.outcome
        out.budget_after = self.store.total_weight
        out.freed_weight = out.budget_before - out.budget_after
        out.op_counters = self.store.counters.since(self.snap)
        return out

    def fail(self, phase: str):
        out = self.finish()
        out.notes.append(f"no feasible candidate left during {phase}")
        return BudgetUnsatisfiable(
            f"{self.policy.value}: store weight {self.store.total_weight} exceeds budget {self.budget} "
            "and no feasible eviction remains",
            out,
        )


def _ordered_leaf_pass(trigger: _Trigger, view, why: str) -> None:
    while trigger.over:
        nid = view.first()
        if nid is None:
            raise trigger.fail("eviction")
        trigger.evict(nid, why)


def apply_fifo(store, budget: int, config: PolicyConfig | None = None) -> PolicyOutcome:
    """Evict the oldest feasible leaf until within budget."""
    t = _Trigger(store, budget, PolicyId.FIFO)
    if t.over:
        t.outcome.phases_executed.append("temporal")
        _ordered_leaf_pass(t, store.temporal.leaves, make_rationale("evict", policy="Fifo"))
    return t.finish()


def apply_lru(store, budget: int, config: PolicyConfig | None = None) -> PolicyOutcome:
    """Evict the least recently accessed feasible leaf until within budget."""
    t = _Trigger(store, budget, PolicyId.LRU)
    if t.over:
        t.outcome.phases_executed.append("recency")
        _ordered_leaf_pass(t, store.access.leaves, make_rationale("evict", policy="Lru"))
    return t.finish()


def _rng(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def apply_random_drop(store, budget: int, rng_seed=0, config: PolicyConfig | None = None) -> PolicyOutcome:
    """Evict uniformly random feasible leaves until within budget."""
    rng = _rng(rng_seed)
    t = _Trigger(store, budget, PolicyId.RANDOM_DROP)
    why = make_rationale("evict", policy="RandomDrop")
    if t.over:
        t.outcome.phases_executed.append("random")
    while t.over:
        leaves = store.temporal.leaves
        if not len(leaves):
            raise t.fail("random")
        nid = leaves._keys[int(rng.integers(len(leaves)))][-1]
        t.evict(nid, why)
    return t.finish()


def _importance_terms(node, cfg: ScoringConfig, now: int, max_a: int) -> tuple[float, dict]:
    rec = math.exp(-cfg.lambda_age * max(0, now - node.created_at))
    freq = node.access_count / (1.0 + max_a)
    tw = cfg.type_weight_table[node.node_type]
    imp = importance_value(tw, rec, freq, cfg)
    terms = {"type prior": cfg.imp_alpha * tw, "recency": cfg.imp_beta * rec, "frequency": cfg.imp_gamma * freq}
    return imp, terms


def _priority_pass(t: _Trigger, cfg: PolicyConfig, phase: str = "importance") -> None:
    """Pop the smallest imp/w key among candidates, with hysteresis."""
    store = t.store
    sc = cfg.scoring
    now = store.now
    max_a = store.max_access
    marks: dict = store.policy_state.setdefault("hysteresis", {})
    marks_keys = [k for k in marks if k not in store.nodes]
    for k in marks_keys:
        del marks[k]

    def key_of(nid):
        node = store.nodes[nid]
        imp, _ = _importance_terms(node, sc, now, max_a)
        return imp / node.weight

    cands = store.eviction_candidates()
    raw = {nid: key_of(nid) for nid in cands}
    h = cfg.hysteresis_fraction * abs(float(np.median(list(raw.values())))) if raw else 0.0

    def effective(nid, key):
        old = marks.get(nid)
        if old is None:
            return key
        if key >= old + h:
            del marks[nid]
            return key
        return key - h

    entries = [(effective(nid, k), store.nodes[nid].created_at, nid) for nid, k in raw.items()]
    store.importance.rebuild(entries)
    t.outcome.phases_executed.append(phase)
    last_key = None
    while t.over:
        entry = store.importance.pop(lambda e: store.is_candidate(e[-1]))
        if entry is None:
            raise t.fail(phase)
        nid = entry[-1]
        node = store.nodes[nid]
        parent = node.structural_parent
        imp, terms = _importance_terms(node, sc, now, max_a)
        terms["weight"] = -float(node.weight) / 100.0
        t.evict(nid, make_rationale("evict", terms), {"importance": round(imp, 6), "key": round(entry[0], 9)})
        last_key = entry[0]
        if parent is not None and parent in store.nodes and store.is_candidate(parent):
            k = key_of(parent)
            store.importance.push((effective(parent, k), store.nodes[parent].created_at, parent))
    # survivors that were eviction-eligible and close to the boundary get marked
    if last_key is not None:
        for nid in store.eviction_candidates():
            k = raw.get(nid)
            if k is not None and k - last_key <= h and nid not in marks:
                marks[nid] = k


def apply_priority_decay(store, budget: int, config: PolicyConfig | None = None) -> PolicyOutcome:
    cfg = config or PolicyConfig()
    t = _Trigger(store, budget, PolicyId.PRIORITY_DECAY)
    if t.over:
        _priority_pass(t, cfg)
    return t.finish()


def _record_reflection(t: _Trigger, results) -> None:
    for r in results:
        if r.status == "merged":
            t.outcome.summarized.append((tuple(r.member_ids), r.summary_id, r.distortion))
        else:
            t.outcome.notes.append(f"cluster skipped: {r.reason}")


def apply_reflection_summary(store, budget: int, config: PolicyConfig | None = None, *, fallback: bool = True) -> PolicyOutcome:
    """Consolidate clusters; a priority pass covers any remaining excess."""
    cfg = config or PolicyConfig()
    t = _Trigger(store, budget, PolicyId.REFLECTION_SUMMARY)
    if not t.over:
        return t.finish()
    t.outcome.phases_executed.append("reflect")
    _record_reflection(t, reflect(store, cfg.reflection, budget=budget, policy=PolicyId.REFLECTION_SUMMARY.value, rules=store.rules))
    if t.over:
        t.outcome.needs_followup = True
        if fallback:
            _priority_pass(t, cfg)
    return t.finish()


def _hybrid_temporal(t: _Trigger, cfg: PolicyConfig) -> None:
    store = t.store
    sc = cfg.scoring
    now = store.now
    max_a = store.max_access
    for nid in list(store.temporal.leaves):
        if not t.over:
            return
        if nid not in store.nodes or not store.is_candidate(nid):
            continue
        node = store.nodes[nid]
        if now - node.last_access < cfg.stale_after:
            continue
        imp, terms = _importance_terms(node, sc, now, max_a)
        if imp >= cfg.temporal_importance_ceiling:
            continue
        t.evict(nid, "evict due to stale access and low importance", {"importance": round(imp, 6)})


def _hybrid_importance(t: _Trigger, cfg: PolicyConfig) -> None:
    store = t.store
    ids = store.live_ids()
    d_all = densities(store, ids, store.policy_state.get("goal"), cfg.scoring)
    median = float(np.median(d_all)) if len(d_all) else 0.0
    dens = dict(zip(ids, d_all.tolist()))
    entries = [(dens[n], store.nodes[n].created_at, n) for n in store.eviction_candidates()]
    store.importance.rebuild(entries)
    goal = store.policy_state.get("goal")
    while t.over:
        entry = store.importance.pop(lambda e: store.is_candidate(e[-1]))
        if entry is None or entry[0] >= median:
            return
        nid = entry[-1]
        node = store.nodes[nid]
        parent = node.structural_parent
        feats = feature_matrix(store, [nid], goal, cfg.scoring)[0]
        terms = density_contributions(node, feats, cfg.scoring)
        t.evict(nid, make_rationale("evict", {k: -v for k, v in terms.items()} | {"density": entry[0]}), {"density": round(entry[0], 9)})
        if parent is not None and parent in store.nodes and store.is_candidate(parent):
            d = float(densities(store, [parent], goal, cfg.scoring)[0])
            store.importance.push((d, store.nodes[parent].created_at, parent))


def _hybrid_privacy(t: _Trigger, cfg: PolicyConfig, rng) -> None:
    store = t.store
    sc = cfg.scoring
    goal = store.policy_state.get("goal")
    while t.over:
        cands = store.eviction_candidates()
        if not cands:
            raise t.fail("privacy")
        now = store.now
        max_a = store.max_access
        max_age = max(now - n.created_at for n in store.nodes.values())
        feats = feature_matrix(store, cands, goal, sc)
        nodes = [store.nodes[c] for c in cands]
        util = {c: utility_proxy(n.node_type, feats[i], sc) for i, (c, n) in enumerate(zip(cands, nodes))}
        dens = {c: (util[c] - sc.lambda_priv * n.sensitivity) / n.weight for c, n in zip(cands, nodes)}
        rp = {}
        for c, n in zip(cands, nodes):
            imp, _ = _importance_terms(n, sc, now, max_a)
            age_norm = (now - n.created_at) / max_age if max_age > 0 else 0.0
            rp[c] = removal_priority_value(n.sensitivity, age_norm, imp)
        order = sorted(cands, key=lambda c: (-rp[c], dens[c], store.nodes[c].created_at, c))
        top = order[0]
        note = ""
        if cfg.dp_enabled:
            tol = cfg.dp.tie_tolerance
            if tol is None:
                tol = cfg.dp.tie_fraction * float(np.median(np.abs(list(dens.values()))))
            band = [c for c in order if abs(dens[c] - dens[top]) <= tol and abs(rp[c] - rp[top]) <= tol]
            if len(band) > 1:
                top, note = dp_tie_break(store, band, util, cfg.dp, rng, sc.lambda_priv)
                if note:
                    t.outcome.notes.append(note)
        n = store.nodes[top]
        imp, _ = _importance_terms(n, sc, now, max_a)
        terms = {"sensitivity": n.sensitivity, "age": (now - n.created_at) / max_age if max_age else 0.0, "importance": 1.0 - imp}
        t.evict(top, make_rationale("evict", terms), {"removal_priority": round(rp[top], 9), "density": round(dens[top], 9)})


def apply_hybrid(store, budget: int, config: PolicyConfig | None = None, rng_seed=0) -> PolicyOutcome:
    """Temporal skim, reflection, importance eviction, then the privacy pass."""
    cfg = config or PolicyConfig()
    rng = _rng(rng_seed)
    t = _Trigger(store, budget, PolicyId.HYBRID)
    phases = (
        ("temporal", lambda: _hybrid_temporal(t, cfg)),
        (
            "reflect",
            lambda: _record_reflection(
                t, reflect(store, cfg.reflection, budget=budget, policy=PolicyId.HYBRID.value, rules=store.rules)
            ),
        ),
        ("importance", lambda: _hybrid_importance(t, cfg)),
        ("privacy", lambda: _hybrid_privacy(t, cfg, rng)),
    )
    for name, run in phases:
        if not t.over:
            break
        t.outcome.phases_executed.append(name)
        run()
    if t.over:
        raise t.fail("hybrid")
    return t.finish()


def apply_policy(policy: PolicyId, store, budget: int, config: PolicyConfig | None = None, rng=None) -> PolicyOutcome:
    policy = PolicyId(policy)
    if policy is PolicyId.FIFO:
        return apply_fifo(store, budget, config)
    if policy is PolicyId.LRU:
        return apply_lru(store, budget, config)
    if policy is PolicyId.PRIORITY_DECAY:
        return apply_priority_decay(store, budget, config)
    if policy is PolicyId.REFLECTION_SUMMARY:
        return apply_reflection_summary(store, budget, config)
    if policy is PolicyId.RANDOM_DROP:
        return apply_random_drop(store, budget, rng if rng is not None else 0, config)
    return apply_hybrid(store, budget, config, rng if rng is not None else 0)


# ------------------------------------------------------------------ bandit


@dataclass
class BanditState:
    counts: dict = field(default_factory=lambda: {p: 0 for p in POLICY_ORDER})
    means: dict = field(default_factory=lambda: {p: 0.0 for p in POLICY_ORDER})
    context_log: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def update(self, arm: PolicyId, reward: float) -> None:
        arm = PolicyId(arm)
        self.counts[arm] += 1
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm]


def select_policy(workload_features, bandit_state: BanditState) -> PolicyId:
    """UCB1; unexplored arms first in declaration order.

    Workload features are logged for later analysis but do not enter the
    index.
    """
    bandit_state.context_log.append(workload_features)
    for arm in POLICY_ORDER:
        if bandit_state.counts[arm] == 0:
            return arm
    total = bandit_state.total
    best, best_val = None, -math.inf
    for arm in POLICY_ORDER:
        val = bandit_state.means[arm] + math.sqrt(2.0 * math.log(total) / bandit_state.counts[arm])
        if val > best_val + 1e-15:
            best, best_val = arm, val
    return best
