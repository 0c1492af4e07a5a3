"""Oracle checks for the retention guarantees.

Each check builds its own random corpus from a fixed seed, runs the
library code against an exact or analytic reference and returns a
``Check`` with the numbers behind the verdict.  ``run_checks`` bundles them
for the CLI; the acceptance tests call them one at a time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import BudgetUnsatisfiable
from .mem_graph import MemoryStore
from .policies import POLICY_ORDER, PolicyConfig, PolicyId, apply_hybrid, apply_lru, apply_policy
from .privacy_engine import DpConfig, PrivacyInstance, dp_ratio_audit, exp_mechanism_select, modular_delta_q, selection_log_probs
from .reflection import ReflectionConfig, cluster_episodes, consolidate, distortion, summarize_cluster
from .retention_optimizer import (
    RetentionInstance,
    RetentionItem,
    best_of_greedy_and_singleton,
    brute_force_optimum,
    verify_budget_monotonicity,
)
from .schema import NodeDraft, NodeType, Provenance, Relation
from .scoring import CoverageSubmodular, Modular, MeanEmbeddingProbe, RecencyDecay
from .text import EMBED_DIM

TOL = 1e-9

TOPIC_BANKS = (
    ("harbor", "ferry", "tide", "pier", "anchor", "buoy", "gull", "dock"),
    ("budget", "invoice", "ledger", "audit", "margin", "forecast", "quarter", "payroll"),
    ("garden", "tulip", "compost", "seedling", "trellis", "mulch", "hedge", "orchard"),
    ("guitar", "chord", "tempo", "melody", "rehearsal", "encore", "amplifier", "setlist"),
    ("compiler", "parser", "lexer", "bytecode", "linker", "opcode", "register", "inlining"),
    ("glacier", "summit", "crampon", "rope", "ridge", "crevasse", "basecamp", "altitude"),
)

DEFAULT_COUNTS = {
    "greedy": 500,
    "lru": 100,
    "fuzz_triggers": 10_000,
    "ladder": 200,
    "dp_bases": 40,
    "dp_draws": 100_000,
    "hybrid": 1000,
    "distortion": 200,
}


@dataclass
class Check:
    name: str
    passed: bool
    numbers: dict = field(default_factory=dict)
    expected_failure: bool = False
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "expected_failure": self.expected_failure,
            "seconds": round(self.seconds, 3),
            "numbers": self.numbers,
        }

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        if self.expected_failure:
            tag += " (expected violation detected)" if self.passed else " (violation not detected)"
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.numbers.items() if not isinstance(v, (list, dict)))
        return f"{tag:5s} {self.name}: {shown}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out.seconds = time.perf_counter() - t0
        return out

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ------------------------------------------------------------------ instance generators


def random_forest_instance(rng, n: int, max_depth: int = 3, kind: str = "coverage", budget_fraction=(0.25, 0.75)) -> RetentionInstance:
    """Random dependency forest with integer weights and a knapsack budget."""
    items = []
    depth = {}
    n_topics = max(4, 2 * n)
    for k in range(n):
        iid = f"i{k:02d}"
        parent = None
        if k and rng.random() < 0.5:
            options = [it.id for it in items if depth[it.id] < max_depth - 1]
            if options:
                parent = options[int(rng.integers(len(options)))]
        depth[iid] = 0 if parent is None else depth[parent] + 1
        w = int(rng.integers(1, 11))
        if kind == "coverage":
            size = int(rng.integers(1, 4))
            topics = frozenset(f"t{t}" for t in rng.choice(n_topics, size=size, replace=False).tolist())
            items.append(RetentionItem(iid, w, topics=topics, parent=parent))
        else:
            items.append(RetentionItem(iid, w, value=round(float(rng.uniform(0.5, 10.0)), 6), parent=parent))
    total = sum(it.weight for it in items)
    lo, hi = budget_fraction
    budget = max(1, int(total * rng.uniform(lo, hi)))
    if kind == "coverage":
        tw = {f"t{t}": round(float(rng.uniform(0.5, 3.0)), 6) for t in range(n_topics)}
        return RetentionInstance.coverage(items, budget, tw)
    return RetentionInstance.modular(items, budget)


def _unit(rng, dim: int = EMBED_DIM) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _episode_text(rng, bank) -> str:
    words = list(bank)
    drop = int(rng.integers(len(words)))
    del words[drop]
    return "notes: " + " ".join(words)


def _draft(rng, store, node_type, parents=(), requires=(), weight=None, text=None, status="active"):
    sens = float(rng.choice([0.0, 0.1, 0.3, 0.6, 0.9]))
    if node_type is NodeType.EPISODIC:
        bank = TOPIC_BANKS[int(rng.integers(len(TOPIC_BANKS)))]
        text = text or _episode_text(rng, bank)
        payload = {"event": "chat", "participants": []}
    elif node_type is NodeType.TASK:
        text = text or f"goal {int(rng.integers(1000))} finish the plan"
        payload = {"goal": text, "status": status}
    elif node_type is NodeType.SOCIAL:
        text = text or f"person {int(rng.integers(50))} likes tea"
        payload = {"entity": f"p{int(rng.integers(50))}"}
    else:
        text = text or f"fact {int(rng.integers(10_000))} about the world"
        payload = {"concept": "fact"}
    return NodeDraft(
        content=text,
        node_type=node_type,
        payload=payload,
        provenance=Provenance(parents=tuple(parents), user_id="u1" if sens > 0.5 else None),
        requires=tuple(requires),
        sensitivity=sens,
        weight=int(weight if weight is not None else rng.integers(1, 31)),
    )


class _FuzzStore:
    """A store under test plus the modular values the fuzz assigns to its nodes."""

    TYPES = (NodeType.EPISODIC, NodeType.EPISODIC, NodeType.SEMANTIC, NodeType.SOCIAL, NodeType.TASK)

    def __init__(self, rng):
        self.rng = rng
        self.store = MemoryStore(10**9)
        self.values: dict[str, float] = {}
        self.clock = 0

    def grow(self, count: int) -> None:
        rng, store = self.rng, self.store
        for _ in range(count):
            self.clock += int(rng.integers(1, 6))
            store.advance(self.clock)
            live = store.live_ids()
            nt = self.TYPES[int(rng.integers(len(self.TYPES)))]
            parents, requires = (), ()
            if live and nt is not NodeType.EPISODIC and rng.random() < 0.45:
                parents = (live[int(rng.integers(len(live)))],)
            if nt is NodeType.TASK and live:
                k = int(rng.integers(0, min(3, len(live)) + 1))
                requires = tuple(sorted(set(rng.choice(live, size=k, replace=False).tolist()))) if k else ()
            status = "active" if rng.random() < 0.4 else "pending"
            nid = store.insert_node(_draft(rng, store, nt, parents, requires, status=status))
            self.values[nid] = round(float(rng.uniform(0.0, 5.0)), 6)
            if live and rng.random() < 0.3:
                other = live[int(rng.integers(len(live)))]
                store.add_link(nid, Relation.COLLEAGUE_OF, other)
            if live and rng.random() < 0.5:
                store.touch([live[int(rng.integers(len(live)))]])

    def lipschitz(self) -> float:
        s = self.store
        return max(self.values[i] / s.nodes[i].weight for i in s.nodes)

    def utility(self) -> float:
        return sum(self.values[i] for i in self.store.nodes)


def independent_feasibility(store, prereq_before: dict) -> list[str]:
    """Recheck closure and task-safety straight from nodes and edges.

    ``prereq_before`` maps each active goal to the prerequisites that were
    live when the trigger started.
    """
    problems = []
    live = set(store.nodes)
    for nid, node in store.nodes.items():
        p = node.structural_parent
        if p is not None and p not in live:
            problems.append(f"{nid} kept without its parent {p}")
    derived_by: dict[str, set] = {}
    for e in store.edges:
        if e.relation is Relation.DERIVES_FROM:
            derived_by.setdefault(e.dst, set()).add(e.src)
    for g, prereqs in prereq_before.items():
        if g not in live:
            problems.append(f"active goal {g} removed")
            continue
        for p in prereqs:
            if p not in live and not (derived_by.get(p, set()) & live):
                problems.append(f"prerequisite {p} of {g} lost without a cover")
    weight = sum(n.weight for n in store.nodes.values())
    if weight != store.total_weight:
        problems.append(f"weight ledger {store.total_weight} != {weight}")
    return problems


def _active_prereqs(store) -> dict:
    out = {}
    for nid, node in store.nodes.items():
        if node.is_active_task:
            reqs = [e.dst for e in store.edges_of(nid, Relation.REQUIRES)]
            out[nid] = [p for p in reqs if p in store.nodes]
    return out


# ------------------------------------------------------------------ checks


@_timed
def check_greedy_ratio(n_instances: int = 500, seed: int = 11) -> Check:
    """best_of_greedy_and_singleton against the exact optimum on coverage forests."""
    rng = np.random.default_rng(seed)
    ratios = []
    worst = None
    for k in range(n_instances):
        n = int(rng.integers(3, 15))
        inst = random_forest_instance(rng, n, 3, "coverage")
        _, opt = brute_force_optimum(inst)
        got = inst.value(best_of_greedy_and_singleton(inst))
        r = 1.0 if opt <= 0 else got / opt
        ratios.append(r)
        if worst is None or r < worst[0]:
            worst = (r, k)
    arr = np.array(ratios)
    ok = bool(arr.min() >= 0.5 - TOL and arr.mean() >= 0.9)
    return Check(
        "greedy_half_approximation",
        ok,
        {"instances": n_instances, "min_ratio": float(arr.min()), "mean_ratio": float(arr.mean()), "worst_instance": worst[1]},
    )


@_timed
def check_lru_optimality(n_instances: int = 100, seed: int = 12) -> Check:
    """LRU survivors against the exact optimum of an exponentially decayed modular U."""
    rng = np.random.default_rng(seed)
    mismatches = []
    for k in range(n_instances):
        n = int(rng.integers(3, 15))
        w = int(rng.integers(1, 9))
        rate = float(rng.uniform(0.01, 0.3))
        store = MemoryStore(10**9)
        ids = []
        for j in range(n):
            store.advance(j)
            ids.append(store.insert_node(NodeDraft(f"item {j} text", NodeType.SEMANTIC, sensitivity=0.0, weight=w)))
        now = n
        for _ in range(int(rng.integers(0, 3 * n))):
            now += int(rng.integers(0, 3))
            store.advance(now)
            store.touch([ids[int(rng.integers(n))]])
        keep = int(rng.integers(1, n))
        budget = keep * w
        ages = {i: store.now - store.nodes[i].last_access for i in ids}
        util = RecencyDecay({i: 1.0 for i in ids}, ages, rate)
        apply_lru(store, budget)
        got = util.evaluate(store.nodes)
        inst = RetentionInstance([RetentionItem(i, w, value=util.values[i]) for i in ids], budget, util)
        _, opt = brute_force_optimum(inst)
        if abs(got - opt) > TOL:
            mismatches.append({"instance": k, "lru": got, "optimum": opt})
    return Check("lru_optimality", not mismatches, {"instances": n_instances, "mismatches": len(mismatches), "details": mismatches[:5]})


@_timed
def fuzz_policy_triggers(n_triggers: int = 10_000, seed: int = 13) -> Check:
    """Weight-Lipschitz drop, feasibility and counter bounds over random triggers.

    Values are modular; a summary is worth min(L * w_summary, sum of member
    values), which keeps its own value/weight ratio at most L.
    """
    rng = np.random.default_rng(seed)
    cfg = PolicyConfig(reflection=ReflectionConfig(cluster_similarity_threshold=0.75, temporal_gap_limit=60))
    stats = {p.value: {"triggers": 0, "unsatisfiable": 0} for p in POLICY_ORDER}
    lip_bad, feas_bad, budget_bad, counter_bad = [], [], [], []
    worst_slack = math.inf
    summaries = 0
    done = 0
    while done < n_triggers:
        fz = _FuzzStore(rng)
        fz.grow(int(rng.integers(12, 40)))
        for _ in range(int(rng.integers(5, 15))):
            if done >= n_triggers:
                break
            policy = POLICY_ORDER[done % len(POLICY_ORDER)]
            store = fz.store
            fz.clock += 1
            store.advance(fz.clock)
            L = fz.lipschitz()
            u0, w0, n0 = fz.utility(), store.total_weight, len(store.nodes)
            prereqs = _active_prereqs(store)
            budget = max(1, int(w0 * rng.uniform(0.3, 0.95)))
            raised = False
            try:
                out = apply_policy(policy, store, budget, cfg, rng=rng)
            except BudgetUnsatisfiable as exc:
                out, raised = exc.outcome, True
                stats[policy.value]["unsatisfiable"] += 1
            stats[policy.value]["triggers"] += 1
            for members, sid, _d in out.summarized:
                fz.values[sid] = min(L * store.nodes[sid].weight, sum(fz.values[m] for m in members)) if sid in store.nodes else 0.0
                summaries += 1
            freed = w0 - store.total_weight
            drop = u0 - fz.utility()
            slack = L * freed + TOL - drop
            worst_slack = min(worst_slack, slack)
            if slack < 0:
                lip_bad.append({"trigger": done, "policy": policy.value, "drop": drop, "bound": L * freed})
            problems = independent_feasibility(store, prereqs)
            if problems:
                feas_bad.append({"trigger": done, "policy": policy.value, "problems": problems[:3]})
            if not raised and store.total_weight > budget:
                budget_bad.append({"trigger": done, "policy": policy.value, "weight": store.total_weight, "budget": budget})
            k = len(out.evicted)
            ops = out.op_counters
            if policy in (PolicyId.FIFO, PolicyId.LRU) and ops.get("nodes_touched", 0) > 2 * k + 8:
                counter_bad.append({"trigger": done, "policy": policy.value, "nodes_touched": ops["nodes_touched"], "k": k})
            if policy is PolicyId.PRIORITY_DECAY:
                bound = 4 * k * math.ceil(math.log2(max(1, n0))) + 8
                if ops.get("pq_ops", 0) > bound:
                    counter_bad.append({"trigger": done, "policy": policy.value, "pq_ops": ops["pq_ops"], "bound": bound})
            done += 1
            fz.grow(int(rng.integers(1, 8)))
    ok = not (lip_bad or feas_bad or budget_bad or counter_bad)
    return Check(
        "policy_fuzz",
        ok,
        {
            "triggers": done,
            "summaries": summaries,
            "lipschitz_violations": len(lip_bad),
            "min_lipschitz_slack": worst_slack,
            "feasibility_violations": len(feas_bad),
            "budget_violations": len(budget_bad),
            "counter_violations": len(counter_bad),
            "per_policy": stats,
            "examples": (lip_bad + feas_bad + budget_bad + counter_bad)[:5],
        },
    )


@_timed
def check_budget_monotonicity(n_instances: int = 200, seed: int = 14, ladder=(10, 20, 40, 80)) -> Check:
    rng = np.random.default_rng(seed)
    family = []
    for k in range(n_instances):
        n = int(rng.integers(4, 13))
        family.append(random_forest_instance(rng, n, 3, "coverage" if k % 2 else "modular"))
    rep = verify_budget_monotonicity(family, ladder)
    return Check(
        "budget_monotonicity",
        rep["ok"],
        {
            "instances": n_instances,
            "ladder": list(ladder),
            "monotonicity_violations": len(rep["monotonicity_violations"]),
            "lipschitz_violations": len(rep["lipschitz_violations"]),
            "heuristic_nonmonotone": len(rep["heuristic_nonmonotone"]),
            "examples": (rep["monotonicity_violations"] + rep["lipschitz_violations"])[:5],
        },
    )


def _feasible_subsets(ids, weights, budget) -> list[frozenset]:
    out = []
    for r in range(len(ids) + 1):
        for combo in combinations(ids, r):
            if sum(weights[i] for i in combo) <= budget:
                out.append(frozenset(combo))
    return out


def dp_corpus(n_bases: int = 40, seed: int = 15):
    """Adjacent instance pairs on 3 to 5 nodes with every budget-feasible outcome.

    Yields (a, b, outcomes).  The neighbour changes one node's content and
    sensitivity; weights stay fixed so both share the outcome space.
    """
    rng = np.random.default_rng(seed)
    for n in (3, 4, 5):
        for k in range(n_bases):
            ids = [f"m{j}" for j in range(n)]
            weights = {i: int(rng.integers(1, 6)) for i in ids}
            sens = {i: float(rng.choice([0.0, 0.2, 0.5, 0.9])) for i in ids}
            budget = int(rng.integers(max(weights.values()), sum(weights.values()) + 1))
            outcomes = _feasible_subsets(ids, weights, budget)
            coverage = bool(k % 2)
            if coverage:
                topics = {i: frozenset(rng.choice(6, size=int(rng.integers(1, 3)), replace=False).tolist()) for i in ids}
                base = PrivacyInstance(CoverageSubmodular(topics), sens, weights)
            else:
                vals = {i: round(float(rng.uniform(0, 4)), 6) for i in ids}
                base = PrivacyInstance(Modular(vals), sens, weights)
            for x in ids:
                s2 = dict(sens)
                s2[x] = float(rng.choice([0.3, 0.7, 1.0]))
                if coverage:
                    t2 = dict(base.utility.topics)
                    t2[x] = frozenset(rng.choice(6, size=int(rng.integers(1, 3)), replace=False).tolist())
                    nb = PrivacyInstance(CoverageSubmodular(t2), s2, weights)
                else:
                    v2 = dict(base.utility.values)
                    v2[x] = round(float(rng.uniform(0, 4)), 6)
                    nb = PrivacyInstance(Modular(v2), s2, weights)
                yield base, nb, outcomes


def negative_control_instance():
    """Coverage pair where one node swaps topic A for B, with skewed outcomes.

    y covers A and z covers B.  Most outcomes keep x and y (score drops by
    one under the swap), one keeps x and z (score rises by one), so the
    log-ratio spread reaches nearly twice the per-outcome change.
    """
    fillers = ("f1", "f2", "f3", "f4")
    ids = ("x", "y", "z") + fillers
    weights = {i: 1 for i in ids}
    sens = {i: 0.0 for i in ids}
    sens["x"] = 0.5
    base_topics = {"y": {"A"}, "z": {"B"}} | {f: {f"T{f}"} for f in fillers}
    a = PrivacyInstance(CoverageSubmodular(base_topics | {"x": {"A"}}), sens, weights)
    b = PrivacyInstance(CoverageSubmodular(base_topics | {"x": {"B"}}), sens, weights)
    outcomes = []
    for r in range(len(fillers) + 1):
        for combo in combinations(fillers, r):
            outcomes.append(frozenset(("x", "y") + combo))
    outcomes.append(frozenset(("x", "z")))
    return a, b, outcomes


@_timed
def check_dp_ratio(n_bases: int = 40, epsilons=(0.5, 1.0, 2.0), lambda_priv: float = 0.3, seed: int = 15) -> Check:
    worst = 0.0
    worst_eps = None
    pairs = 0
    over = []
    for a, b, outcomes in dp_corpus(n_bases, seed):
        for eps in epsilons:
            r = dp_ratio_audit(a, b, outcomes, DpConfig(epsilon=eps), lambda_priv)
            pairs += 1
            if r / eps > worst:
                worst, worst_eps = r / eps, eps
            if r > eps + TOL:
                over.append({"epsilon": eps, "ratio": r})
    return Check(
        "dp_ratio_exhaustive",
        not over,
        {"audits": pairs, "max_ratio_over_epsilon": worst, "at_epsilon": worst_eps, "violations": len(over)},
    )


@_timed
def check_dp_sampling(n_draws: int = 100_000, epsilon: float = 1.0, lambda_priv: float = 0.3, seed: int = 16) -> Check:
    """Empirical selection frequencies against the analytic softmax."""
    ids = ["a", "b", "c", "d"]
    weights = {"a": 2, "b": 3, "c": 1, "d": 4}
    sens = {"a": 0.9, "b": 0.1, "c": 0.5, "d": 0.0}
    util = Modular({"a": 3.0, "b": 1.5, "c": 0.5, "d": 2.5})
    outcomes = _feasible_subsets(ids, weights, 5)
    dq = modular_delta_q(util, weights, lambda_priv)
    analytic = np.exp(selection_log_probs([util.evaluate(S) - lambda_priv * sum(sens[i] for i in S) for S in outcomes], epsilon, dq))
    cfg = DpConfig(epsilon=epsilon)
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(outcomes))
    for _ in range(n_draws):
        draw = exp_mechanism_select(outcomes, util, lambda_priv, cfg, rng, sensitivities=sens, weights=weights)
        counts[draw.index] += 1
    tv = 0.5 * float(np.abs(counts / n_draws - analytic).sum())
    return Check("dp_empirical_distribution", tv <= 0.01, {"draws": n_draws, "outcomes": len(outcomes), "total_variation": tv})


@_timed
def check_dp_negative_control(epsilon: float = 1.0, lambda_priv: float = 0.3) -> Check:
    """Halving the sensitivity bound must let the audit see a ratio above epsilon."""
    a, b, outcomes = negative_control_instance()
    honest = max(modular_delta_q(a.utility, a.weights, lambda_priv), modular_delta_q(b.utility, b.weights, lambda_priv))
    fair = dp_ratio_audit(a, b, outcomes, DpConfig(epsilon=epsilon), lambda_priv)
    bad = dp_ratio_audit(a, b, outcomes, DpConfig(epsilon=epsilon, sensitivity_bound=honest / 2), lambda_priv)
    return Check(
        "dp_negative_control",
        bad > epsilon + TOL and fair <= epsilon + TOL,
        {"epsilon": epsilon, "honest_delta_q": honest, "ratio_honest": fair, "ratio_understated": bad},
        expected_failure=True,
    )


def adversarial_store(rng, kind: str):
    """Stores built to stress the hybrid phases; returns (store, budget)."""
    store = MemoryStore(10**9)
    t = 0

    def add(nt, parents=(), requires=(), weight=None, text=None, status="active"):
        nonlocal t
        t += 1
        store.advance(t)
        return store.insert_node(_draft(rng, store, nt, parents, requires, weight, text, status))

    if kind == "chain":
        prev = add(NodeType.SEMANTIC)
        for _ in range(int(rng.integers(20, 80))):
            prev = add(NodeType.SEMANTIC, parents=(prev,))
    elif kind == "summaries":
        bank = TOPIC_BANKS[int(rng.integers(len(TOPIC_BANKS)))]
        for _ in range(int(rng.integers(6, 20))):
            add(NodeType.EPISODIC, text=_episode_text(rng, bank), weight=int(rng.integers(20, 60)))
        heavy = add(NodeType.SEMANTIC, weight=int(rng.integers(200, 500)))
        for _ in range(int(rng.integers(2, 6))):
            add(NodeType.SEMANTIC, parents=(heavy,), weight=int(rng.integers(50, 150)))
    elif kind == "pinned":
        facts = [add(NodeType.SEMANTIC) for _ in range(int(rng.integers(3, 10)))]
        add(NodeType.TASK, requires=facts[: int(rng.integers(1, len(facts) + 1))])
        for _ in range(int(rng.integers(5, 20))):
            add(NodeType.EPISODIC)
    else:
        fz = _FuzzStore(rng)
        fz.grow(int(rng.integers(30, 80)))
        store = fz.store
        t = fz.clock
    store.advance(t + int(rng.integers(0, 200)))
    budget = max(1, int(store.total_weight * rng.uniform(0.05, 0.9)))
    return store, budget


@_timed
def check_hybrid_termination(n_instances: int = 1000, seed: int = 17) -> Check:
    rng = np.random.default_rng(seed)
    kinds = ("chain", "summaries", "pinned", "mixed")
    cfg = PolicyConfig(reflection=ReflectionConfig(temporal_gap_limit=200))
    restored = raised = 0
    bad = []
    max_phases = 0
    for k in range(n_instances):
        kind = kinds[k % len(kinds)]
        store, budget = adversarial_store(rng, kind)
        n0 = len(store.nodes)
        try:
            out = apply_hybrid(store, budget, cfg, rng)
            ok = store.total_weight <= budget
            restored += ok
        except BudgetUnsatisfiable as exc:
            out = exc.outcome
            raised += 1
            ok = True
        phases = out.phases_executed
        max_phases = max(max_phases, len(phases))
        if len(phases) > 4 or len(out.evicted) > n0 or not ok:
            bad.append({"instance": k, "kind": kind, "phases": phases})
    return Check(
        "hybrid_termination",
        not bad,
        {"instances": n_instances, "restored": restored, "unsatisfiable": raised, "max_phases": max_phases, "failures": len(bad)},
    )


@_timed
def check_distortion_bound(n_clusters: int = 200, seed: int = 18) -> Check:
    """|U(before) - U(after)| <= kappa * D for merged clusters under random probes."""
    rng = np.random.default_rng(seed)
    merged = attempts = 0
    worst = -math.inf
    bad = []
    while merged < n_clusters and attempts < 20 * n_clusters:
        attempts += 1
        kappa = float(rng.uniform(0.2, 5.0))
        cfg = ReflectionConfig(kappa=kappa, tau_util=0.6, temporal_gap_limit=100)
        store = MemoryStore(10**9)
        bank = TOPIC_BANKS[int(rng.integers(len(TOPIC_BANKS)))]
        for j in range(int(rng.integers(2, 7))):
            store.advance(j)
            store.insert_node(_draft(rng, store, NodeType.EPISODIC, text=_episode_text(rng, bank), weight=int(rng.integers(10, 40))))
        for cluster in cluster_episodes(store, cfg):
            summary = summarize_cluster(cluster, store)
            members = np.array([store.nodes[m].embedding for m in cluster.member_ids])
            res = consolidate(store, cluster, summary, cfg)
            if res.status != "merged":
                continue
            d = distortion(members, store.nodes[res.summary_id].embedding)
            for _ in range(5):
                probe = MeanEmbeddingProbe(_unit(rng), kappa)
                change = abs(probe.evaluate(members) - probe.evaluate(store.nodes[res.summary_id].embedding))
                worst = max(worst, change - kappa * d)
                if change > kappa * d + TOL:
                    bad.append({"cluster": merged, "change": change, "bound": kappa * d})
            merged += 1
    ok = not bad and merged >= n_clusters
    return Check(
        "distortion_bound",
        ok,
        {"clusters": merged, "attempts": attempts, "max_excess": worst, "violations": len(bad)},
    )


# ------------------------------------------------------------------ bundle


def run_checks(instances: int | None = None, negative_controls: bool = False, seed: int = 0) -> list[Check]:
    """All oracle checks; ``instances`` caps every randomized corpus size."""
    if instances is not None and instances < 1:
        raise ValueError("instances must be at least 1")
    counts = dict(DEFAULT_COUNTS)
    if instances is not None:
        counts = {k: min(v, instances) for k, v in counts.items()}
        counts["fuzz_triggers"] = min(DEFAULT_COUNTS["fuzz_triggers"], 20 * instances)
        counts["dp_draws"] = DEFAULT_COUNTS["dp_draws"]
    checks = [
        check_greedy_ratio(counts["greedy"], seed + 11),
        check_lru_optimality(counts["lru"], seed + 12),
        fuzz_policy_triggers(counts["fuzz_triggers"], seed + 13),
        check_budget_monotonicity(counts["ladder"], seed + 14),
        check_dp_ratio(counts["dp_bases"], seed=seed + 15),
        check_dp_sampling(counts["dp_draws"], seed=seed + 16),
        check_hybrid_termination(counts["hybrid"], seed + 17),
        check_distortion_bound(counts["distortion"], seed + 18),
    ]
    if negative_controls:
        checks.append(check_dp_negative_control())
    return checks
