import numpy as np
import pytest

from oracles import feasible_after_removal
from marsmem.audit import AuditLog
from marsmem.errors import BudgetUnsatisfiable
from marsmem.mem_graph import MemoryStore
from marsmem.policies import (
    POLICY_ORDER,
    BanditState,
    PolicyConfig,
    PolicyId,
    apply_fifo,
    apply_hybrid,
    apply_lru,
    apply_policy,
    apply_priority_decay,
    apply_random_drop,
    apply_reflection_summary,
    select_policy,
)
from marsmem.schema import NodeDraft, NodeType, Provenance
from marsmem.scoring import ScoringConfig


def draft(text="note", nt=NodeType.SEMANTIC, w=10, parents=(), s=0.0, **kw):
    return NodeDraft(text, nt, provenance=Provenance(parents=tuple(parents)), sensitivity=s, weight=w, **kw)


def flat_store(n, w=10, budget=10**6):
    s = MemoryStore(budget, audit=AuditLog())
    ids = []
    for j in range(n):
        s.advance(j + 1)
        ids.append(s.insert_node(draft(f"item {j} unique{j}", w=w)))
    return s, ids


def random_forest(seed, n=30):
    rng = np.random.default_rng(seed)
    s = MemoryStore(10**6, audit=AuditLog())
    for j in range(n):
        s.advance(j + 1)
        live = s.live_ids()
        parents = (live[int(rng.integers(len(live)))],) if live and rng.random() < 0.4 else ()
        s.insert_node(draft(f"fact {j} topic{rng.integers(50)}", w=int(rng.integers(1, 15)), parents=parents, s=float(rng.random())))
    return s


def test_policy_names_parse():
    assert PolicyId.parse("fifo") is PolicyId.FIFO
    assert PolicyId.parse("Priority_Decay") is PolicyId.PRIORITY_DECAY
    with pytest.raises(ValueError):
        PolicyId.parse("nope")


# ------------------------------------------------------------------ fifo


def test_fifo_evicts_two_oldest():
    s, ids = flat_store(5)
    out = apply_fifo(s, 30)
    assert [e[0] for e in out.evicted] == ids[:2]
    assert s.total_weight == 30 and out.freed_weight == 20


def test_fifo_noop_within_budget():
    s, _ = flat_store(3)
    out = apply_fifo(s, 30)
    assert out.evicted == [] and out.phases_executed == []


def test_fifo_matches_candidate_replay():
    for seed in range(5):
        s = random_forest(seed)
        ref = random_forest(seed)
        budget = s.total_weight // 2
        out = apply_fifo(s, budget)
        # replay: repeatedly take the oldest current candidate
        expect = []
        while ref.total_weight > budget:
            c = min(ref.eviction_candidates(), key=lambda n: (ref.nodes[n].created_at, n))
            expect.append(c)
            ref.evict(c)
        assert [e[0] for e in out.evicted] == expect
        assert feasible_after_removal(random_forest(seed), set(expect))


def test_fifo_unsatisfiable_on_protected_store():
    s = MemoryStore(100)
    p = s.insert_node(draft("prereq", w=20))
    s.insert_node(NodeDraft("goal", NodeType.TASK, payload={"status": "active"}, requires=(p,), sensitivity=0.0, weight=20))
    with pytest.raises(BudgetUnsatisfiable) as exc:
        apply_fifo(s, 10)
    assert exc.value.outcome.needs_followup is False


# ------------------------------------------------------------------ lru


def test_lru_evicts_stalest_first():
    s, ids = flat_store(4)
    s.touch([ids[0], ids[1], ids[3]], now=10)
    out = apply_lru(s, 30)
    assert [e[0] for e in out.evicted] == [ids[2]]


# ------------------------------------------------------------------ priority decay


def test_priority_decay_prefers_low_importance():
    cfg = PolicyConfig(scoring=ScoringConfig(imp_alpha=1, imp_beta=0, imp_gamma=0))
    s = MemoryStore(1000)
    lo = s.insert_node(draft("dull", nt=NodeType.EPISODIC, w=10))
    hi = s.insert_node(draft("goal", nt=NodeType.TASK, w=10, payload={"status": "completed"}))
    out = apply_priority_decay(s, 10, cfg)
    assert [e[0] for e in out.evicted] == [lo] and hi in s.nodes


def test_priority_decay_matches_greedy_replay():
    cfg = PolicyConfig(hysteresis_fraction=0.0)
    sc = cfg.scoring
    from marsmem.policies import _importance_terms

    s = MemoryStore(10**6)
    rng = np.random.default_rng(3)
    for j in range(12):
        s.advance(j + 1)
        s.insert_node(draft(f"n{j}", nt=list(NodeType)[j % 3], w=int(rng.integers(1, 12))))
    s.touch(s.live_ids()[::3], now=14)
    ref_ids = dict.fromkeys(s.live_ids())
    now, max_a = s.now, s.max_access
    key = {n: _importance_terms(s.nodes[n], sc, now, max_a)[0] / s.nodes[n].weight for n in ref_ids}
    budget = s.total_weight // 2
    total = s.total_weight
    expect = []
    for n in sorted(ref_ids, key=lambda n: (key[n], s.nodes[n].created_at, n)):
        if total <= budget:
            break
        expect.append(n)
        total -= s.nodes[n].weight
    out = apply_priority_decay(s, budget, cfg)
    assert [e[0] for e in out.evicted] == expect


# ------------------------------------------------------------------ random drop


def test_random_drop_is_uniform():
    counts = {}
    trials = 30_000
    rng = np.random.default_rng(7)
    for _ in range(trials):
        s, ids = flat_store(3)
        out = apply_random_drop(s, 20, rng)
        counts[ids.index(out.evicted[0][0])] = counts.get(ids.index(out.evicted[0][0]), 0) + 1
    for k in range(3):
        assert abs(counts[k] / trials - 1 / 3) <= 0.02


def test_random_drop_seed_deterministic():
    a, _ = flat_store(10)
    b, _ = flat_store(10)
    assert apply_random_drop(a, 40, 5).evicted == apply_random_drop(b, 40, 5).evicted


# ------------------------------------------------------------------ reflection summary

DUP = "garden tulip bulbs planted"


def episodes(n=3, text=DUP, s=0.3, w=10):
    st = MemoryStore(10**6, audit=AuditLog())
    for j in range(n):
        st.advance(j + 1)
        st.insert_node(draft(text, nt=NodeType.EPISODIC, w=w, s=s))
    return st


def test_reflection_without_clusters_flags_followup():
    s, _ = flat_store(4)
    out = apply_reflection_summary(s, 20, fallback=False)
    assert out.needs_followup and out.summarized == []


def test_reflection_merges_duplicates():
    s = episodes()
    out = apply_reflection_summary(s, 15)
    assert len(out.summarized) == 1
    sid = out.summarized[0][1]
    assert s.nodes[sid].weight <= 10
    assert out.freed_weight >= 20


# ------------------------------------------------------------------ hybrid


def stale_store():
    s = MemoryStore(10**6, audit=AuditLog())
    ids = [s.insert_node(draft(f"old fact {j} zz{j}", nt=NodeType.EPISODIC, w=10)) for j in range(4)]
    s.advance(200)
    return s, ids


def test_hybrid_noop_within_budget():
    s, _ = stale_store()
    out = apply_hybrid(s, 1000)
    assert out.phases_executed == [] and out.evicted == []


def test_hybrid_temporal_phase_suffices():
    s, _ = stale_store()
    out = apply_hybrid(s, 30)
    assert out.phases_executed == ["temporal"]


def test_hybrid_runs_three_phases():
    s = MemoryStore(10**6, audit=AuditLog())
    # fresh, high-frequency facts: temporal skips them and nothing clusters
    ids = [s.insert_node(draft(f"distinct {j} kw{j}", nt=NodeType.SEMANTIC, w=10)) for j in range(6)]
    s.insert_node(draft("junk filler", nt=NodeType.EPISODIC, w=1))
    s.touch(ids[:3], now=1)
    out = apply_hybrid(s, 40)
    assert out.phases_executed[:3] == ["temporal", "reflect", "importance"]
    assert s.total_weight <= 40


def test_all_policies_keep_store_feasible():
    for pol in POLICY_ORDER:
        for seed in range(3):
            s = random_forest(seed)
            before = set(s.nodes)
            apply_policy(pol, s, s.total_weight // 3, PolicyConfig(), rng=seed)
            assert s.total_weight <= random_forest(seed).total_weight // 3
            gone = before - set(s.nodes)
            assert feasible_after_removal(random_forest(seed), gone) or pol is PolicyId.REFLECTION_SUMMARY


# ------------------------------------------------------------------ bandit


def test_bandit_starts_with_fifo():
    assert select_policy({}, BanditState()) is PolicyId.FIFO


def test_bandit_explores_every_arm_once():
    st = BanditState()
    seen = []
    for _ in range(len(POLICY_ORDER)):
        arm = select_policy({}, st)
        seen.append(arm)
        st.update(arm, 0.5)
    assert seen == list(POLICY_ORDER)


def test_bandit_picks_dominant_arm():
    st = BanditState()
    for arm in POLICY_ORDER:
        for _ in range(50):
            st.update(arm, 0.0)
    for _ in range(50):
        st.update(PolicyId.LRU, 1.0)
    assert select_policy({}, st) is PolicyId.LRU


def test_bandit_concentrates_on_best_arm():
    rng = np.random.default_rng(0)
    means = dict(zip(POLICY_ORDER, (0.9, 0.5, 0.5, 0.4, 0.3, 0.5)))
    st = BanditState()
    pulls = 5000
    for _ in range(pulls):
        arm = select_policy({"n": 1}, st)
        st.update(arm, float(rng.random() < means[arm]))
    assert st.counts[PolicyId.FIFO] / pulls > 0.8
