"""Acceptance suite: one PASS/FAIL line per criterion.

Each criterion runs the library check and, where one exists, a second
route that recomputes the same quantity from the oracles module or plain
numpy.  Verdicts are collected in VERDICTS and echoed in the terminal
summary by conftest.
"""

import copy
import hashlib
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import bitmask_optimum
from marsmem.errors import BudgetUnsatisfiable
from marsmem.fifa_sim import SCENARIO_ORDER, run_sweep
from marsmem.mem_graph import MemoryStore
from marsmem.metrics import (
    cell_metrics,
    cliffs_delta,
    composite,
    cost_efficiency_raw,
    goal_completion,
    hedges_g,
    kendall_tau,
    minmax_rescale,
    narrative_coherence,
    privacy_metrics,
    social_recall,
    sweep_report,
)
from marsmem.policies import POLICY_ORDER, PolicyConfig, apply_lru, apply_policy
from marsmem.privacy_engine import DpConfig, dp_ratio_audit, modular_delta_q
from marsmem.reflection import ReflectionConfig
from marsmem.retention_optimizer import best_of_greedy_and_singleton
from marsmem.schema import NodeDraft, NodeType, Relation
from marsmem import verify
from marsmem.verify import _FuzzStore, random_forest_instance

VERDICTS = {}

DEFAULT_BUDGETS = [2000, 4000, 8000, 16000, 32000]
DEFAULT_SEEDS = list(range(1, 11))


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1


def test_criterion_01_composite_arithmetic():
    random_drop = dict(nc=0.667, gcr=0.078, sra=1.000, pp=0.722, ce=0.935)
    lru = dict(nc=0.501, gcr=0.058, sra=1.000, pp=0.780, ce=0.887)
    a, b = composite(random_drop), composite(lru)
    # second route: weights written out by hand
    w = dict(nc=0.25, gcr=0.25, sra=0.20, pp=0.15, ce=0.15)
    a2 = sum(w[k] * random_drop[k] for k in w)
    b2 = sum(w[k] * lru[k] for k in w)
    ok = abs(a - 0.635) <= 0.001 and abs(b - 0.590) <= 0.001 and abs(a - a2) < 1e-12 and abs(b - b2) < 1e-12
    verdict(1, ok, f"random_drop={a:.4f} (0.635), lru={b:.4f} (0.590)")


# ------------------------------------------------------------------ 2


def test_criterion_02_greedy_half_approximation():
    chk = verify.check_greedy_ratio(500)
    rng = np.random.default_rng(202)
    ratios = []
    for _ in range(60):
        inst = random_forest_instance(rng, int(rng.integers(3, 12)), 3, "coverage")
        ids = [it.id for it in inst.items]
        _, opt = bitmask_optimum(ids, inst.weights, inst.parents, inst.budget, inst.value)
        got = best_of_greedy_and_singleton(inst)
        assert inst.is_feasible(got)
        ratios.append(1.0 if opt <= 0 else inst.value(got) / opt)
    n = chk.numbers
    ok = chk.passed and chk.seconds < 60 and min(ratios) >= 0.5 and n["min_ratio"] >= 0.5 and n["mean_ratio"] >= 0.9
    verdict(2, ok, f"min={n['min_ratio']:.4f} mean={n['mean_ratio']:.4f} over 500; bitmask route min={min(ratios):.4f}; {chk.seconds:.1f}s")


# ------------------------------------------------------------------ 3


def test_criterion_03_lru_optimality():
    chk = verify.check_lru_optimality(100)
    # second route: with equal weights and values the optimum keeps the k
    # largest decayed values, summed here with numpy
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        n, w, rate = int(rng.integers(3, 15)), int(rng.integers(1, 9)), float(rng.uniform(0.01, 0.3))
        store = MemoryStore(10**9)
        ids = []
        for j in range(n):
            store.advance(j)
            ids.append(store.insert_node(NodeDraft(f"entry {j}", NodeType.SEMANTIC, weight=w)))
        now = n
        for _ in range(int(rng.integers(0, 3 * n))):
            now += int(rng.integers(0, 3))
            store.advance(now)
            store.touch([ids[int(rng.integers(n))]])
        keep = int(rng.integers(1, n))
        decayed = {i: math.exp(-rate * (store.now - store.nodes[i].last_access)) for i in ids}
        best = float(np.sort(np.array(list(decayed.values())))[::-1][:keep].sum())
        apply_lru(store, keep * w)
        got = sum(decayed[i] for i in store.nodes)
        worst = max(worst, abs(got - best))
    ok = chk.passed and chk.seconds < 30 and worst <= 1e-9
    verdict(3, ok, f"mismatches={chk.numbers['mismatches']}/100; top-k route max gap={worst:.2e}; {chk.seconds:.1f}s")


# ------------------------------------------------------------------ 4, 7, 10


@pytest.fixture(scope="module")
def fuzz():
    return verify.fuzz_policy_triggers(10_000)


def _recheck_triggers(n_triggers, seed):
    """Small independent replay: deep copies, raw-edge feasibility, own utility sums."""
    rng = np.random.default_rng(seed)
    cfg = PolicyConfig(reflection=ReflectionConfig(cluster_similarity_threshold=0.75, temporal_gap_limit=60))
    bad = []
    done = 0
    while done < n_triggers:
        fz = _FuzzStore(rng)
        fz.grow(int(rng.integers(12, 40)))
        for _ in range(6):
            policy = POLICY_ORDER[done % len(POLICY_ORDER)]
            store = fz.store
            fz.clock += 1
            store.advance(fz.clock)
            before = copy.deepcopy(store)
            values = dict(fz.values)
            L = max(values[i] / before.nodes[i].weight for i in before.nodes)
            budget = max(1, int(before.total_weight * rng.uniform(0.3, 0.95)))
            raised = False
            try:
                out = apply_policy(policy, store, budget, cfg, rng=rng)
            except BudgetUnsatisfiable as exc:
                out, raised = exc.outcome, True
            for members, sid, _d in out.summarized:
                if sid in store.nodes:
                    values[sid] = min(L * store.nodes[sid].weight, sum(values[m] for m in members))
            fz.values = values
            live = set(store.nodes)
            drop = sum(values[i] for i in before.nodes) - sum(values[i] for i in live)
            freed = before.total_weight - sum(store.nodes[i].weight for i in live)
            if drop > L * freed + 1e-9:
                bad.append(("lipschitz", done))
            for nid in live:
                p = store.nodes[nid].structural_parent
                if p is not None and p not in live:
                    bad.append(("closure", done))
            covers = {}
            for e in store.edges:
                if e.relation is Relation.DERIVES_FROM and e.src in live:
                    covers.setdefault(e.dst, set()).add(e.src)
            for nid, node in before.nodes.items():
                if not node.is_active_task:
                    continue
                if nid not in live:
                    bad.append(("task evicted", done))
                    continue
                for e in before.edges:
                    if e.src == nid and e.relation is Relation.REQUIRES and e.dst in before.nodes:
                        if e.dst not in live and not covers.get(e.dst):
                            bad.append(("prerequisite", done))
            if not raised and store.total_weight > budget:
                bad.append(("budget", done))
            done += 1
            if done >= n_triggers:
                break
            fz.grow(int(rng.integers(1, 8)))
    return bad


def test_criterion_04_weight_lipschitz(fuzz):
    n = fuzz.numbers
    bad = [b for b in _recheck_triggers(300, 404) if b[0] == "lipschitz"]
    ok = n["triggers"] == 10_000 and n["lipschitz_violations"] == 0 and fuzz.seconds < 120 and not bad
    verdict(4, ok, f"triggers={n['triggers']} violations={n['lipschitz_violations']} min_slack={n['min_lipschitz_slack']:.3g}; replay violations={len(bad)}; {fuzz.seconds:.1f}s")


def test_criterion_05_budget_monotonicity():
    chk = verify.check_budget_monotonicity(200)
    # second route: bitmask optimum on a fresh family over the same ladder
    rng = np.random.default_rng(505)
    ladder = (10, 20, 40, 80)
    bad = 0
    for k in range(60):
        inst = random_forest_instance(rng, int(rng.integers(4, 11)), 3, "coverage" if k % 2 else "modular")
        ids = [it.id for it in inst.items]
        L = inst.lipschitz()
        opts = [bitmask_optimum(ids, inst.weights, inst.parents, b, inst.value)[1] for b in ladder]
        for (b0, u0), (b1, u1) in zip(zip(ladder, opts), zip(ladder[1:], opts[1:])):
            if u1 < u0 - 1e-9 or u1 - u0 > L * (b1 - b0) + 1e-9:
                bad += 1
    n = chk.numbers
    ok = chk.passed and chk.seconds < 60 and bad == 0
    verdict(5, ok, f"monotonicity_violations={n['monotonicity_violations']} lipschitz_violations={n['lipschitz_violations']} over 200; bitmask route violations={bad}; {chk.seconds:.1f}s")


def _softmax_ratio(a, b, outcomes, eps, lam):
    """Max log-ratio of the two selection distributions from scratch."""
    dq = max(modular_delta_q(a.utility, a.weights, lam), modular_delta_q(b.utility, b.weights, lam))

    def logp(inst):
        q = np.array([inst.utility.evaluate(S) - lam * sum(inst.sensitivities[i] for i in S) for S in outcomes])
        z = eps * q / (2 * dq)
        return z - (z.max() + np.log(np.exp(z - z.max()).sum()))

    return float(np.abs(logp(a) - logp(b)).max())


def test_criterion_06_differential_privacy():
    t0 = time.perf_counter()
    ratio = verify.check_dp_ratio(40)
    sampling = verify.check_dp_sampling(100_000)
    neg = verify.check_dp_negative_control()
    worst, disagree = 0.0, 0.0
    for a, b, outcomes in verify.dp_corpus(40):
        r_lib = dp_ratio_audit(a, b, outcomes, DpConfig(epsilon=1.0), 0.3)
        r_np = _softmax_ratio(a, b, outcomes, 1.0, 0.3)
        worst = max(worst, r_np)
        disagree = max(disagree, abs(r_lib - r_np))
    secs = time.perf_counter() - t0
    r = ratio.numbers
    ok = (
        ratio.passed
        and r["violations"] == 0
        and worst <= 1.0 + 1e-9
        and disagree <= 1e-9
        and sampling.numbers["total_variation"] <= 0.01
        and neg.passed
        and neg.numbers["ratio_understated"] > 1.0
        and secs < 90
    )
    verdict(
        6,
        ok,
        f"audits={r['audits']} max ratio/eps={r['max_ratio_over_epsilon']:.4f}; numpy route max={worst:.4f} at eps=1; "
        f"TV={sampling.numbers['total_variation']:.4f}; negative control {neg.numbers['ratio_understated']:.3f} > 1; {secs:.1f}s",
    )


def test_criterion_07_feasibility(fuzz):
    n = fuzz.numbers
    bad = [b for b in _recheck_triggers(300, 707) if b[0] != "lipschitz"]
    ok = n["triggers"] == 10_000 and n["feasibility_violations"] == 0 and n["budget_violations"] == 0 and not bad
    per = {p: v["unsatisfiable"] for p, v in n["per_policy"].items()}
    verdict(7, ok, f"feasibility_violations={n['feasibility_violations']} budget_violations={n['budget_violations']}; replay problems={len(bad)}; unsatisfiable={per}")


def test_criterion_08_hybrid_termination():
    chk = verify.check_hybrid_termination(1000)
    n = chk.numbers
    ok = chk.passed and n["max_phases"] <= 4 and n["restored"] + n["unsatisfiable"] == 1000 and chk.seconds < 30
    verdict(8, ok, f"restored={n['restored']} unsatisfiable={n['unsatisfiable']} max_phases={n['max_phases']}; {chk.seconds:.1f}s")


def test_criterion_09_distortion_bound():
    chk = verify.check_distortion_bound(200)
    n = chk.numbers
    ok = chk.passed and n["clusters"] >= 200 and chk.seconds < 30
    verdict(9, ok, f"clusters={n['clusters']} violations={n['violations']} max_excess={n['max_excess']:.3g}; {chk.seconds:.1f}s")


def test_criterion_10_complexity_counters(fuzz):
    n = fuzz.numbers
    ok = n["triggers"] == 10_000 and n["counter_violations"] == 0
    verdict(10, ok, f"counter_violations={n['counter_violations']} over {n['triggers']} triggers")


# ------------------------------------------------------------------ 11, 12


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    """The default grid twice: once in process, once through the CLI in a
    fresh interpreter with a different hash seed."""
    first = tmp_path_factory.mktemp("sweep_first")
    t0 = time.perf_counter()
    results = run_sweep(DEFAULT_BUDGETS, list(POLICY_ORDER), DEFAULT_SEEDS, list(SCENARIO_ORDER), out=first)
    t_first = time.perf_counter() - t0
    second = tmp_path_factory.mktemp("sweep_second")
    env = dict(os.environ, PYTHONHASHSEED="12345")
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "marsmem", "sweep", "--out", str(second), "--bootstrap", "200"],
                          env=env, capture_output=True, text=True)
    t_second = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return [(first, results, t_first), (second, None, t_second)]


def test_criterion_11_determinism(sweeps):
    (ra, res_a, ta), (rb, _, tb) = sweeps
    files_a = sorted(p.relative_to(ra) for p in ra.rglob("metrics.json"))
    files_b = sorted(p.relative_to(rb) for p in rb.rglob("metrics.json"))
    differ = [p for p in files_a if hashlib.sha256((ra / p).read_bytes()).digest() != hashlib.sha256((rb / p).read_bytes()).digest()]
    errors = [r.key for r in res_a if r.error]
    expected = len(POLICY_ORDER) * len(DEFAULT_BUDGETS) * len(DEFAULT_SEEDS) * len(SCENARIO_ORDER)
    ok = files_a == files_b and len(files_a) == expected and not differ and not errors and max(ta, tb) < 1800
    verdict(11, ok, f"metrics files={len(files_a)} (300 cells x 5 scenarios) differing={len(differ)} errors={len(errors)}; sweep {ta:.0f}s / {tb:.0f}s")


def test_criterion_12_budget_direction(sweeps):
    _, results, _ = sweeps[0]
    report = sweep_report(results, n_resamples=200)
    breaks = []
    for policy, by_budget in report["trigger_counts"].items():
        budgets = sorted(by_budget, key=int)
        for seed in by_budget[budgets[0]]:
            seq = [by_budget[b][seed] for b in budgets]
            if any(y > x + 1 for x, y in zip(seq, seq[1:])):
                breaks.append((policy, seed, seq))
    # second route: sum triggers straight from the cell results
    direct = {}
    for r in results:
        k = (r.key.policy, r.key.budget, r.key.seed)
        direct[k] = direct.get(k, 0) + r.metrics["trigger_stats"]["triggers"]
    direct_breaks = 0
    for p in {k[0] for k in direct}:
        for s in DEFAULT_SEEDS:
            seq = [direct[(p, b, s)] for b in DEFAULT_BUDGETS]
            direct_breaks += any(y > x + 1 for x, y in zip(seq, seq[1:]))
    tau = report["rank_agreement"]["kendall_tau"]
    ok = not breaks and direct_breaks == 0 and tau >= 0.6
    where = sorted({b[0] for b in breaks})
    verdict(12, ok, f"non-monotone seed rows={len(breaks)} (direct route {direct_breaks}) in {where or 'none'}; kendall_tau(2K,32K)={tau:.3f}")


# ------------------------------------------------------------------ 13


def _run(turns, truth=None, events=()):
    return {"turns": list(turns), "script": {"ground_truth": truth or {}, "events": list(events)}, "trigger_stats": {}}


def test_criterion_13_metric_pipeline():
    checks = {}
    flip = ["tea", "coffee", "tea", "coffee", "tea"]
    turns = [{"turn": t, "actor": "a", "scored": True, **({"claims": [("bob", "preference", flip[t])]} if t < 5 else {})} for t in range(20)]
    checks["nc four contradictions"] = narrative_coherence(_run(turns)).value == pytest.approx(0.9)
    goals = [{"id": "g1", "weight": 2, "owner": "a"}, {"id": "g2", "weight": 1, "owner": "a"}, {"id": "g3", "weight": 1, "owner": "a"}]
    done = [{"turn": k, "actor": "a", "goal_transition": {"goal": g, "status": "completed"}} for k, g in enumerate(("g1", "g2"))]
    checks["gcr weighted"] = goal_completion(_run(done, {"goals": goals})).value == pytest.approx(0.75)
    entities = [{"name": f"e{k}", "role": "chef"} for k in range(16)]
    events = [{"turn": 0, "actor": "a", "kind": "intro", "payload": {"entity": f"e{k}"}} for k in range(16)]
    events += [{"turn": 1 + k, "actor": "a", "kind": "query", "payload": {"entity": f"e{k}", "attribute": "role"}} for k in range(16)]
    refs = [{"turn": 1 + k, "actor": "a", "kind": "query", "claims": [(f"e{k}", "role", "chef" if k < 8 else "pilot")]} for k in range(10)]
    sr = social_recall(_run(refs, {"entities": entities}, events))
    checks["sra 8 of 10"] = sr.sra == pytest.approx(0.8) and sr.normalized == pytest.approx(0.5)
    pv = privacy_metrics(_run([{"turn": t, "leaked_tokens": 1 if t in (2, 7) else 0} for t in range(12)], {"privacy_opportunities": list(range(10))}))
    checks["pp two violations"] = pv.pp == pytest.approx(0.8)
    checks["ce"] = cost_efficiency_raw(0.6, 1.5) == pytest.approx(0.4)
    mm = minmax_rescale([3.0, 1.0, 2.0, 5.0])
    checks["minmax"] = mm[1] == 0.0 and mm[3] == 1.0 and mm[2] == pytest.approx(0.25)
    checks["hedges"] = hedges_g([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]) == pytest.approx(-0.8)
    checks["cliffs"] = cliffs_delta([1, 2, 3], [4, 5, 6]) == -1.0
    checks["kendall"] = kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    zero = social_recall(_run([], {"entities": entities}, events[:21]))
    checks["zero-reference flag"] = zero.vacuous and zero.sra == 1.0 and zero.normalized == 0.0
    flags = cell_metrics(_run([{"turn": 0, "actor": "a", "tokens": 3}], {"turns": 1}))["vacuous"]
    checks["zero-opportunity flag"] = flags["zero_opportunities"] and flags["zero_references"]
    failed = [k for k, v in checks.items() if not v]
    verdict(13, not failed, f"{len(checks) - len(failed)}/{len(checks)} examples" + (f"; failed: {failed}" if failed else ""))
