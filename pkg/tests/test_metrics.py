import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marsmem.errors import ComponentOutOfRange
from marsmem.metrics import (
    MetricWeights,
    cell_metrics,
    cliffs_delta,
    composite,
    cost_efficiency_raw,
    goal_completion,
    hedges_g,
    hierarchical_bootstrap,
    holm,
    kendall_tau,
    minmax_rescale,
    narrative_coherence,
    privacy_metrics,
    social_recall,
    wilcoxon_p,
)


def run(turns, truth=None, events=(), stats=None):
    return {"turns": list(turns), "script": {"ground_truth": truth or {}, "events": list(events)}, "trigger_stats": stats or {}}


def scored(t, **kw):
    return {"turn": t, "actor": "a", "scored": True, **kw}


# ------------------------------------------------------------------ coherence


def test_clean_run_is_coherent():
    assert narrative_coherence(run([scored(t) for t in range(5)])).value == 1.0


def test_saturated_run_scores_zero():
    both = [("bob", "preference", "tea"), ("bob", "preference", "coffee")]
    turns = [scored(t, mentions=["zed"], claims=both) for t in range(6)]
    assert narrative_coherence(run(turns)).value == 0.0


def test_four_contradictions_in_twenty_turns():
    flip = ["tea", "coffee", "tea", "coffee", "tea"]
    turns = [scored(t, claims=[("bob", "preference", flip[t])]) if t < 5 else scored(t) for t in range(20)]
    assert narrative_coherence(run(turns)).value == pytest.approx(0.9)


def test_preference_update_is_not_a_contradiction():
    turns = [scored(0, claims=[("bob", "preference", "tea")]), scored(5, claims=[("bob", "preference", "coffee")])]
    events = [{"turn": 3, "actor": "a", "kind": "pref_update", "payload": {"entity": "bob"}}]
    assert narrative_coherence(run(turns, events=events)).value == 1.0


def test_no_scored_turns_is_vacuous():
    s = narrative_coherence(run([{"turn": 0, "actor": "a"}]))
    assert s.value == 1.0 and s.vacuous


# ------------------------------------------------------------------ goals

GOALS = [{"id": "g1", "weight": 2, "owner": "a"}, {"id": "g2", "weight": 1, "owner": "a"}, {"id": "g3", "weight": 1, "owner": "a"}]


def completed(*gids):
    return [{"turn": k, "actor": "a", "goal_transition": {"goal": g, "status": "completed"}} for k, g in enumerate(gids)]


def test_goal_completion_examples():
    assert goal_completion(run(completed("g1", "g2", "g3"), {"goals": GOALS})).value == 1.0
    assert goal_completion(run([], {"goals": GOALS})).value == 0.0
    assert goal_completion(run(completed("g1", "g2"), {"goals": GOALS})).value == pytest.approx(0.75)


def test_no_goals_is_vacuous():
    s = goal_completion(run([]))
    assert s.value == 1.0 and s.vacuous


# ------------------------------------------------------------------ social recall


def recall_run(made, correct, eligible):
    entities = [{"name": f"e{k}", "role": "chef"} for k in range(20)]
    events = [{"turn": 0, "actor": "a", "kind": "intro", "payload": {"entity": f"e{k}"}} for k in range(20)]
    events += [{"turn": 1 + k, "actor": "a", "kind": "query", "payload": {"entity": f"e{k}", "attribute": "role"}} for k in range(eligible)]
    turns = []
    for k in range(made):
        role = "chef" if k < correct else "pilot"
        turns.append({"turn": 1 + k, "actor": "a", "kind": "query", "claims": [(f"e{k}", "role", role)]})
    return run(turns, {"entities": entities}, events)


def test_all_references_correct():
    assert social_recall(recall_run(10, 10, 16)).sra == 1.0


def test_zero_references_vacuous():
    sr = social_recall(recall_run(0, 0, 5))
    assert sr.sra == 1.0 and sr.vacuous and sr.normalized == 0.0 and sr.eligible == 5


def test_eight_of_ten_with_sixteen_eligible():
    sr = social_recall(recall_run(10, 8, 16))
    assert sr.sra == pytest.approx(0.8) and sr.normalized == pytest.approx(0.5)


@given(st.integers(0, 15), st.data())
def test_sra_dominates_normalized(made, data):
    correct = data.draw(st.integers(0, made))
    eligible = data.draw(st.integers(max(made, 1), 20))
    sr = social_recall(recall_run(made, correct, eligible))
    assert sr.sra >= sr.normalized - 1e-12


# ------------------------------------------------------------------ privacy


def test_no_emissions_no_violations():
    pv = privacy_metrics(run([{"turn": t} for t in range(4)], {"privacy_opportunities": [1, 2]}))
    assert (pv.leakage_rate, pv.pp) == (0.0, 1.0)


def test_leakage_rate():
    turns = [{"turn": t, "leaked_tokens": 1 if t < 3 else 0} for t in range(6)]
    assert privacy_metrics(run(turns)).leakage_rate == pytest.approx(0.5)


def test_preservation_score():
    turns = [{"turn": t, "leaked_tokens": 1 if t in (2, 7) else 0} for t in range(12)]
    pv = privacy_metrics(run(turns, {"privacy_opportunities": list(range(10))}))
    assert pv.pp == pytest.approx(0.8) and pv.violations == 2 and pv.opportunities == 10


def test_violation_kinds_counted_once_per_turn():
    turns = [{"turn": 0, "leaked_tokens": 2, "retained_past_ttl": 1}, {"turn": 1, "erased_present": 1}]
    pv = privacy_metrics(run(turns, {"privacy_opportunities": [0, 1]}))
    assert pv.violations == 2 and pv.kinds == {"disclosure": 1, "retention_past_ttl": 1, "unhonored_erasure": 1}


# ------------------------------------------------------------------ cost efficiency


def test_ce_examples():
    assert cost_efficiency_raw(0.6, 1.5) == pytest.approx(0.4)
    assert cost_efficiency_raw(0.5, 1.0) / cost_efficiency_raw(0.5, 2.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cost_efficiency_raw(0.5, 0.0)


def test_minmax_endpoints():
    out = minmax_rescale([3.0, 1.0, 2.0, 5.0])
    assert out[1] == 0.0 and out[3] == 1.0 and out[2] == pytest.approx(0.25)
    assert minmax_rescale([2.0, 2.0]) == [1.0, 1.0]


# ------------------------------------------------------------------ composite


def test_composite_published_rows():
    random_drop = dict(nc=0.667, gcr=0.078, sra=1.000, pp=0.722, ce=0.935)
    lru = dict(nc=0.501, gcr=0.058, sra=1.000, pp=0.780, ce=0.887)
    assert composite(random_drop) == pytest.approx(0.6348, abs=1e-4)
    assert round(composite(random_drop), 3) == 0.635
    assert composite(lru) == pytest.approx(0.5898, abs=1e-4)
    assert round(composite(lru), 3) == 0.590


def test_composite_all_ones():
    assert composite(dict.fromkeys(("nc", "gcr", "sra", "pp", "ce"), 1.0)) == pytest.approx(1.0)


def test_composite_rejects_out_of_range():
    with pytest.raises(ComponentOutOfRange):
        composite(dict(nc=1.2, gcr=0, sra=0, pp=0, ce=0))
    with pytest.raises(ComponentOutOfRange):
        composite(dict(nc=math.nan, gcr=0, sra=0, pp=0, ce=0))


unit = st.floats(0, 1)


@given(st.lists(unit, min_size=5, max_size=5), st.integers(0, 4), unit)
def test_composite_monotone(vals, k, bump):
    keys = ("nc", "gcr", "sra", "pp", "ce")
    lo = dict(zip(keys, vals))
    hi = dict(lo)
    hi[keys[k]] = max(lo[keys[k]], bump)
    assert composite(hi) >= composite(lo) - 1e-12


def test_weights_validation():
    with pytest.raises(ValueError):
        MetricWeights(nc=0.5)
    with pytest.raises(ValueError):
        MetricWeights(omega_nc=0.5)


def test_cell_metrics_surfaces_vacuous_flags():
    m = cell_metrics(run([{"turn": 0, "actor": "a", "tokens": 3}], {"turns": 1}))
    assert m["vacuous"] == {"no_goals": True, "zero_references": True, "zero_eligible": True, "zero_opportunities": True, "no_scored_turns": True}
    assert m["cost"] == pytest.approx(3.0)


# ------------------------------------------------------------------ statistics


def test_identical_samples_null_effects():
    a = [0.3, 0.5, 0.7, 0.2]
    assert wilcoxon_p(a, a) == 1.0
    assert hedges_g(a, a) == 0.0
    assert cliffs_delta(a, a) == 0.0


def test_complete_dominance():
    assert cliffs_delta([1, 2, 3], [4, 5, 6]) == -1.0


def test_hedges_recovers_known_shift():
    rng = np.random.default_rng(41)
    est = [hedges_g(rng.normal(0.8, 1, 30), rng.normal(0, 1, 30)) for _ in range(100)]
    assert abs(np.mean(est) - 0.8) <= 0.25


def test_hedges_hand_value():
    a, b = [1.0, 2.0, 3.0], [2.0, 3.0, 4.0]
    # pooled sd 1, d = -1, correction 1 - 3/(4*6-9)
    assert hedges_g(a, b) == pytest.approx(-1.0 * (1 - 3 / 15))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_holm_properties(ps):
    adj = holm(ps)
    assert all(x >= p - 1e-15 for x, p in zip(adj, ps))
    order = sorted(range(len(ps)), key=lambda i: (ps[i], i))
    assert all(adj[order[j]] <= adj[order[j + 1]] for j in range(len(ps) - 1))
    assert all(x <= 1.0 for x in adj)


@given(st.dictionaries(st.integers(0, 9), st.lists(st.floats(-5, 5), min_size=1, max_size=5), min_size=1, max_size=5))
def test_bootstrap_interval_contains_point(groups):
    point, lo, hi = hierarchical_bootstrap(groups, n_resamples=50, seed=1)
    assert lo <= point <= hi


def test_kendall_tau_examples():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert kendall_tau([1, 1, 1], [1, 2, 3]) == 0.0
