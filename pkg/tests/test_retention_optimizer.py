import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bitmask_optimum
from marsmem.errors import TooLarge
from marsmem.retention_optimizer import (
    RetentionInstance,
    RetentionItem,
    best_of_greedy_and_singleton,
    brute_force_optimum,
    greedy_density,
    online_fifo,
    online_greedy_with_eviction,
    verify_budget_monotonicity,
)
from marsmem.scoring import Modular
from marsmem.verify import random_forest_instance


def modular(spec, budget):
    """spec: list of (id, weight, value, parent)."""
    return RetentionInstance.modular([RetentionItem(i, w, v, parent=p) for i, w, v, p in spec], budget)


def test_budget_covers_everything():
    inst = modular([("a", 3, 1.0, None), ("b", 4, 2.0, "a"), ("c", 5, 0.5, None)], 100)
    ids, v = brute_force_optimum(inst)
    assert ids == {"a", "b", "c"} and v == pytest.approx(3.5)


def test_zero_budget_is_empty():
    inst = modular([("a", 3, 1.0, None), ("b", 4, 2.0, None)], 0)
    assert brute_force_optimum(inst) == (frozenset(), 0.0)


def test_too_large_rejected():
    inst = modular([(f"x{j}", 1, 1.0, None) for j in range(21)], 5)
    with pytest.raises(TooLarge):
        brute_force_optimum(inst)


def test_matches_bitmask_enumerator():
    rng = np.random.default_rng(21)
    for _ in range(40):
        inst = random_forest_instance(rng, 10, kind="modular")
        ids = [it.id for it in inst.items]
        got, v = brute_force_optimum(inst)
        ref, rv = bitmask_optimum(ids, inst.weights, inst.parents, inst.budget, inst.value)
        assert v == pytest.approx(rv)
        assert got == ref
        assert inst.is_feasible(got)


def test_coverage_matches_bitmask_enumerator():
    rng = np.random.default_rng(22)
    for _ in range(20):
        inst = random_forest_instance(rng, 9, kind="coverage")
        ids = [it.id for it in inst.items]
        got, v = brute_force_optimum(inst)
        _, rv = bitmask_optimum(ids, inst.weights, inst.parents, inst.budget, inst.value)
        assert v == pytest.approx(rv)


def test_greedy_single_node():
    assert greedy_density(modular([("a", 3, 1.0, None)], 5)) == {"a"}


def test_greedy_picks_denser_node():
    inst = modular([("a", 4, 12.0, None), ("b", 4, 4.0, None)], 5)
    assert greedy_density(inst) == {"a"}


def test_greedy_respects_accessibility():
    # the dense child is only reachable through its parent
    inst = modular([("p", 5, 1.0, None), ("c", 1, 10.0, "p"), ("q", 5, 3.0, None)], 6)
    g = greedy_density(inst)
    assert inst.is_feasible(g)


def test_heavy_item_singleton_wins():
    inst = modular([("big", 10, 100.0, None), ("s1", 1, 11.0, None), ("s2", 1, 11.0, None)], 10)
    assert greedy_density(inst) == {"s1", "s2"}
    assert best_of_greedy_and_singleton(inst) == {"big"}
    assert brute_force_optimum(inst)[0] == {"big"}


def test_best_of_keeps_optimal_greedy():
    inst = modular([("a", 2, 4.0, None), ("b", 2, 2.0, None)], 4)
    assert best_of_greedy_and_singleton(inst) == greedy_density(inst) == {"a", "b"}


def test_half_approximation_on_random_submodular():
    rng = np.random.default_rng(23)
    for _ in range(60):
        inst = random_forest_instance(rng, 10, kind="coverage")
        opt = brute_force_optimum(inst)[1]
        got = inst.value(best_of_greedy_and_singleton(inst))
        assert got >= 0.5 * opt - 1e-9


@settings(max_examples=40)
@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=10), st.integers(1, 5), st.integers(0, 40))
def test_equal_weights_greedy_is_optimal(values, w, budget):
    inst = modular([(f"i{j}", w, v, None) for j, v in enumerate(values)], budget)
    assert inst.value(greedy_density(inst)) == pytest.approx(brute_force_optimum(inst)[1])


def test_json_round_trip():
    rng = np.random.default_rng(24)
    for kind in ("modular", "coverage"):
        inst = random_forest_instance(rng, 8, kind=kind)
        back = RetentionInstance.from_json(inst.to_json())
        assert back.to_json() == inst.to_json()
        ids = [it.id for it in inst.items][::2]
        assert back.value(ids) == inst.value(ids)


# ------------------------------------------------------------------ streaming


def items(n, w, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n):
        out.append(RetentionItem(f"s{j:02d}", w if w else int(rng.integers(1, 8)), float(rng.uniform(0.5, 5))))
    return out


def test_online_all_fit_no_regret():
    arr = items(8, 2)
    u = Modular({it.id: it.value for it in arr})
    tr = online_greedy_with_eviction(arr, 100, u)
    assert tr.evictions == 0 and all(r == 0 for r in tr.regret_series)


def test_online_equal_density_capacity():
    arr = [RetentionItem(f"e{j}", 3, 3.0) for j in range(10)]
    u = Modular({it.id: it.value for it in arr})
    tr = online_greedy_with_eviction(arr, 14, u)
    assert len(tr.retained_trajectory[-1]) == 14 // 3


def test_online_regret_nonnegative_and_beats_fifo():
    arr = items(50, None, seed=5)
    u = Modular({it.id: it.value for it in arr})
    g = online_greedy_with_eviction(arr, 20, u)
    f = online_fifo(arr, 20, u)
    assert all(r >= 0 for r, ex in zip(g.regret_series, g.exact) if ex)
    assert g.exact[:16] == [True] * 16 and not any(g.exact[16:])
    assert g.mean_regret <= f.mean_regret


# ------------------------------------------------------------------ budget ladder


def test_ladder_equal_budgets():
    rng = np.random.default_rng(25)
    inst = random_forest_instance(rng, 8, kind="modular")
    rep = verify_budget_monotonicity([inst], [15, 15])
    assert rep["instances"][0]["optimum"][0] == rep["instances"][0]["optimum"][1]


def test_ladder_must_ascend():
    rng = np.random.default_rng(25)
    with pytest.raises(ValueError):
        verify_budget_monotonicity([random_forest_instance(rng, 5)], [20, 10])


def test_w_max_step_bound_on_random_family():
    rng = np.random.default_rng(26)
    for _ in range(200):
        inst = random_forest_instance(rng, 8, kind="modular")
        wmax = max(inst.weights.values())
        b1 = inst.budget
        d = brute_force_optimum(inst.with_budget(b1 + wmax))[1] - brute_force_optimum(inst.with_budget(b1))[1]
        assert 0 <= d <= inst.lipschitz() * wmax + 1e-9


def test_ladder_monotone_on_random_family():
    rng = np.random.default_rng(27)
    fam = [random_forest_instance(rng, 10, kind=k) for k in ("modular", "coverage") * 10]
    rep = verify_budget_monotonicity(fam, [10, 20, 40, 80])
    assert rep["monotonicity_violations"] == []
    for row in rep["instances"]:
        assert all(b >= a for a, b in itertools.pairwise(row["optimum"]))


def test_ladder_reports_integer_knapsack_step():
    # three w=6 items: budget 10 holds one, budget 20 holds three
    inst = modular([(f"k{j}", 6, 6.0, None) for j in range(3)], 10)
    rep = verify_budget_monotonicity([inst], [10, 20])
    assert rep["monotonicity_violations"] == []
    assert len(rep["lipschitz_violations"]) == 1
    v = rep["lipschitz_violations"][0]
    assert v["delta"] == pytest.approx(12.0) and v["bound"] == pytest.approx(10.0)
    assert not rep["ok"]
