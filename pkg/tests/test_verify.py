import numpy as np
import pytest

from oracles import feasible_after_removal
from marsmem.verify import (
    DEFAULT_COUNTS,
    adversarial_store,
    check_greedy_ratio,
    fuzz_policy_triggers,
    independent_feasibility,
    run_checks,
)


def test_instances_cap_and_validation():
    checks = run_checks(instances=2)
    assert [c.name for c in checks] == [
        "greedy_half_approximation",
        "lru_optimality",
        "policy_fuzz",
        "budget_monotonicity",
        "dp_ratio_exhaustive",
        "dp_empirical_distribution",
        "hybrid_termination",
        "distortion_bound",
    ]
    assert checks[0].numbers["instances"] == 2
    assert checks[2].numbers["triggers"] == 40
    assert all(c.passed for c in checks)
    with pytest.raises(ValueError):
        run_checks(instances=0)


def test_default_corpus_sizes():
    assert DEFAULT_COUNTS["greedy"] == 500 and DEFAULT_COUNTS["fuzz_triggers"] == 10_000
    assert DEFAULT_COUNTS["dp_draws"] == 100_000 and DEFAULT_COUNTS["hybrid"] == 1000


def test_check_line_format():
    c = check_greedy_ratio(5)
    assert c.line().startswith("PASS  greedy_half_approximation: instances=5")
    assert set(c.as_dict()) == {"name", "passed", "expected_failure", "seconds", "numbers"}


def test_fuzz_is_seed_deterministic():
    a = fuzz_policy_triggers(60, seed=3).numbers
    b = fuzz_policy_triggers(60, seed=3).numbers
    assert a == b


@pytest.mark.parametrize("kind", ["chain", "summaries", "pinned", "mixed"])
def test_feasibility_checker_agrees_with_oracle(kind):
    # the two independent feasibility routes agree on fresh adversarial stores
    rng = np.random.default_rng(9)
    store, _ = adversarial_store(rng, kind)
    assert independent_feasibility(store, {}) == []
    assert feasible_after_removal(store, set())
