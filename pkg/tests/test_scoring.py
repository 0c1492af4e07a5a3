import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marsmem.mem_graph import MemoryStore
from marsmem.schema import NodeDraft, NodeType
from marsmem.scoring import (
    CoverageSubmodular,
    FeatureVector,
    MeanEmbeddingProbe,
    Modular,
    RecencyDecay,
    ScoringConfig,
    compute_features,
    density,
    density_value,
    importance,
    importance_value,
    rebalance_type_budgets,
    recency,
    utility_proxy,
)
from marsmem.text import embed

ZERO_THETA = {t: (0,) * 6 for t in NodeType}


def cfg_with_theta(theta):
    return ScoringConfig(type_weights={t: theta for t in NodeType})


def test_recency_at_age_zero():
    assert recency(0, 0.05) == 1.0


def test_recency_hand_value():
    assert recency(10, 0.1) == pytest.approx(math.exp(-1))
    assert recency(10, 0.1) == pytest.approx(0.3679, abs=1e-4)


def test_features_on_fresh_node():
    s = MemoryStore(100)
    nid = s.insert_node(NodeDraft("alpha beta", NodeType.SEMANTIC, sensitivity=0.0, weight=2))
    f = compute_features(s.nodes[nid], s)
    assert f.recency == 1.0
    assert f.novelty == 1.0


def test_duplicate_has_zero_novelty():
    s = MemoryStore(100)
    s.insert_node(NodeDraft("same words here", NodeType.SEMANTIC, sensitivity=0.0, weight=2))
    b = s.insert_node(NodeDraft("same words here", NodeType.SEMANTIC, sensitivity=0.0, weight=2))
    assert compute_features(s.nodes[b], s).novelty == pytest.approx(0.0, abs=1e-12)


def test_goal_similarity_is_cosine():
    s = MemoryStore(100)
    nid = s.insert_node(NodeDraft("garden tulip", NodeType.SEMANTIC, sensitivity=0.0, weight=2))
    g = embed("garden tulip")
    assert compute_features(s.nodes[nid], s, g).goal_similarity == pytest.approx(1.0)


def test_utility_zero_theta():
    cfg = ScoringConfig(type_weights=ZERO_THETA)
    assert utility_proxy(NodeType.EPISODIC, FeatureVector(1, 1, 1, 1, 1, 1), cfg) == 0.0


def test_utility_single_axis():
    cfg = cfg_with_theta((1, 0, 0, 0, 0, 0))
    assert utility_proxy(NodeType.TASK, FeatureVector(0.5, 0.9, 0.9, 0.9, 0.9, 0.9), cfg) == 0.5


def test_utility_hand_dot_product():
    cfg = cfg_with_theta((0.3, 0.2, 0.2, 0.1, 0.1, 0.1))
    assert utility_proxy(NodeType.SEMANTIC, FeatureVector(1, 0.5, 0.2, 0.4, 0.6, 0), cfg) == pytest.approx(0.54)


def test_density_examples():
    assert density_value(0.5, 1.0, 2, 0.5) == 0.0
    assert density_value(0.8, 0.7, 4, 0.0) == pytest.approx(0.2)
    assert density_value(0.54, 0.5, 3, 0.3) == pytest.approx(0.13)


def test_density_uses_node_fields():
    s = MemoryStore(100)
    nid = s.insert_node(NodeDraft("x", NodeType.SEMANTIC, sensitivity=0.5, weight=3))
    cfg = ScoringConfig(type_weights={t: (0.3, 0.2, 0.2, 0.1, 0.1, 0.1) for t in NodeType}, lambda_priv=0.3)
    assert density(s.nodes[nid], FeatureVector(1, 0.5, 0.2, 0.4, 0.6, 0), cfg) == pytest.approx(0.13)


def test_importance_examples():
    zero = ScoringConfig(imp_alpha=0, imp_beta=0, imp_gamma=1e-12)
    assert importance_value(0.9, 1.0, 0.0, zero) == pytest.approx(0.0)
    only_type = ScoringConfig(imp_alpha=1, imp_beta=0, imp_gamma=0)
    assert importance_value(0.9, 0.3, 0.3, only_type) == 0.9
    mix = ScoringConfig(imp_alpha=0.5, imp_beta=0.3, imp_gamma=0.2)
    assert importance_value(0.8, 0.5, 0.25, mix) == pytest.approx(0.60)


def test_importance_of_task_node():
    s = MemoryStore(100)
    nid = s.insert_node(NodeDraft("goal", NodeType.TASK, sensitivity=0.0, weight=2))
    cfg = ScoringConfig(imp_alpha=1, imp_beta=0, imp_gamma=0)
    assert importance(s.nodes[nid], cfg, now=0) == pytest.approx(0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        ScoringConfig(imp_alpha=-1)
    with pytest.raises(ValueError):
        ScoringConfig(type_weights={NodeType.TASK: (1, 2)})


# ------------------------------------------------------------------ type budgets

SHARES = {t: 2000 for t in NodeType}


def test_rebalance_equal_gains_is_identity():
    assert rebalance_type_budgets(SHARES, {t: 0.3 for t in NodeType}, budget=8000) == SHARES


def test_rebalance_positive_gain_grows_share():
    out = rebalance_type_budgets(SHARES, {NodeType.SOCIAL: 1.0}, budget=8000, eta=1.0)
    assert out[NodeType.SOCIAL] > 2000


def test_rebalance_hand_example():
    gains = dict(zip(NodeType, (0.2, 0.1, 0, 0)))
    out = rebalance_type_budgets(SHARES, gains, budget=8000, eta=0.5)
    raw = np.array([math.exp(0.1), math.exp(0.05), 1, 1]) * 2000
    target = raw / raw.sum() * 8000
    assert [out[t] for t in NodeType] == [2127, 2023, 1925, 1925]
    assert np.all(np.abs(np.array([out[t] for t in NodeType]) - target) < 1)


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(400, 20_000))
def test_rebalance_sums_and_floor(gains, budget):
    out = rebalance_type_budgets({t: budget / 4 for t in NodeType}, dict(zip(NodeType, gains)), budget=budget, eta=1.0)
    assert sum(out.values()) == budget
    assert min(out.values()) >= math.floor(0.10 * budget) - 1


# ------------------------------------------------------------------ utility models


def test_modular_and_lipschitz():
    u = Modular({"a": 2.0, "b": 3.0})
    assert u.evaluate({"a", "b"}) == 5.0
    assert u.lipschitz({"a": 1, "b": 6}) == 2.0


def test_recency_decay_values():
    u = RecencyDecay({"a": 1.0}, {"a": 10}, 0.1)
    assert u.evaluate({"a"}) == pytest.approx(math.exp(-1))


@given(
    st.dictionaries(st.sampled_from("abcdef"), st.frozensets(st.integers(0, 6), min_size=1, max_size=3), min_size=2),
    st.data(),
)
def test_coverage_is_monotone_submodular(topics, data):
    u = CoverageSubmodular(topics)
    ids = sorted(topics)
    small = set(data.draw(st.lists(st.sampled_from(ids), unique=True)))
    big = small | set(data.draw(st.lists(st.sampled_from(ids), unique=True)))
    x = data.draw(st.sampled_from(ids))
    assert u.evaluate(big) >= u.evaluate(small)
    if x not in big:
        assert u.marginal(x, small) >= u.marginal(x, big) - 1e-12


def test_probe_is_kappa_lipschitz():
    rng = np.random.default_rng(0)
    p = MeanEmbeddingProbe(rng.normal(size=8), kappa=2.5)
    for _ in range(100):
        x, y = rng.normal(size=8), rng.normal(size=8)
        assert abs(p.evaluate(x) - p.evaluate(y)) <= 2.5 * np.linalg.norm(x - y) + 1e-12


def test_modular_sum_is_order_independent():
    u = Modular({"a": 1e16, "b": 1.0, "c": -1e16})
    assert u.evaluate({"a", "b", "c"}) == 1.0
    assert u.evaluate(["c", "b", "a"]) == u.evaluate(["a", "b", "c"])
