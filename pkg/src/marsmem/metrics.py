"""Run metrics, the composite score, sweep aggregation and paired statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats as sps

from .errors import ComponentOutOfRange, UnpairedCells

METRIC_NAMES = ("nc", "gcr", "sra", "pp", "ce")

PENALTY_DANGLING = 0.5
PENALTY_CONTRADICTION = 0.5
PENALTY_THREAD_BREAK = 0.25


@dataclass(frozen=True)
class MetricWeights:
    nc: float = 0.25
    gcr: float = 0.25
    sra: float = 0.20
    pp: float = 0.15
    ce: float = 0.15
    omega_nc: float = 0.4
    omega_gcr: float = 0.4
    omega_sra: float = 0.2
    cost_tokens: float = 1.0
    cost_policy_ops: float = 0.01
    cost_similarity: float = 0.05

    def __post_init__(self):
        if abs(self.nc + self.gcr + self.sra + self.pp + self.ce - 1.0) > 1e-9:
            raise ValueError("composite weights must sum to 1")
        if abs(self.omega_nc + self.omega_gcr + self.omega_sra - 1.0) > 1e-9:
            raise ValueError("performance weights must sum to 1")
        if min(self.nc, self.gcr, self.sra, self.pp, self.ce, self.omega_nc, self.omega_gcr, self.omega_sra) < 0:
            raise ValueError("weights must be non-negative")


DEFAULT_WEIGHTS = MetricWeights()


@dataclass
class Score:
    value: float
    vacuous: bool = False
    support: int = 0


def _turns(run):
    return run.turns if hasattr(run, "turns") else run["turns"]


def _truth(run) -> dict:
    script = run.script if hasattr(run, "script") else run["script"]
    if hasattr(script, "ground_truth"):
        return script.ground_truth
    return script.get("ground_truth", {})


def _events(run) -> list:
    script = run.script if hasattr(run, "script") else run["script"]
    if hasattr(script, "events"):
        return script.events
    return script.get("events", [])


def _dialogue_turns(run) -> int:
    truth = _truth(run)
    return int(truth.get("turns") or len(_turns(run)))


# ------------------------------------------------------------------ coherence


def turn_penalties(run) -> list[tuple[int, float, list]]:
    """(turn, capped penalty, reasons) for every scored turn."""
    truth = _truth(run)
    intros: dict[str, list] = {}
    for t, actor, person in truth.get("introductions", []):
        intros.setdefault(actor, []).append((t, person.lower()))
    updates: dict[tuple, list] = {}
    for ev in _events(run):
        if ev["kind"] == "pref_update":
            updates.setdefault((ev["actor"], ev["payload"]["entity"], "preference"), []).append(ev["turn"])
    emitted: dict[tuple, tuple] = {}
    out = []
    for rec in _turns(run):
        if not rec.get("scored"):
            continue
        t = rec["turn"]
        actor = rec.get("actor")
        reasons = []
        known = {p for (ti, p) in intros.get(actor, ()) if ti <= t}
        ctx_entities = set(rec.get("context_entities", ()))
        if any(m not in ctx_entities and m not in known for m in rec.get("mentions", ())):
            reasons.append("dangling")
        contradiction = False
        for entity, attr, value in rec.get("claims", ()):
            key = (actor, entity, attr)
            prev = emitted.get(key)
            if prev is not None and prev[0] != value:
                changed = any(prev[1] < u <= t for u in updates.get(key, ()))
                if not changed:
                    contradiction = True
            emitted[key] = (value, t)
        if contradiction:
            reasons.append("contradiction")
        qt = rec.get("query_thread")
        threads = rec.get("context_threads") or []
        if qt and threads and qt not in threads:
            reasons.append("thread_break")
        pen = 0.0
        for r in reasons:
            pen += {"dangling": PENALTY_DANGLING, "contradiction": PENALTY_CONTRADICTION, "thread_break": PENALTY_THREAD_BREAK}[r]
        out.append((t, min(1.0, pen), reasons))
    return out


def narrative_coherence(run) -> Score:
    pens = turn_penalties(run)
    if not pens:
        return Score(1.0, True, 0)
    return Score(sum(1.0 - p for _, p, _ in pens) / len(pens), False, len(pens))


# ------------------------------------------------------------------ goals


def goal_completion(run) -> Score:
    goals = _truth(run).get("goals", [])
    if not goals:
        return Score(1.0, True, 0)
    done = set()
    for rec in _turns(run):
        tr = rec.get("goal_transition")
        if tr and tr.get("status") == "completed":
            done.add(tr["goal"])
    total = sum(g["weight"] for g in goals)
    got = sum(g["weight"] for g in goals if g["id"] in done)
    return Score(got / total, False, len(goals))


# ------------------------------------------------------------------ social recall


def _truth_value(truth: dict, entity: str, attr: str, turn: int):
    if attr == "preference":
        timeline = truth.get("preferences", {}).get(entity, [])
        value = None
        for t, v in timeline:
            if t <= turn:
                value = v
        return value
    if attr == "role":
        for e in truth.get("entities", []):
            if e["name"] == entity:
                return e["role"]
    return None


def _eligible_turns(run) -> set:
    """Query turns where the actor had been told the asked-about attribute."""
    told: dict[tuple, int] = {}
    out = set()
    for ev in _events(run):
        p = ev.get("payload", {})
        if ev["kind"] == "intro":
            told.setdefault((ev["actor"], p["entity"], "role"), ev["turn"])
        elif ev["kind"] in ("preference", "pref_update"):
            told.setdefault((ev["actor"], p["entity"], "preference"), ev["turn"])
        elif ev["kind"] == "query":
            if (ev["actor"], p["entity"], p["attribute"]) in told:
                out.add(ev["turn"])
    return out


@dataclass
class SocialRecall:
    sra: float
    normalized: float
    made: int
    correct: int
    eligible: int
    vacuous: bool
    vacuous_normalized: bool = False


def social_recall(run) -> SocialRecall:
    truth = _truth(run)
    made = correct = 0
    for rec in _turns(run):
        if rec.get("kind", "query") != "query":
            continue
        for entity, attr, value in rec.get("claims", ()):
            made += 1
            if _truth_value(truth, entity, attr, rec["turn"]) == value:
                correct += 1
    eligible = int(truth["eligible_turns"]) if "eligible_turns" in truth else len(_eligible_turns(run))
    sra = correct / made if made else 1.0
    if eligible:
        norm, vac_n = correct / eligible, False
    else:
        norm, vac_n = 1.0, True
    return SocialRecall(sra, norm, made, correct, eligible, made == 0, vac_n)


# ------------------------------------------------------------------ privacy


@dataclass
class PrivacyScore:
    leakage_rate: float
    pp: float
    violations: int
    opportunities: int
    vacuous: bool
    kinds: dict = field(default_factory=dict)


def privacy_metrics(run) -> PrivacyScore:
    turns = _turns(run)
    n = _dialogue_turns(run)
    leaked = sum(rec.get("leaked_tokens", 0) for rec in turns)
    opp_turns = set(_truth(run).get("privacy_opportunities", []))
    kinds = {"disclosure": 0, "retention_past_ttl": 0, "unhonored_erasure": 0}
    violations = 0
    seen = 0
    for rec in turns:
        if rec["turn"] not in opp_turns and not rec.get("opportunity"):
            continue
        seen += 1
        hit = False
        if rec.get("leaked_tokens", 0) > 0:
            kinds["disclosure"] += 1
            hit = True
        if rec.get("retained_past_ttl", 0) > 0:
            kinds["retention_past_ttl"] += 1
            hit = True
        if rec.get("erased_present", 0) > 0:
            kinds["unhonored_erasure"] += 1
            hit = True
        violations += hit
    opportunities = max(len(opp_turns), seen)
    if opportunities == 0:
        return PrivacyScore(leaked / n if n else 0.0, 1.0, 0, 0, True, kinds)
    return PrivacyScore(leaked / n if n else 0.0, 1.0 - violations / opportunities, violations, opportunities, False, kinds)


# ------------------------------------------------------------------ cost


def performance(nc: float, gcr: float, sra: float, weights: MetricWeights = DEFAULT_WEIGHTS) -> float:
    return weights.omega_nc * nc + weights.omega_gcr * gcr + weights.omega_sra * sra


def run_cost(run, weights: MetricWeights = DEFAULT_WEIGHTS) -> float:
    turns = _turns(run)
    tokens = sum(max(1, rec.get("tokens", 1)) for rec in turns)
    stats = run.trigger_stats if hasattr(run, "trigger_stats") else run.get("trigger_stats", {})
    ops = stats.get("op_counters", {})
    policy_ops = ops.get("nodes_touched", 0) + ops.get("pq_ops", 0) + ops.get("heap_builds", 0)
    sim = ops.get("similarity_calls", 0)
    raw = weights.cost_tokens * tokens + weights.cost_policy_ops * policy_ops + weights.cost_similarity * sim
    return raw / max(1, _dialogue_turns(run))


def cost_efficiency_raw(perf: float, cost: float) -> float:
    if cost <= 0:
        raise ValueError("cost must be positive")
    return perf / cost


def cost_efficiency(run, weights: MetricWeights = DEFAULT_WEIGHTS) -> float:
    """Unscaled Perf/Cost; sweep reports rescale it into [0, 1]."""
    nc = narrative_coherence(run).value
    gcr = goal_completion(run).value
    sra = social_recall(run).sra
    return cost_efficiency_raw(performance(nc, gcr, sra, weights), run_cost(run, weights))


def minmax_rescale(values) -> list[float]:
    vals = [float(v) for v in values]
    if not vals:
        return []
    lo, hi = min(vals), max(vals)
    if hi - lo <= 0:
        return [1.0 for _ in vals]
    return [(v - lo) / (hi - lo) for v in vals]


def composite(cell_metrics, weights: MetricWeights = DEFAULT_WEIGHTS) -> float:
    get = cell_metrics.get if isinstance(cell_metrics, dict) else (lambda k: getattr(cell_metrics, k))
    total = 0.0
    for name in METRIC_NAMES:
        v = float(get(name))
        if not (0.0 <= v <= 1.0) or math.isnan(v):
            raise ComponentOutOfRange(f"{name}={v} outside [0, 1]")
        total += getattr(weights, name) * v
    return total


# ------------------------------------------------------------------ per run


def _subset(run, agent: str):
    class _View:
        pass

    v = _View()
    v.turns = [r for r in _turns(run) if r.get("actor") == agent]
    truth = dict(_truth(run))
    truth["goals"] = [g for g in truth.get("goals", []) if g.get("owner") == agent]
    truth["introductions"] = [i for i in truth.get("introductions", []) if i[1] == agent]
    opp = {r["turn"] for r in v.turns}
    truth["privacy_opportunities"] = [t for t in truth.get("privacy_opportunities", []) if t in opp]
    truth["turns"] = len(v.turns)

    class _S:
        pass

    s = _S()
    s.ground_truth = truth
    s.events = [e for e in _events(run) if e.get("actor") == agent]
    v.script = s
    v.trigger_stats = {}
    return v


def cell_metrics(run, weights: MetricWeights = DEFAULT_WEIGHTS) -> dict:
    """All per-run metrics; CE is left unscaled here."""
    nc = narrative_coherence(run)
    gcr = goal_completion(run)
    sr = social_recall(run)
    pv = privacy_metrics(run)
    perf = performance(nc.value, gcr.value, sr.sra, weights)
    cost = run_cost(run, weights)
    per_agent = []
    agents = sorted({r.get("actor") for r in _turns(run) if r.get("actor")})
    for a in agents:
        sub = _subset(run, a)
        per_agent.append(
            {
                "agent": a,
                "nc": round(narrative_coherence(sub).value, 12),
                "gcr": round(goal_completion(sub).value, 12),
                "sra": round(social_recall(sub).sra, 12),
                "pp": round(privacy_metrics(sub).pp, 12),
            }
        )
    stats = run.trigger_stats if hasattr(run, "trigger_stats") else run.get("trigger_stats", {})
    config = run.config if hasattr(run, "config") else run.get("config", {})
    return {
        "config": dict(config),
        "nc": round(nc.value, 12),
        "gcr": round(gcr.value, 12),
        "sra": round(sr.sra, 12),
        "sra_opportunity_normalized": round(sr.normalized, 12),
        "leakage_rate": round(pv.leakage_rate, 12),
        "pp": round(pv.pp, 12),
        "perf": round(perf, 12),
        "cost": round(cost, 12),
        "ce_raw": round(cost_efficiency_raw(perf, cost), 12),
        "support": {
            "turns": _dialogue_turns(run),
            "scored_turns": nc.support,
            "goals": gcr.support,
            "references": sr.made,
            "correct_references": sr.correct,
            "eligible_turns": sr.eligible,
            "opportunities": pv.opportunities,
            "violations": pv.violations,
        },
        "violation_kinds": pv.kinds,
        "vacuous": {
            "no_goals": gcr.vacuous,
            "zero_references": sr.vacuous,
            "zero_eligible": sr.vacuous_normalized,
            "zero_opportunities": pv.vacuous,
            "no_scored_turns": nc.vacuous,
        },
        "trigger_stats": dict(stats),
        "per_agent": per_agent,
    }


# ------------------------------------------------------------------ statistics


def wilcoxon_p(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a - b
    if np.all(np.abs(d) < 1e-15):
        return 1.0
    res = sps.wilcoxon(a, b, zero_method="wilcox", alternative="two-sided")
    return float(res.pvalue)


def hedges_g(a, b) -> float:
    """Cohen's d on pooled SD with the small-sample Hedges correction."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        return 0.0
    diff = a.mean() - b.mean()
    sp = math.sqrt(((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / (n1 + n2 - 2))
    if sp == 0:
        return 0.0
    return diff / sp * (1.0 - 3.0 / (4.0 * (n1 + n2) - 9.0))


def cliffs_delta(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not len(a) or not len(b):
        return 0.0
    gt = (a[:, None] > b[None, :]).sum()
    lt = (a[:, None] < b[None, :]).sum()
    return float((gt - lt) / (len(a) * len(b)))


def holm(pvalues) -> list[float]:
    """Holm step-down adjusted p-values, in input order."""
    p = list(pvalues)
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    adj = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj


def hierarchical_bootstrap(groups: dict, n_resamples: int = 2000, seed: int = 0, alpha: float = 0.05) -> tuple:
    """Mean with a percentile CI, resampling groups (seeds) then members (agents).

    ``groups`` maps group id to a list of member values.  Returns
    (point, low, high); the interval is widened to include the point when
    the percentile bounds would exclude it.
    """
    keys = sorted(groups)
    if not keys:
        return (0.0, 0.0, 0.0)
    arrays = [np.asarray(groups[k], dtype=float) for k in keys]
    point = float(np.mean([a.mean() for a in arrays]))
    rng = np.random.default_rng(seed)
    stats_ = np.empty(n_resamples)
    for r in range(n_resamples):
        pick = rng.integers(len(arrays), size=len(arrays))
        means = []
        for i in pick:
            a = arrays[i]
            means.append(a[rng.integers(len(a), size=len(a))].mean())
        stats_[r] = np.mean(means)
    lo = float(np.quantile(stats_, alpha / 2))
    hi = float(np.quantile(stats_, 1 - alpha / 2))
    return (point, min(lo, point), max(hi, point))


def kendall_tau(a, b) -> float:
    res = sps.kendalltau(a, b)
    v = float(res.statistic if hasattr(res, "statistic") else res.correlation)
    return 0.0 if math.isnan(v) else v


def stats_suite(collections: dict, *, metrics=None, n_resamples: int = 2000, seed: int = 0) -> dict:
    """Pairwise policy comparisons.

    ``collections`` maps policy -> {pair_key: value or {metric: value}}, where
    pair keys (for instance (budget, seed)) must agree across policies.
    Values may also be {metric: {seed: [agent values]}} under the key
    "groups" for bootstrap intervals.
    """
    policies = sorted(collections)
    if len(policies) < 1:
        raise UnpairedCells("no policies supplied")
    keysets = {p: set(k for k in collections[p] if k != "groups") for p in policies}
    ref = keysets[policies[0]]
    for p in policies[1:]:
        if keysets[p] != ref:
            raise UnpairedCells(f"policy {p} does not share pair keys with {policies[0]}")
    keys = sorted(ref, key=repr)
    if metrics is None:
        sample = collections[policies[0]][keys[0]] if keys else {}
        metrics = sorted(sample) if isinstance(sample, dict) else ["value"]

    def series(p, m):
        vals = []
        for k in keys:
            v = collections[p][k]
            vals.append(float(v[m] if isinstance(v, dict) else v))
        return vals

    report = {"pairs": {}, "intervals": {}, "n_pairs": len(keys)}
    for m in metrics:
        rows = []
        for p1, p2 in combinations(policies, 2):
            a, b = series(p1, m), series(p2, m)
            rows.append(
                {
                    "a": p1,
                    "b": p2,
                    "wilcoxon_p": wilcoxon_p(a, b) if len(a) else 1.0,
                    "hedges_g": hedges_g(a, b),
                    "cliffs_delta": cliffs_delta(a, b),
                    "mean_a": float(np.mean(a)) if a else 0.0,
                    "mean_b": float(np.mean(b)) if b else 0.0,
                }
            )
        for row, adj in zip(rows, holm([r["wilcoxon_p"] for r in rows])):
            row["holm_p"] = adj
        report["pairs"][m] = rows
        for p in policies:
            groups = collections[p].get("groups", {}).get(m) if isinstance(collections[p].get("groups"), dict) else None
            if groups is None:
                groups = {i: [v] for i, v in enumerate(series(p, m))}
            pt, lo, hi = hierarchical_bootstrap(groups, n_resamples, seed)
            report["intervals"].setdefault(m, {})[p] = {"mean": pt, "low": lo, "high": hi}
    return report


def rank_agreement(scores_a: dict, scores_b: dict) -> float:
    """Kendall tau between two per-policy score columns."""
    keys = sorted(set(scores_a) & set(scores_b))
    return kendall_tau([scores_a[k] for k in keys], [scores_b[k] for k in keys])


# ------------------------------------------------------------------ sweep report


def sweep_report(results, weights: MetricWeights = DEFAULT_WEIGHTS, *, n_resamples: int = 2000, seed: int = 0) -> dict:
    """Aggregate per-scenario results into (policy, budget, seed) cells.

    CE is min-max rescaled across all cells of the sweep before the
    composite is formed.
    """
    cells: dict[tuple, list] = {}
    errors = []
    for r in results:
        if r.error:
            errors.append({"cell": [r.key.scenario, r.key.policy, r.key.budget, r.key.seed], "error": r.error})
            continue
        cells.setdefault((r.key.policy, r.key.budget, r.key.seed), []).append(r.metrics)
    keys = sorted(cells)
    agg = {}
    for k in keys:
        ms = cells[k]
        row = {name: float(np.mean([m[name] for m in ms])) for name in ("nc", "gcr", "sra", "pp", "ce_raw", "leakage_rate", "sra_opportunity_normalized")}
        row["triggers"] = int(sum(m["trigger_stats"]["triggers"] for m in ms))
        row["scenarios"] = len(ms)
        row["agents"] = [a for m in ms for a in m.get("per_agent", [])]
        row["vacuous"] = {
            flag: sum(1 for m in ms if m["vacuous"].get(flag)) for flag in ms[0].get("vacuous", {})
        }
        agg[k] = row
    ces = minmax_rescale([agg[k]["ce_raw"] for k in keys])
    for k, ce in zip(keys, ces):
        agg[k]["ce"] = ce
        agg[k]["composite"] = composite(agg[k], weights)

    policies = sorted({k[0] for k in keys})
    budgets = sorted({k[1] for k in keys})
    seeds = sorted({k[2] for k in keys})
    matrix = {}
    triggers = {}
    for p in policies:
        for b in budgets:
            vals = [agg[(p, b, s)]["composite"] for s in seeds if (p, b, s) in agg]
            if vals:
                matrix.setdefault(p, {})[str(b)] = float(np.mean(vals))
            triggers.setdefault(p, {})[str(b)] = {str(s): agg[(p, b, s)]["triggers"] for s in seeds if (p, b, s) in agg}

    collections = {}
    for p in policies:
        col = {}
        groups: dict = {}
        for b in budgets:
            for s in seeds:
                if (p, b, s) not in agg:
                    continue
                row = agg[(p, b, s)]
                col[(b, s)] = {m: row[m] for m in ("nc", "gcr", "sra", "pp", "ce", "composite")}
                for m in ("nc", "gcr", "sra", "pp"):
                    groups.setdefault(m, {}).setdefault(s, []).extend(a[m] for a in row["agents"])
        if groups:
            col["groups"] = groups
        collections[p] = col
    stats = None
    if len(policies) >= 2:
        try:
            stats = stats_suite(collections, metrics=["nc", "gcr", "sra", "pp", "ce", "composite"], n_resamples=n_resamples, seed=seed)
        except UnpairedCells as exc:
            stats = {"error": str(exc)}
    agreement = None
    if len(budgets) >= 2 and len(policies) >= 2:
        lo, hi = str(budgets[0]), str(budgets[-1])
        agreement = {
            "low_budget": budgets[0],
            "high_budget": budgets[-1],
            "kendall_tau": rank_agreement({p: matrix[p][lo] for p in policies}, {p: matrix[p][hi] for p in policies}),
        }
    cell_rows = []
    for k in keys:
        row = {kk: v for kk, v in agg[k].items() if kk != "agents"}
        row.update({"policy": k[0], "budget": k[1], "seed": k[2]})
        cell_rows.append(row)
    return {
        "cells": cell_rows,
        "composite_matrix": matrix,
        "trigger_counts": triggers,
        "rank_agreement": agreement,
        "stats": stats,
        "errors": errors,
    }


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["policy", "budget", "seed", "nc", "gcr", "sra", "pp", "ce", "ce_raw", "leakage_rate", "composite", "triggers"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in report["cells"]:
        w.writerow([row[c] if not isinstance(row[c], float) else f"{row[c]:.6f}" for c in cols])
    return buf.getvalue()
