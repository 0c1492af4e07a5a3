"""Offline and streaming retention optimization over dependency forests.

Small instances are solved exactly by enumerating provenance-closed subsets;
the greedy and online heuristics are measured against those optima.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import TooLarge
from .scoring import CoverageSubmodular, Modular, UtilityModel

MAX_EXACT = 20
EPS = 1e-12


@dataclass(frozen=True)
class RetentionItem:
    id: str
    weight: int
    value: float | None = None
    topics: frozenset | None = None
    sensitivity: float = 0.0
    parent: str | None = None


@dataclass
class RetentionInstance:
    items: list
    budget: int
    utility: UtilityModel

    def __post_init__(self):
        self.by_id = {it.id: it for it in self.items}
        if len(self.by_id) != len(self.items):
            raise ValueError("duplicate item ids")
        for it in self.items:
            if it.weight < 1:
                raise ValueError(f"item {it.id} has non-positive weight")
            if it.parent is not None and it.parent not in self.by_id:
                raise ValueError(f"item {it.id} has unknown parent {it.parent}")
        self.order = _topological(self.items)

    @classmethod
    def modular(cls, items, budget: int) -> "RetentionInstance":
        return cls(list(items), budget, Modular({it.id: it.value for it in items}))

    @classmethod
    def coverage(cls, items, budget: int, topic_weights=None) -> "RetentionInstance":
        return cls(list(items), budget, CoverageSubmodular({it.id: it.topics for it in items}, topic_weights))

    @property
    def weights(self) -> dict:
        return {it.id: it.weight for it in self.items}

    @property
    def parents(self) -> dict:
        return {it.id: it.parent for it in self.items}

    def weight_of(self, ids) -> int:
        return sum(self.by_id[i].weight for i in ids)

    def is_closed(self, ids) -> bool:
        ids = set(ids)
        return all(self.by_id[i].parent is None or self.by_id[i].parent in ids for i in ids)

    def is_feasible(self, ids) -> bool:
        return self.is_closed(ids) and self.weight_of(ids) <= self.budget

    def closure(self, item_id: str) -> frozenset:
        out = []
        cur = item_id
        while cur is not None:
            out.append(cur)
            cur = self.by_id[cur].parent
        return frozenset(out)

    def value(self, ids) -> float:
        return self.utility.evaluate(ids)

    def lipschitz(self) -> float:
        """max over items of marginal gain per token (the empty-set marginal bounds all others)."""
        return max((self.utility.marginal(it.id, ()) / it.weight for it in self.items), default=0.0)

    def with_budget(self, budget: int) -> "RetentionInstance":
        return RetentionInstance(self.items, budget, self.utility)

    def to_json(self) -> str:
        tw = getattr(self.utility, "topic_weights", None)
        return json.dumps(
            {
                "budget": self.budget,
                "utility": self.utility.kind,
                "topic_weights": tw or None,
                "items": [
                    {
                        "id": it.id,
                        "weight": it.weight,
                        "value": it.value,
                        "topics": sorted(it.topics) if it.topics is not None else None,
                        "sensitivity": it.sensitivity,
                        "parent": it.parent,
                    }
                    for it in self.items
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RetentionInstance":
        doc = json.loads(text)
        items = [
            RetentionItem(
                d["id"],
                int(d["weight"]),
                d.get("value"),
                frozenset(d["topics"]) if d.get("topics") is not None else None,
                float(d.get("sensitivity", 0.0)),
                d.get("parent"),
            )
            for d in doc["items"]
        ]
        if doc["utility"] == "coverage":
            return cls.coverage(items, int(doc["budget"]), doc.get("topic_weights"))
        return cls.modular(items, int(doc["budget"]))


def _topological(items) -> list:
    children: dict = {}
    roots = []
    for it in items:
        if it.parent is None:
            roots.append(it.id)
        else:
            children.setdefault(it.parent, []).append(it.id)
    order = []
    stack = sorted(roots, reverse=True)
    while stack:
        x = stack.pop()
        order.append(x)
        stack.extend(sorted(children.get(x, ()), reverse=True))
    if len(order) != len(items):
        raise ValueError("parent structure is not a forest")
    return order


class _Running:
    """Incremental utility for depth-first enumeration."""

    def __init__(self, instance: RetentionInstance):
        u = instance.utility
        self.instance = instance
        self.kind = "modular" if isinstance(u, Modular) else ("coverage" if isinstance(u, CoverageSubmodular) else "generic")
        self.value = 0.0
        self.counts: dict = {}
        self.members: list = []

    def add(self, i):
        u = self.instance.utility
        self.members.append(i)
        if self.kind == "modular":
            self.value += u.values[i]
        elif self.kind == "coverage":
            for t in u.topics[i]:
                c = self.counts.get(t, 0)
                if c == 0:
                    self.value += u._w(t)
                self.counts[t] = c + 1
        else:
            self.value = u.evaluate(self.members)

    def remove(self, i):
        u = self.instance.utility
        self.members.pop()
        if self.kind == "modular":
            self.value -= u.values[i]
        elif self.kind == "coverage":
            for t in u.topics[i]:
                c = self.counts[t] - 1
                self.counts[t] = c
                if c == 0:
                    self.value -= u._w(t)
        else:
            self.value = u.evaluate(self.members)


def _better(value, ids, best_value, best_ids) -> bool:
    if best_ids is None or value > best_value + EPS:
        return True
    return abs(value - best_value) <= EPS and tuple(sorted(ids)) < tuple(sorted(best_ids))


def brute_force_optimum(instance: RetentionInstance) -> tuple[frozenset, float]:
    """Exact optimum over provenance-closed subsets within budget.

    Ties go to the lexicographically smallest sorted id tuple.
    """
    n = len(instance.items)
    if n > MAX_EXACT:
        raise TooLarge(f"{n} items exceeds the exact-search limit of {MAX_EXACT}")
    order = instance.order
    by_id = instance.by_id
    budget = instance.budget
    run = _Running(instance)
    included: set = set()
    best = {"ids": None, "value": 0.0}

    def rec(k: int, weight: int):
        if k == len(order):
            # the incremental sum can drift by rounding; re-evaluate ties exactly
            if _better(run.value, included, best["value"], best["ids"]):
                exact = instance.value(included)
                if _better(exact, included, best["value"], best["ids"]):
                    best["ids"], best["value"] = frozenset(included), exact
            return
        i = order[k]
        rec(k + 1, weight)
        it = by_id[i]
        if weight + it.weight <= budget and (it.parent is None or it.parent in included):
            included.add(i)
            run.add(i)
            rec(k + 1, weight + it.weight)
            run.remove(i)
            included.discard(i)

    rec(0, 0)
    return best["ids"], best["value"]


def greedy_density(instance: RetentionInstance) -> frozenset:
    """Add the accessible item with the best marginal gain per token while it fits."""
    S: set = set()
    used = 0
    u = instance.utility
    while True:
        best = None
        for it in instance.items:
            if it.id in S or used + it.weight > instance.budget:
                continue
            if it.parent is not None and it.parent not in S:
                continue
            ratio = u.marginal(it.id, S) / it.weight
            key = (-ratio, it.weight, it.id)
            if best is None or key < best[0]:
                best = (key, it)
        if best is None:
            return frozenset(S)
        S.add(best[1].id)
        used += best[1].weight


def best_singleton_closure(instance: RetentionInstance) -> frozenset:
    best_ids, best_val = frozenset(), instance.value(())
    for it in instance.items:
        clo = instance.closure(it.id)
        if instance.weight_of(clo) > instance.budget:
            continue
        v = instance.value(clo)
        if v > best_val + EPS or (abs(v - best_val) <= EPS and tuple(sorted(clo)) < tuple(sorted(best_ids)) and best_ids):
            best_ids, best_val = clo, v
    return best_ids


def best_of_greedy_and_singleton(instance: RetentionInstance) -> frozenset:
    g = greedy_density(instance)
    s = best_singleton_closure(instance)
    return g if instance.value(g) >= instance.value(s) - EPS else s


# ------------------------------------------------------------------ streaming


@dataclass
class StreamTrace:
    arrivals: list
    retained_trajectory: list = field(default_factory=list)
    regret_series: list = field(default_factory=list)
    exact: list = field(default_factory=list)
    evictions: int = 0
    rejections: int = 0

    @property
    def mean_regret(self) -> float:
        return sum(self.regret_series) / len(self.regret_series) if self.regret_series else 0.0

    def as_dict(self) -> dict:
        return {
            "arrivals": list(self.arrivals),
            "retained_trajectory": [sorted(s) for s in self.retained_trajectory],
            "regret_series": list(self.regret_series),
            "exact": list(self.exact),
            "evictions": self.evictions,
            "rejections": self.rejections,
        }


def _reference_value(prefix, budget, utility, exact_prefix) -> tuple[float, bool]:
    sub = _sub_utility(utility, [it.id for it in prefix])
    inst = RetentionInstance(list(prefix), budget, sub)
    if len(prefix) <= exact_prefix:
        return brute_force_optimum(inst)[1], True
    return inst.value(best_of_greedy_and_singleton(inst)), False


def _sub_utility(utility, ids):
    if isinstance(utility, CoverageSubmodular):
        return CoverageSubmodular({i: utility.topics[i] for i in ids}, utility.topic_weights)
    if isinstance(utility, Modular):
        return Modular({i: utility.values[i] for i in ids})
    return utility


def _stream(arrivals, budget, utility, admit, exact_prefix) -> StreamTrace:
    trace = StreamTrace([it.id for it in arrivals])
    retained: dict = {}
    for t, item in enumerate(arrivals, start=1):
        admit(retained, item, trace)
        trace.retained_trajectory.append(frozenset(retained))
        ref, exact = _reference_value(arrivals[:t], budget, utility, exact_prefix)
        regret = ref - utility.evaluate(retained)
        # summation order differs between the two sides
        trace.regret_series.append(0.0 if -1e-9 < regret < 0 else regret)
        trace.exact.append(exact)
    return trace


def _leaves(retained: dict) -> list:
    parents = {it.parent for it in retained.values()}
    return [i for i in retained if i not in parents]


def online_greedy_with_eviction(arrivals, budget: int, utility: UtilityModel, exact_prefix: int = 16) -> StreamTrace:
    """Density-keyed online retention with admission control.

    On overflow the lowest-density removable members are evicted until the
    arrival fits; the arrival is kept only if that beats rejecting it.
    """

    def admit(retained: dict, item, trace):
        if item.parent is not None and item.parent not in retained:
            trace.rejections += 1
            return
        used = sum(it.weight for it in retained.values())
        if used + item.weight <= budget:
            retained[item.id] = item
            return
        if item.weight > budget:
            trace.rejections += 1
            return
        trial = dict(retained)
        trial[item.id] = item
        evicted = 0
        used += item.weight
        while used > budget:
            cands = [i for i in _leaves(trial) if i != item.id and i != item.parent]
            if not cands:
                break
            ids = set(trial)

            def key(i):
                return (utility.marginal(i, ids - {i}) / trial[i].weight, trial[i].weight, i)

            victim = min(cands, key=key)
            used -= trial[victim].weight
            del trial[victim]
            evicted += 1
        if used > budget or utility.evaluate(trial) <= utility.evaluate(retained) + EPS:
            trace.rejections += 1
            return
        retained.clear()
        retained.update(trial)
        trace.evictions += evicted

    return _stream(list(arrivals), budget, utility, admit, exact_prefix)


def online_fifo(arrivals, budget: int, utility: UtilityModel, exact_prefix: int = 16) -> StreamTrace:
    """Baseline: always admit, evicting the oldest removable members."""
    position = {it.id: k for k, it in enumerate(arrivals)}

    def admit(retained: dict, item, trace):
        if (item.parent is not None and item.parent not in retained) or item.weight > budget:
            trace.rejections += 1
            return
        retained[item.id] = item
        used = sum(it.weight for it in retained.values())
        while used > budget:
            cands = [i for i in _leaves(retained) if i != item.id and i != item.parent]
            if not cands:
                del retained[item.id]
                trace.rejections += 1
                return
            victim = min(cands, key=lambda i: position[i])
            used -= retained[victim].weight
            del retained[victim]
            trace.evictions += 1

    return _stream(list(arrivals), budget, utility, admit, exact_prefix)


# ------------------------------------------------------------------ budget ladder


def verify_budget_monotonicity(instance_family, budget_ladder) -> dict:
    """Exact optima along an ascending budget ladder.

    Checks that optimum utility never decreases with budget and that each
    step changes it by at most L times the budget step.
    """
    ladder = list(budget_ladder)
    if ladder != sorted(ladder):
        raise ValueError("budget ladder must be ascending")
    rows = []
    mono, lip, greedy_notes = [], [], []
    for k, inst in enumerate(instance_family):
        L = inst.lipschitz()
        values = [brute_force_optimum(inst.with_budget(b))[1] for b in ladder]
        gvals = [inst.value(best_of_greedy_and_singleton(inst.with_budget(b))) for b in ladder]
        for j in range(1, len(ladder)):
            dv = values[j] - values[j - 1]
            db = ladder[j] - ladder[j - 1]
            if dv < -1e-9:
                mono.append({"instance": k, "from": ladder[j - 1], "to": ladder[j], "delta": dv})
            if abs(dv) > L * db + 1e-9:
                lip.append({"instance": k, "from": ladder[j - 1], "to": ladder[j], "delta": dv, "bound": L * db})
            if gvals[j] < gvals[j - 1] - 1e-9:
                greedy_notes.append({"instance": k, "from": ladder[j - 1], "to": ladder[j], "delta": gvals[j] - gvals[j - 1]})
        rows.append({"instance": k, "lipschitz": L, "optimum": values, "heuristic": gvals})
    return {
        "ladder": ladder,
        "instances": rows,
        "monotonicity_violations": mono,
        "lipschitz_violations": lip,
        "heuristic_nonmonotone": greedy_notes,
        "ok": not mono and not lip,
    }
