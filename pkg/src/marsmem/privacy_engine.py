"""Sensitivity scoring, removal priority, the exponential-mechanism selector,
its accountant and the two-pass output redactor."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCandidates, NotAdjacent, PrivacyBudgetExhausted, UnknownUser
from .schema import MemoryNode, NodeType, Provenance
from .text import content_hash
from .scoring import ScoringConfig, importance

# (regex, category, base score).  Order matters only for overlapping spans.
DEFAULT_PATTERNS = (
    (r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}", "email", 0.6),
    (r"\b\d{3}-\d{2}-\d{4}\b", "id_number", 0.8),
    (r"\b(?:\d{4}[ -]){3}\d{4}\b", "card_number", 0.8),
    (r"(?:\+\d{1,2}[ .\-])?\(?\b\d{3}\)?[ .\-]\d{3}[ .\-]\d{4}\b", "phone", 0.6),
)

DEFAULT_KEYWORDS = {
    "health": (
        0.5,
        frozenset(
            "diagnosis diagnosed diabetes medication therapy therapist allergy allergic pregnant pregnancy "
            "cancer depression anxiety hospital prescription surgery chemotherapy insulin".split()
        ),
    ),
    "finance": (
        0.5,
        frozenset("salary debt loan mortgage bankrupt bankruptcy overdraft income paycheck savings".split()),
    ),
    "protected": (
        0.7,
        frozenset("religion religious ethnicity sexuality orientation disability immigration visa".split()),
    ),
}

MODE_THRESHOLDS = {"lenient": 0.7, "standard": 0.5, "strict": 0.3}

_KEYWORD_RE = re.compile(r"[A-Za-z][A-Za-z'\-]*")


@dataclass
class SensitivityRuleSet:
    surface_patterns: tuple = DEFAULT_PATTERNS
    keyword_lists: dict = field(default_factory=lambda: dict(DEFAULT_KEYWORDS))
    type_prior: dict = field(
        default_factory=lambda: {NodeType.EPISODIC: 0.1, NodeType.SEMANTIC: 0.0, NodeType.SOCIAL: 0.1, NodeType.TASK: 0.0}
    )
    user_overrides: dict = field(default_factory=dict)
    no_consent_offset: float = 0.2

    def __post_init__(self):
        self.type_prior = {NodeType(k): float(v) for k, v in self.type_prior.items()}
        self._compiled = [(re.compile(p), cat, float(base)) for p, cat, base in self.surface_patterns]
        self._keyword_cat = {}
        for cat, (base, words) in self.keyword_lists.items():
            for w in words:
                prev = self._keyword_cat.get(w)
                if prev is None or prev[1] < base:
                    self._keyword_cat[w] = (cat, float(base))
        self._override_res = [
            (re.compile(r"\b" + re.escape(name.lower()) + r"\b"), name, value) for name, value in self.user_overrides.items()
        ]

    def pattern_hits(self, text: str) -> list[tuple[int, int, str, float]]:
        """Non-overlapping surface matches as (start, end, category, base)."""
        hits = []
        taken = []
        for rx, cat, base in self._compiled:
            for m in rx.finditer(text):
                s, e = m.span()
                if any(s < te and ts < e for ts, te in taken):
                    continue
                taken.append((s, e))
                hits.append((s, e, cat, base))
        hits.sort()
        return hits

    def keyword_hits(self, text: str) -> list[tuple[int, int, str, float]]:
        hits = []
        for m in _KEYWORD_RE.finditer(text):
            hit = self._keyword_cat.get(m.group().lower().strip("'-"))
            if hit is not None:
                hits.append((m.start(), m.end(), hit[0], hit[1]))
        return hits

    def override_for(self, text: str, user_id: str | None) -> float | None:
        forced = None
        lowered = text.lower()
        for rx, name, value in self._override_res:
            if rx.search(lowered) or (user_id is not None and user_id == name):
                score = 1.0 if value == "blacklist" else float(value)
                forced = score if forced is None else max(forced, score)
        return forced


DEFAULT_RULES = SensitivityRuleSet()


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def sensitivity_score(content: str, node_type, provenance: Provenance | None, rules: SensitivityRuleSet = DEFAULT_RULES) -> float:
    """Max matched base score plus type prior (and a no-consent offset), clamped."""
    user = provenance.user_id if provenance is not None else None
    forced = rules.override_for(content, user)
    if forced is not None:
        return _clamp(forced)
    bases = [h[3] for h in rules.pattern_hits(content)] + [h[3] for h in rules.keyword_hits(content)]
    score = max(bases, default=0.0) + rules.type_prior.get(NodeType(node_type), 0.0)
    if provenance is not None and not provenance.consent:
        score += rules.no_consent_offset
    return _clamp(score)


def removal_priority_value(sensitivity: float, age_norm: float, imp: float) -> float:
    return sensitivity * age_norm * (1.0 - imp)


def removal_priority(node: MemoryNode, config: ScoringConfig, now: int, max_age: int, max_access: int | None = None) -> float:
    """s * age_norm * (1 - imp); higher means evict sooner."""
    age = max(0, now - node.created_at)
    age_norm = age / max_age if max_age > 0 else 0.0
    return removal_priority_value(node.sensitivity, age_norm, importance(node, config, now, max_access))


# ------------------------------------------------------------------ redaction


@dataclass(frozen=True)
class RedactionFlag:
    kind: str  # "pattern" or "keyword"
    category: str
    tokens: int
    masked: bool
    digest: str = ""


def _mask(category: str) -> str:
    return f"[REDACTED:{category}]"


def redact_output(text: str, rules: SensitivityRuleSet = DEFAULT_RULES, policy_mode: str = "standard"):
    """Two passes: mask surface patterns, then flag (strict: also mask) keywords.

    Returns the redacted text and the list of flags.  Unmasked keyword hits
    are the sensitive tokens that remain in the output.
    """
    if policy_mode not in MODE_THRESHOLDS:
        raise ValueError(f"unknown redaction mode {policy_mode!r}")
    flags = []
    out = []
    last = 0
    for s, e, cat, _base in rules.pattern_hits(text):
        span = text[s:e]
        out.append(text[last:s])
        out.append(_mask(cat))
        last = e
        flags.append(RedactionFlag("pattern", cat, max(1, len(span.split())), True, hashlib.sha256(span.encode()).hexdigest()[:8]))
    out.append(text[last:])
    text = "".join(out)

    threshold = MODE_THRESHOLDS[policy_mode]
    strict = policy_mode == "strict"
    out = []
    last = 0
    for s, e, cat, base in rules.keyword_hits(text):
        if base < threshold:
            continue
        flags.append(RedactionFlag("keyword", cat, 1, strict, ""))
        if strict:
            out.append(text[last:s])
            out.append(_mask(cat))
            last = e
    if strict:
        out.append(text[last:])
        text = "".join(out)
    return text, flags


def leaked_tokens(flags) -> int:
    return sum(f.tokens for f in flags if not f.masked)


# ------------------------------------------------------------------ DP selection


@dataclass
class DpConfig:
    epsilon: float = 1.0
    delta: float = 0.0
    tie_tolerance: float | None = None  # None: 2% of median |density|
    tie_fraction: float = 0.02
    sensitivity_bound: float | None = None  # None: computed from the modular model
    cap: float = 10.0
    group_multiplier: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.sensitivity_bound is not None and self.sensitivity_bound <= 0:
            raise ValueError("sensitivity bound must be positive")


class Accountant:
    """Basic sequential composition of (epsilon, delta), tracked per user."""

    def __init__(self, cap: float = 10.0):
        self.cap = cap
        self._totals: dict[str, list[float]] = {}

    def totals(self, user: str | None = None) -> tuple[float, float]:
        if user is None:
            eps = sum(v[0] for v in self._totals.values())
            delta = sum(v[1] for v in self._totals.values())
            return (eps, delta)
        v = self._totals.get(user, [0.0, 0.0])
        return (v[0], v[1])

    def snapshot(self) -> tuple[float, float]:
        eps, delta = self.totals()
        return (round(eps, 9), round(delta, 12))

    def can_charge(self, users, epsilon: float) -> bool:
        return all(self._totals.get(u, [0.0, 0.0])[0] + epsilon <= self.cap + 1e-12 for u in users)

    def charge(self, users, epsilon: float, delta: float = 0.0) -> None:
        users = list(users)
        if not self.can_charge(users, epsilon):
            raise PrivacyBudgetExhausted(f"charging {epsilon} would exceed cap {self.cap}")
        for u in users:
            t = self._totals.setdefault(u, [0.0, 0.0])
            t[0] += epsilon
            t[1] += delta

    def users(self) -> list[str]:
        return sorted(self._totals)


def _rng(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def selection_log_probs(scores, epsilon: float, delta_q: float) -> np.ndarray:
    """log P(j) for P proportional to exp(eps * q_j / (2 * delta_q)), via log-sum-exp."""
    z = np.asarray(scores, dtype=float) * (epsilon / (2.0 * delta_q))
    m = float(np.max(z))
    return z - (m + math.log(float(np.sum(np.exp(z - m)))))


def q_score(retained, utility, sensitivities: dict, lambda_priv: float) -> float:
    return utility.evaluate(retained) - lambda_priv * sum(sensitivities[i] for i in retained)


def modular_delta_q(utility, weights: dict, lambda_priv: float) -> float:
    """L * max w + lambda_priv, the sensitivity bound of q for one changed node."""
    return utility.lipschitz(weights) * max(weights.values()) + lambda_priv


@dataclass
class DpDraw:
    index: int
    selected: frozenset
    probabilities: np.ndarray
    delta_q: float


def exp_mechanism_select(
    candidate_sets,
    utility_model,
    lambda_priv: float,
    dp_config: DpConfig,
    rng_seed,
    *,
    sensitivities: dict,
    weights: dict | None = None,
    accountant: Accountant | None = None,
    users=(),
) -> DpDraw:
    """Sample one retained set with probability proportional to exp(eps q / 2 dq)."""
    cands = [frozenset(c) for c in candidate_sets]
    if not cands:
        raise EmptyCandidates("no candidate sets")
    if dp_config.sensitivity_bound is not None:
        dq = dp_config.sensitivity_bound
    else:
        if weights is None:
            raise ValueError("weights are needed to derive the sensitivity bound")
        dq = modular_delta_q(utility_model, weights, lambda_priv)
    dq *= dp_config.group_multiplier
    if dq <= 0:
        raise ValueError("sensitivity bound must be positive")
    if accountant is not None:
        accountant.charge(users, dp_config.epsilon, 0.0)
    scores = [q_score(c, utility_model, sensitivities, lambda_priv) for c in cands]
    logp = selection_log_probs(scores, dp_config.epsilon, dq)
    probs = np.exp(logp)
    idx = int(_rng(rng_seed).choice(len(cands), p=probs / probs.sum()))
    return DpDraw(idx, cands[idx], probs, dq)


@dataclass
class PrivacyInstance:
    """Minimal view of a store for DP auditing: a utility model plus s and w."""

    utility: object
    sensitivities: dict
    weights: dict

    def ids(self) -> frozenset:
        return frozenset(self.weights)

    def signature(self, i) -> tuple:
        u = self.utility
        item = u.topics[i] if hasattr(u, "topics") else u.values[i]
        return (item, self.sensitivities[i], self.weights[i])


def adjacent_difference(a: PrivacyInstance, b: PrivacyInstance) -> list:
    if a.ids() != b.ids():
        raise NotAdjacent("instances hold different node ids")
    diff = sorted(i for i in a.ids() if a.signature(i) != b.signature(i))
    if len(diff) > 1:
        raise NotAdjacent(f"instances differ in {len(diff)} nodes")
    for i in diff:
        if a.sensitivities[i] <= 0 and b.sensitivities[i] <= 0:
            raise NotAdjacent(f"node {i} is not personal (sensitivity 0 in both)")
    return diff


def dp_ratio_audit(store_a: PrivacyInstance, store_b: PrivacyInstance, candidate_sets, dp_config: DpConfig, lambda_priv: float = 0.3) -> float:
    """Exact max over outcomes of |ln P_a(S) - ln P_b(S)|."""
    adjacent_difference(store_a, store_b)
    cands = [frozenset(c) for c in candidate_sets]
    if not cands:
        raise EmptyCandidates("no candidate sets")
    if dp_config.sensitivity_bound is not None:
        dq = dp_config.sensitivity_bound
    else:
        dq = max(
            modular_delta_q(store_a.utility, store_a.weights, lambda_priv),
            modular_delta_q(store_b.utility, store_b.weights, lambda_priv),
        )
    dq *= dp_config.group_multiplier
    qa = [q_score(c, store_a.utility, store_a.sensitivities, lambda_priv) for c in cands]
    qb = [q_score(c, store_b.utility, store_b.sensitivities, lambda_priv) for c in cands]
    la = selection_log_probs(qa, dp_config.epsilon, dq)
    lb = selection_log_probs(qb, dp_config.epsilon, dq)
    return float(np.max(np.abs(la - lb)))


# ------------------------------------------------------------------ tie-break inside policies


def tie_band(ids, keys, tolerance: float) -> list:
    """Ids whose key is within ``tolerance`` of the smallest key (evict-first order)."""
    if not ids:
        return []
    best = min(keys)
    return [i for i, k in zip(ids, keys) if k - best <= tolerance]


def dp_tie_break(store, band, utilities: dict, dp_config: DpConfig, rng, lambda_priv: float):
    """Pick one node of the band to evict with the exponential mechanism.

    Outcomes are the singleton evictions; the retained-set score differs
    between them only by the evicted node's own term, so q is computed as
    -(u_i - lambda * s_i).  Falls back to the first band member when a user
    budget is exhausted.  Returns (node_id, note).
    """
    if len(band) == 1:
        return band[0], ""
    weights = {i: store.nodes[i].weight for i in band}
    sens = {i: store.nodes[i].sensitivity for i in band}
    # L over the whole live store keeps the bound valid for any neighbour
    lip = max(max(0.0, utilities[i]) / weights[i] for i in band)
    all_w = max(n.weight for n in store.nodes.values())
    dq = dp_config.sensitivity_bound or (lip * all_w + lambda_priv)
    dq = max(dq, 1e-12) * dp_config.group_multiplier
    users = sorted({store.nodes[i].provenance.user_id or "anonymous" for i in band})
    acct = store.accountant
    if acct is not None and not acct.can_charge(users, dp_config.epsilon):
        return band[0], "dp budget exhausted; deterministic tie-break"
    if acct is not None:
        acct.charge(users, dp_config.epsilon)
    scores = [-(utilities[i] - lambda_priv * sens[i]) for i in band]
    logp = selection_log_probs(scores, dp_config.epsilon, dq)
    p = np.exp(logp)
    idx = int(rng.choice(len(band), p=p / p.sum()))
    return band[idx], f"dp tie-break among {len(band)}"


# ------------------------------------------------------------------ receipts


def privacy_receipt(store, audit_log, user_id: str) -> dict:
    """What the store holds, summarized and dropped for one user; hashes only."""
    if user_id not in store.users:
        raise UnknownUser(user_id)
    owned = {nid for nid, u in store.attribution.items() if u == user_id}
    retained = []
    for nid in store.live_ids():
        if nid in owned:
            n = store.nodes[nid]
            retained.append({"id": nid, "type": n.node_type.value, "weight": n.weight, "content_hash": content_hash(n.content)})
    summarized, evicted, erased = [], [], []
    for ev in audit_log:
        hit = [i for i in ev.node_ids if i in owned]
        if not hit:
            continue
        if ev.op == "summarize":
            summary = ev.node_ids[-1]
            for i in hit:
                if i != summary:
                    summarized.append({"id": i, "summary_id": summary, "seq": ev.seq, "rationale": ev.rationale})
        elif ev.op == "evict":
            for i in hit:
                evicted.append({"id": i, "seq": ev.seq, "policy": ev.policy, "rationale": ev.rationale})
        elif ev.op == "erase":
            for i in hit:
                erased.append({"id": i, "seq": ev.seq, "rationale": ev.rationale})
    eps, delta = store.accountant.totals(user_id) if store.accountant is not None else (0.0, 0.0)
    return {
        "user": user_id,
        "retained": {"count": len(retained), "weight": sum(r["weight"] for r in retained), "nodes": retained},
        "summarized": summarized,
        "evicted": evicted,
        "erased": erased,
        "accountant": {"epsilon": eps, "delta": delta},
    }
