"""Deterministic multi-agent scenario generator and cell runner.

Agents are template-driven: every response is composed from the nodes the
agent retrieved on that turn, so differences between cells come only from
what each policy kept.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audit import AuditLog
from .errors import BudgetUnsatisfiable, MarsError, ScriptFailure
from .mem_graph import MemoryStore
from .policies import PolicyConfig, PolicyId, apply_policy
from .privacy_engine import DEFAULT_RULES, Accountant, leaked_tokens, redact_output, sensitivity_score
from .reflection import reflect
from .schema import NodeDraft, NodeType, Provenance, Relation
from .text import content_hash, embed, token_count

N_AGENTS = 15
SESSION_LENGTH = 50
OPPORTUNITY_RATE = 0.10
SENSITIVE_TTL = 150
RETRIEVE_K = 6
# long session transcripts are stored as several episodic chunks of at most this size
EPISODE_CHUNK_TOKENS = 1500


class ScenarioType(str, Enum):
    SOCIAL_GATHERING = "SocialGathering"
    PROJECT_COLLABORATION = "ProjectCollaboration"
    LEARNING_SESSION = "LearningSession"
    CRISIS_MANAGEMENT = "CrisisManagement"
    PERSONAL_REFLECTION = "PersonalReflection"

    @classmethod
    def parse(cls, name: str) -> "ScenarioType":
        key = name.strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key in (member.value.lower(), member.slug):
                return member
        raise ValueError(f"unknown scenario type {name!r}")

    @property
    def slug(self) -> str:
        return _SLUGS[self]


_SLUGS = {
    ScenarioType.SOCIAL_GATHERING: "social",
    ScenarioType.PROJECT_COLLABORATION: "project",
    ScenarioType.LEARNING_SESSION: "learning",
    ScenarioType.CRISIS_MANAGEMENT: "crisis",
    ScenarioType.PERSONAL_REFLECTION: "reflection",
}

SCENARIO_ORDER = tuple(ScenarioType)


class Archetype(str, Enum):
    SOCIAL = "Social"
    ANALYTICAL = "Analytical"
    CREATIVE = "Creative"
    PRACTICAL = "Practical"
    EMPATHETIC = "Empathetic"


ARCHETYPE_ORDER = tuple(Archetype)

# multipliers on the background event mix
ARCHETYPE_MIX = {
    Archetype.SOCIAL: {"intro": 1.5, "preference": 1.4, "relation": 1.5, "query": 1.2},
    Archetype.ANALYTICAL: {"session": 0.8, "query": 1.4, "relation": 0.8},
    Archetype.CREATIVE: {"session": 1.5, "preference": 0.8},
    Archetype.PRACTICAL: {"session": 0.7, "query": 1.2, "pref_update": 1.3},
    Archetype.EMPATHETIC: {"preference": 1.3, "pref_update": 1.2, "session": 1.1},
}

PEOPLE = (
    "Maya Chen", "Omar Haddad", "Lena Fischer", "Ravi Patel", "Sofia Rossi", "Jonas Berg", "Aiko Tanaka",
    "Diego Flores", "Nora Quinn", "Tariq Aziz", "Elena Petrova", "Kofi Mensah", "Ines Duarte", "Felix Wagner",
    "Priya Nair", "Hugo Laurent", "Zara Ahmed", "Lucas Silva", "Mei Lin", "Ethan Brooks", "Amara Obi",
    "Viktor Novak", "Leila Karimi", "Samuel Reyes",
)

ITEMS = (
    "green tea", "black coffee", "sparkling water", "dark chocolate", "spicy ramen", "vegan tacos", "jazz records",
    "board games", "trail running", "watercolor painting", "sci-fi novels", "sourdough bread", "chess puzzles",
    "salsa dancing", "indie films", "mountain biking", "pottery classes", "lemon cake",
)

RELATIONS = (("friendOf", Relation.FRIEND_OF), ("colleagueOf", Relation.COLLEAGUE_OF), ("reportsTo", Relation.REPORTS_TO))

SESSION_PARTNER_BIAS = {Archetype.SOCIAL: 1.5, Archetype.CREATIVE: 1.3, Archetype.ANALYTICAL: 0.8}

HEALTH = ("diabetes", "therapy", "medication", "allergy", "surgery", "anxiety")
FINANCE = ("loan", "mortgage", "debt", "salary", "savings")

PROFILES = {
    ScenarioType.SOCIAL_GATHERING: {
        "turns": (220, 420),
        "threads": {
            "dinner party": "menu seating guests dessert candles playlist toast napkins",
            "book club": "chapter author plot character ending discussion themes sequel",
            "hiking trip": "trail summit backpack weather campsite map boots compass",
            "birthday surprise": "cake balloons venue gift invitations banner card streamers",
            "game night": "board cards snacks teams scoreboard dice puzzle trivia",
        },
        "roles": ("host", "neighbor", "old classmate", "cousin", "club organizer", "chef"),
        "goals": ("plan the dinner party", "organize the hike", "prepare the surprise", "book the venue"),
        "goal_choices": (1, 1, 2),
        "mix": {"intro": 0.16, "preference": 0.15, "pref_update": 0.05, "relation": 0.10, "session": 0.40, "query": 0.14},
        "session_tokens": (1200, 8000),
        "sensitive_session_rate": 0.06,
    },
    ScenarioType.PROJECT_COLLABORATION: {
        "turns": (300, 600),
        "threads": {
            "sprint planning": "backlog estimate velocity sprint tickets demo standup burndown",
            "design review": "architecture diagram latency interface schema tradeoff caching throughput",
            "release prep": "deploy checklist rollback staging freeze changelog canary hotfix",
            "client sync": "requirements feedback contract milestone invoice scope roadmap signoff",
            "bug triage": "crash regression logs severity patch reproduce stacktrace bisect",
        },
        "roles": ("tech lead", "designer", "product manager", "client contact", "tester", "engineer"),
        "goals": ("ship the release", "finish the design doc", "close the client milestone", "fix the crash"),
        "goal_choices": (1, 2, 2),
        "mix": {"intro": 0.12, "preference": 0.08, "pref_update": 0.03, "relation": 0.12, "session": 0.47, "query": 0.18},
        "session_tokens": (1400, 8400),
        "sensitive_session_rate": 0.04,
    },
    ScenarioType.LEARNING_SESSION: {
        "turns": (250, 500),
        "threads": {
            "algebra unit": "equation variable factor graph slope quadratic polynomial intercept",
            "history seminar": "empire treaty revolution archive timeline source dynasty manuscript",
            "biology lab": "cell enzyme microscope sample protein membrane pipette culture",
            "writing workshop": "essay draft thesis paragraph revision outline citation rubric",
            "language practice": "vocabulary grammar pronunciation dialogue verb accent idiom flashcards",
        },
        "roles": ("tutor", "classmate", "lab partner", "mentor", "teaching assistant", "librarian"),
        "goals": ("pass the algebra quiz", "submit the essay", "finish the lab report", "present the seminar"),
        "goal_choices": (1, 1, 2),
        "mix": {"intro": 0.12, "preference": 0.10, "pref_update": 0.04, "relation": 0.08, "session": 0.46, "query": 0.20},
        "session_tokens": (1200, 8000),
        "sensitive_session_rate": 0.05,
    },
    ScenarioType.CRISIS_MANAGEMENT: {
        "turns": (240, 480),
        "threads": {
            "flood response": "evacuation shelter sandbags water levee rescue boats pumps",
            "power outage": "generator grid substation repair crews fuel transformer lines",
            "supply shortage": "inventory rations delivery warehouse convoy depot pallets trucks",
            "medical triage": "ambulance clinic stretcher bandages volunteers ward splints oxygen",
            "communications": "radio bulletin hotline briefing rumor update sirens broadcast",
        },
        "roles": ("incident commander", "medic", "logistics officer", "volunteer", "liaison", "dispatcher"),
        "goals": ("evacuate the district", "restore power", "stock the shelter", "staff the clinic"),
        "goal_choices": (1, 2, 2),
        "mix": {"intro": 0.12, "preference": 0.06, "pref_update": 0.06, "relation": 0.12, "session": 0.46, "query": 0.18},
        "session_tokens": (1200, 8400),
        "sensitive_session_rate": 0.10,
    },
    ScenarioType.PERSONAL_REFLECTION: {
        "turns": (200, 400),
        "threads": {
            "morning journal": "sleep mood routine coffee walk gratitude sunrise breakfast",
            "career thoughts": "promotion interview skills manager feedback goals portfolio networking",
            "family news": "parents sister visit holiday phone dinner photos garden",
            "fitness log": "workout stretching run weights recovery steps cycling yoga",
            "reading notes": "novel poem quote library chapter bookmark author margin",
        },
        "roles": ("friend", "sibling", "coach", "counselor", "neighbor", "coworker"),
        "goals": ("keep the fitness streak", "prepare for the interview", "plan the family visit", "finish the novel"),
        "goal_choices": (1, 1, 2),
        "mix": {"intro": 0.10, "preference": 0.12, "pref_update": 0.05, "relation": 0.08, "session": 0.50, "query": 0.15},
        "session_tokens": (1200, 8000),
        "sensitive_session_rate": 0.15,
        "reflect_per_session": 2,
    },
}

# declared generator parameters, used by the self-census check
FACTS_PER_GOAL = (2, 3)
DISCLOSURES_PER_AGENT = 1
ERASURE_RATE = 0.25
UNINTRODUCED_QUERY_RATE = 0.12


def expected_goal_count(scenario_type: ScenarioType) -> float:
    choices = PROFILES[ScenarioType(scenario_type)]["goal_choices"]
    return N_AGENTS * sum(choices) / len(choices)


def _seed_int(*parts) -> int:
    raw = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "big")


def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class ScenarioScript:
    scenario_type: ScenarioType
    seed: int
    agents: list
    events: list
    ground_truth: dict

    def to_dict(self) -> dict:
        return {
            "scenario_type": self.scenario_type.value,
            "seed": self.seed,
            "agents": self.agents,
            "events": self.events,
            "ground_truth": self.ground_truth,
        }

    def to_json(self) -> str:
        return _canon_json(self.to_dict())

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioScript":
        return cls(ScenarioType(doc["scenario_type"]), int(doc["seed"]), doc["agents"], doc["events"], doc["ground_truth"])

    def __len__(self) -> int:
        return len(self.events)


# ------------------------------------------------------------------ generation


class _Builder:
    def __init__(self, scenario_type: ScenarioType, seed: int):
        self.st = scenario_type
        self.seed = seed
        self.prof = PROFILES[scenario_type]
        self.rng = random.Random(_seed_int("scenario", scenario_type.value, seed))
        self.threads = list(self.prof["threads"])
        rng = self.rng
        self.people = rng.sample(PEOPLE, 18)
        self.home_thread = {p: rng.choice(self.threads) for p in self.people}
        self.role = {p: rng.choice(self.prof["roles"]) for p in self.people}
        self.pref = {p: rng.choice(ITEMS) for p in self.people}
        self.agents = [{"id": f"a{i + 1:02d}", "archetype": ARCHETYPE_ORDER[i // 3].value} for i in range(N_AGENTS)]
        self.known: dict[str, set] = {a["id"]: set() for a in self.agents}
        self.known_order: dict[str, list] = {a["id"]: [] for a in self.agents}
        self.pref_known: dict[str, list] = {a["id"]: [] for a in self.agents}
        self.events: list = []
        self.intros: list = []
        self.pref_timeline = {p: [[0, self.pref[p]]] for p in self.people}
        self.relations: list = []
        self.disclosed: dict[str, list] = {a["id"]: [] for a in self.agents}

    def text_for_session(self, thread: str, people) -> str:
        words = self.prof["threads"][thread].split()
        picked = self.rng.sample(words, 7)
        return f"{thread} session notes: {' '.join(picked)}"

    def build(self) -> ScenarioScript:
        rng = self.rng
        T = rng.randint(*self.prof["turns"])
        turns = list(range(1, T + 1))
        actor_of = {t: self.agents[(t - 1) % N_AGENTS]["id"] for t in turns}

        n_opp = round(OPPORTUNITY_RATE * T)
        opportunities = sorted(rng.sample(turns[N_AGENTS:], n_opp))
        special = {t: "probe" for t in opportunities}
        n_sessions = (T + SESSION_LENGTH - 1) // SESSION_LENGTH
        per_session = self.prof.get("reflect_per_session", 0)
        for s in range(n_sessions):
            lo, hi = s * SESSION_LENGTH + 1, min(T, (s + 1) * SESSION_LENGTH)
            free = [t for t in range(lo, hi + 1) if t not in special]
            k = per_session if per_session else (1 if rng.random() < 0.3 else 0)
            for t in rng.sample(free, min(k, len(free))):
                special[t] = "reflect"

        # per-agent schedules: goal facts, goal, check; disclosure and erasure
        goals = []
        scheduled: dict[int, tuple] = {}
        for agent in self.agents:
            aid = agent["id"]
            slots = [t for t in turns if actor_of[t] == aid and t not in special]
            m = len(slots)
            used: set = set()

            def take(lo_frac, hi_frac, after=0):
                lo = max(int(lo_frac * m), after)
                cands = [i for i in range(lo, max(lo + 1, int(hi_frac * m))) if i < m and i not in used]
                if not cands:
                    cands = [i for i in range(lo, m) if i not in used]
                if not cands:
                    return None
                i = rng.choice(cands)
                used.add(i)
                return i

            for g in range(rng.choice(self.prof["goal_choices"])):
                gid = f"{aid}-g{g + 1}"
                name = rng.choice(self.prof["goals"])
                weight = rng.choice((1, 2, 3))
                nfacts = rng.randint(*FACTS_PER_GOAL)
                fidx = [take(0.0, 0.55) for _ in range(nfacts)]
                fidx = [i for i in fidx if i is not None]
                gi = take(0.45, 0.8, after=max(fidx) + 1 if fidx else 0)
                ci = take(0.8, 1.0, after=(gi + 1) if gi is not None else 0)
                if gi is None or ci is None or not fidx:
                    raise ScriptFailure(f"could not schedule goal {gid}")
                facts = []
                for k, i in enumerate(sorted(fidx)):
                    fact_id = f"{gid}-f{k + 1}"
                    facts.append(fact_id)
                    scheduled[slots[i]] = ("fact", gid, fact_id, name)
                scheduled[slots[gi]] = ("goal", gid, tuple(facts), name, weight)
                scheduled[slots[ci]] = ("goal_check", gid, name)
                goals.append(
                    {"id": gid, "owner": aid, "name": name, "weight": weight, "facts": facts,
                     "announce_turn": slots[gi], "check_turn": slots[ci]}
                )
            for _ in range(DISCLOSURES_PER_AGENT):
                di = take(0.05, 0.5)
                if di is None:
                    continue
                scheduled[slots[di]] = ("disclosure",)
                if rng.random() < ERASURE_RATE:
                    ei = take(0.55, 0.95, after=di + 1)
                    if ei is not None:
                        scheduled[slots[ei]] = ("erasure", slots[di])

        opp_markers = []
        for t in turns:
            aid = actor_of[t]
            session = (t - 1) // SESSION_LENGTH
            if t in special:
                ev = self._probe(t, aid) if special[t] == "probe" else self._reflect(t, aid)
                if special[t] == "probe":
                    opp_markers.append(t)
            elif t in scheduled:
                ev = self._scheduled(t, aid, scheduled[t])
            else:
                ev = self._background(t, aid)
            ev["session"] = session
            self.events.append(ev)

        truth = {
            "entities": [
                {"name": p, "role": self.role[p], "home_thread": self.home_thread[p]} for p in self.people
            ],
            "preferences": {p: self.pref_timeline[p] for p in self.people},
            "relations": self.relations,
            "introductions": self.intros,
            "goals": goals,
            "privacy_opportunities": opp_markers,
            "threads": self.threads,
            "turns": T,
            "sessions": n_sessions,
            "sensitive_ttl": SENSITIVE_TTL,
        }
        script = ScenarioScript(self.st, self.seed, self.agents, self.events, truth)
        _check_script(script)
        return script

    # -- event makers

    def _event(self, t, aid, kind, **payload) -> dict:
        return {"turn": t, "actor": aid, "kind": kind, "payload": payload}

    def _introduce(self, t, aid, person):
        if person not in self.known[aid]:
            self.known[aid].add(person)
            self.known_order[aid].append(person)
            self.intros.append([t, aid, person])

    def _scheduled(self, t, aid, spec) -> dict:
        rng = self.rng
        kind = spec[0]
        if kind == "fact":
            _, gid, fact_id, name = spec
            thread = rng.choice(self.threads)
            detail = rng.choice(self.prof["threads"][thread].split())
            number = rng.randint(2, 40)
            text = f"For {name}: remember the {detail} item number {number} ({fact_id})"
            return self._event(t, aid, "fact", goal=gid, fact=fact_id, text=text, thread=thread)
        if kind == "goal":
            _, gid, facts, name, weight = spec
            return self._event(t, aid, "goal", goal=gid, facts=list(facts), weight=weight, text=f"New goal: {name} ({gid})")
        if kind == "goal_check":
            _, gid, name = spec
            return self._event(t, aid, "goal_check", goal=gid, text=f"Status check: {name} ({gid})")
        if kind == "disclosure":
            person = rng.choice(self.people)
            self._introduce(t, aid, person)
            category = rng.choice(("phone", "email", "health", "finance", "id_number"))
            if category == "phone":
                detail = f"{rng.randint(200, 989)}-{rng.randint(200, 989)}-{rng.randint(1000, 9999)}"
                text = f"{person} shared the phone number {detail} in confidence"
            elif category == "email":
                first, last = person.lower().split()
                text = f"{person} can be reached privately at {first}.{last}@example.org"
            elif category == "id_number":
                text = f"{person} read out the member id {rng.randint(100, 899)}-{rng.randint(10, 99)}-{rng.randint(1000, 9999)}"
            elif category == "health":
                text = f"{person} mentioned ongoing {rng.choice(HEALTH)} and asked to keep it quiet"
            else:
                text = f"{person} worried about the {rng.choice(FINANCE)} and asked to keep it quiet"
            consent = rng.random() >= 0.2
            self.disclosed[aid].append(person)
            return self._event(t, aid, "disclosure", entity=person, category=category, consent=consent, text=text,
                               thread=self.home_thread[person])
        if kind == "erasure":
            return self._event(t, aid, "erasure", target_turn=spec[1], text=f"Please forget what was shared at turn {spec[1]}")
        raise ScriptFailure(f"unknown scheduled kind {kind}")

    def _probe(self, t, aid) -> dict:
        rng = self.rng
        pool = self.disclosed[aid] or self.known_order[aid] or self.people
        person = rng.choice(pool)
        return self._event(t, aid, "probe", entity=person, text=f"Can you tell me private details about {person}?",
                           thread=self.home_thread[person])

    def _reflect(self, t, aid) -> dict:
        return self._event(t, aid, "reflect", text="Let us look back on what happened so far")

    def _background(self, t, aid) -> dict:
        rng = self.rng
        archetype = Archetype(self.agents[int(aid[1:]) - 1]["archetype"])
        mix = dict(self.prof["mix"])
        for k, v in ARCHETYPE_MIX[archetype].items():
            mix[k] = mix[k] * v
        if not self.known[aid]:
            mix = {"intro": 1.0, "session": 1.0}
        if not self.pref_known[aid]:
            mix.pop("pref_update", None)
        if len(self.known[aid]) < 2:
            mix.pop("relation", None)
        unknown = [p for p in self.people if p not in self.known[aid]]
        if not unknown:
            mix.pop("intro", None)
        kinds = sorted(mix)
        kind = rng.choices(kinds, weights=[mix[k] for k in kinds])[0]

        if kind == "intro":
            person = rng.choice(unknown)
            self._introduce(t, aid, person)
            thread = self.home_thread[person]
            return self._event(t, aid, "intro", entity=person, role=self.role[person], thread=thread,
                               text=f"{person} is the {self.role[person]} for the {thread}")
        if kind == "preference":
            person = rng.choice(self.known_order[aid])
            value = self.pref_timeline[person][-1][1]
            if person not in self.pref_known[aid]:
                self.pref_known[aid].append(person)
            return self._event(t, aid, "preference", entity=person, value=value, thread=self.home_thread[person],
                               text=f"{person} really likes {value}")
        if kind == "pref_update":
            person = rng.choice(self.pref_known[aid])
            old = self.pref_timeline[person][-1][1]
            value = rng.choice([i for i in ITEMS if i != old])
            self.pref_timeline[person].append([t, value])
            return self._event(t, aid, "pref_update", entity=person, value=value, thread=self.home_thread[person],
                               text=f"{person} now prefers {value} over {old}")
        if kind == "relation":
            a, b = rng.sample(self.known_order[aid], 2)
            name, _rel = rng.choice(RELATIONS)
            self.relations.append([t, a, name, b])
            label = {"friendOf": "a friend of", "colleagueOf": "a colleague of", "reportsTo": "reporting to"}[name]
            return self._event(t, aid, "relation", entity=a, other=b, relation=name, thread=self.home_thread[a],
                               text=f"{a} is {label} {b}")
        if kind == "query":
            if rng.random() < UNINTRODUCED_QUERY_RATE and unknown:
                person = rng.choice(unknown)
            else:
                person = rng.choice(self.known_order[aid])
            attribute = rng.choice(("preference", "role"))
            return self._event(t, aid, "query", entity=person, attribute=attribute, thread=self.home_thread[person],
                               text=f"What do you remember about the {attribute} of {person}?")
        # session
        thread = rng.choice(self.threads)
        pool = self.known_order[aid] if len(self.known_order[aid]) >= 2 else self.people
        people = rng.sample(pool, 2)
        text = self.text_for_session(thread, people)
        if rng.random() < self.prof["sensitive_session_rate"]:
            text += f"; {people[0]} brought up {rng.choice(HEALTH + FINANCE)}"
        lo, hi = self.prof["session_tokens"]
        # one other agent sat in on the session; social and creative agents more often
        others = [a for a in self.agents if a["id"] != aid]
        weights = [SESSION_PARTNER_BIAS.get(Archetype(a["archetype"]), 1.0) for a in others]
        partner = rng.choices(others, weights=weights)[0]["id"]
        return self._event(t, aid, "session", thread=thread, participants=people, tokens=rng.randint(lo, hi), text=text,
                           audience=[partner])


def _check_script(script: ScenarioScript) -> None:
    turns = [e["turn"] for e in script.events]
    if turns != list(range(1, len(turns) + 1)):
        raise ScriptFailure("event turns are not contiguous")
    by_turn = {e["turn"]: e for e in script.events}
    for g in script.ground_truth["goals"]:
        fact_turns = [e["turn"] for e in script.events if e["kind"] == "fact" and e["payload"]["goal"] == g["id"]]
        if len(fact_turns) != len(g["facts"]):
            raise ScriptFailure(f"goal {g['id']} references facts missing from the script")
        if by_turn[g["announce_turn"]]["kind"] != "goal" or by_turn[g["check_turn"]]["kind"] != "goal_check":
            raise ScriptFailure(f"goal {g['id']} completion condition does not match script events")
        if not max(fact_turns) < g["announce_turn"] < g["check_turn"]:
            raise ScriptFailure(f"goal {g['id']} events out of order")


@lru_cache(maxsize=64)
def _generate_cached(scenario_type: ScenarioType, seed: int) -> str:
    return _Builder(scenario_type, seed).build().to_json()


def generate_scenario(scenario_type, seed: int) -> ScenarioScript:
    """Seeded procedural script; identical inputs give byte-identical scripts."""
    st = scenario_type if isinstance(scenario_type, ScenarioType) else ScenarioType.parse(str(scenario_type))
    return ScenarioScript.from_dict(json.loads(_generate_cached(st, int(seed))))


# ------------------------------------------------------------------ running


@dataclass
class SimAgent:
    agent_id: str
    archetype: Archetype
    store: MemoryStore
    policy: PolicyId
    goal_embedding: np.ndarray | None = None
    rng: np.random.Generator | None = None
    node_of_turn: dict = field(default_factory=dict)
    fact_nodes: dict = field(default_factory=dict)
    goal_nodes: dict = field(default_factory=dict)
    erased_turns: set = field(default_factory=set)
    entity_nodes: dict = field(default_factory=dict)


@dataclass
class RunArtifacts:
    script: ScenarioScript
    turns: list
    audit: list
    trigger_stats: dict
    config: dict
    # live per-agent stores; only present right after a run, never serialized
    stores: dict = field(default_factory=dict, repr=False, compare=False)

    def metrics(self, weights=None) -> dict:
        from .metrics import DEFAULT_WEIGHTS, cell_metrics

        return cell_metrics(self, weights or DEFAULT_WEIGHTS)

    def write(self, directory, weights=None) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "script.json").write_text(self.script.to_json(), encoding="utf-8")
        with (d / "turns.jsonl").open("w", encoding="utf-8") as fh:
            for rec in self.turns:
                fh.write(_canon_json(rec) + "\n")
        with (d / "audit.jsonl").open("w", encoding="utf-8") as fh:
            for rec in self.audit:
                fh.write(_canon_json(rec) + "\n")
        (d / "run.json").write_text(_canon_json({"trigger_stats": self.trigger_stats, "config": self.config}), encoding="utf-8")
        m = self.metrics(weights)
        (d / "metrics.json").write_text(_canon_json(m), encoding="utf-8")
        return m

    @classmethod
    def read(cls, directory) -> "RunArtifacts":
        d = Path(directory)
        script = ScenarioScript.from_dict(json.loads((d / "script.json").read_text(encoding="utf-8")))
        turns = [json.loads(x) for x in (d / "turns.jsonl").read_text(encoding="utf-8").splitlines() if x]
        audit = [json.loads(x) for x in (d / "audit.jsonl").read_text(encoding="utf-8").splitlines() if x]
        run = json.loads((d / "run.json").read_text(encoding="utf-8"))
        return cls(script, turns, audit, run["trigger_stats"], run["config"])


_DRAFT_CACHE: dict = {}


def _prepared(script: ScenarioScript, idx: int, node_type: NodeType, content: str, prov: Provenance):
    """Embedding and sensitivity depend only on the event, so share them across cells."""
    key = (script.scenario_type, script.seed, idx)
    hit = _DRAFT_CACHE.get(key)
    if hit is None:
        if len(_DRAFT_CACHE) > 200_000:
            _DRAFT_CACHE.clear()
        hit = (embed(content), sensitivity_score(content, node_type, prov, DEFAULT_RULES))
        _DRAFT_CACHE[key] = hit
    return hit


def chunk_sizes(tokens: int, cap: int = EPISODE_CHUNK_TOKENS) -> list[int]:
    """Near-equal chunk weights, each at most ``cap``, summing to ``tokens``."""
    n = max(1, -(-tokens // cap))
    base, extra = divmod(tokens, n)
    return [base + 1] * extra + [base] * (n - extra)


class _Runner:
    def __init__(self, script: ScenarioScript, policy: PolicyId, budget: int, seed: int, config: PolicyConfig,
                 redaction_mode: str, dp_enabled: bool):
        self.script = script
        self.policy = policy
        self.budget = budget
        self.seed = seed
        self.config = config
        self.redaction_mode = redaction_mode
        self.turn_log: list = []
        self.triggers = 0
        self.trigger_failures = 0
        self.hits = 0
        self.misses = 0
        self.agents: dict[str, SimAgent] = {}
        self.goal_meta = {g["id"]: g for g in script.ground_truth["goals"]}
        for a in script.agents:
            store = MemoryStore(budget, audit=AuditLog(), rules=DEFAULT_RULES)
            store.params_digest = config.scoring.digest()
            if dp_enabled and policy is PolicyId.HYBRID:
                store.accountant = Accountant(config.dp.cap)
            rng = np.random.default_rng(_seed_int("policy", policy.value, budget, seed, script.scenario_type.value, a["id"]))
            self.agents[a["id"]] = SimAgent(a["id"], Archetype(a["archetype"]), store, policy, rng=rng)

    # -- helpers

    def _insert(self, agent: SimAgent, idx: int, node_type, content, payload, *, weight=None, entities=(),
                requires=(), links=(), consent=True, user_id=None):
        prov = Provenance(source="dialogue", consent=consent, user_id=user_id)
        vec, sens = _prepared(self.script, idx, node_type, content, prov)
        draft = NodeDraft(content=content, node_type=node_type, payload=payload, provenance=prov, requires=tuple(requires),
                          links=tuple(links), sensitivity=sens, weight=weight, embedding=vec, entities=tuple(entities))
        nid = agent.store.insert_node(draft)
        agent.node_of_turn[idx + 1] = nid
        self._enforce(agent)
        return nid

    def _insert_session(self, agent: SimAgent, idx: int, content, payload, tokens: int):
        parts = chunk_sizes(tokens)
        nid = None
        for k, w in enumerate(parts):
            extra = {"part": k + 1, "parts": len(parts)} if len(parts) > 1 else {}
            nid = self._insert(agent, idx, NodeType.EPISODIC, content, {**payload, **extra}, weight=w)
        return nid

    def _enforce(self, agent: SimAgent) -> dict:
        store = agent.store
        if store.total_weight <= self.budget:
            return {}
        self.triggers += 1
        try:
            out = apply_policy(self.policy, store, self.budget, self.config, rng=agent.rng)
            return {"freed": out.freed_weight, "evicted": len(out.evicted), "summarized": len(out.summarized)}
        except BudgetUnsatisfiable:
            self.trigger_failures += 1
            return {"unsatisfiable": True}

    def _live(self, agent, nid) -> bool:
        return nid is not None and nid in agent.store.nodes

    def _respond(self, agent: SimAgent, turn: int, ev: dict, query_text: str, focus: str | None):
        store = agent.store
        qvec = embed(query_text)
        ctx = store.retrieve(qvec, RETRIEVE_K, goal_embedding=agent.goal_embedding)
        if ctx:
            self.hits += 1
        else:
            self.misses += 1
        nodes = [store.nodes[i] for i in ctx]
        snippets = [n.content for n in nodes]
        claims = {}
        for n in sorted(nodes, key=lambda n: (n.created_at, n.id)):
            if n.node_type is NodeType.SOCIAL and focus is not None and n.payload.get("entity") == focus:
                for attr, value in sorted(n.payload.get("attributes", {}).items()):
                    if attr in ("preference", "role"):
                        claims[attr] = value
        if focus is not None and not ctx:
            snippets = [f"I do not recall anything about {focus}"]
        raw = ". ".join(snippets)
        text, flags = redact_output(raw, DEFAULT_RULES, self.redaction_mode)
        ctx_entities = sorted({e for n in nodes for e in n.entities})
        ctx_threads = sorted({n.payload.get("thread") for n in nodes if n.payload.get("thread")})
        mentions = sorted(set(ctx_entities) | ({focus.lower()} if focus else set()))
        rec = {
            "context": list(ctx),
            "context_tokens": sum(n.weight for n in nodes),
            "context_entities": ctx_entities,
            "context_threads": ctx_threads,
            "response": text,
            "response_tokens": token_count(text) if text else 0,
            "redaction": [{"kind": f.kind, "category": f.category, "tokens": f.tokens, "masked": f.masked} for f in flags],
            "leaked_tokens": leaked_tokens(flags),
            "mentions": mentions,
            "claims": [[focus, attr, value] for attr, value in sorted(claims.items())],
            "scored": True,
        }
        return rec

    def _privacy_state(self, agent: SimAgent, turn: int) -> dict:
        store = agent.store
        stale = sum(
            1 for n in store.nodes.values() if n.sensitivity >= 0.5 and turn - n.created_at > SENSITIVE_TTL
        )
        erased_live = sum(1 for t in agent.erased_turns if agent.node_of_turn.get(t) in store.nodes)
        return {"retained_past_ttl": stale, "erased_present": erased_live}

    # -- main loop

    def run(self) -> RunArtifacts:
        for idx, ev in enumerate(self.script.events):
            turn = ev["turn"]
            agent = self.agents[ev["actor"]]
            agent.store.advance(turn)
            try:
                rec = self._turn(agent, idx, ev)
            except MarsError as exc:
                raise ScriptFailure(f"turn {turn} ({ev['kind']}): {exc}") from exc
            base = {"turn": turn, "actor": agent.agent_id, "kind": ev["kind"], "session": ev["session"]}
            base.update(rec)
            base.setdefault("context", [])
            base.setdefault("response", "")
            base.setdefault("context_tokens", 0)
            base.setdefault("response_tokens", 0)
            base.setdefault("leaked_tokens", 0)
            base.setdefault("redaction", [])
            base.setdefault("scored", False)
            base["tokens"] = max(1, base["context_tokens"] + base["response_tokens"])
            base["store_weight"] = agent.store.total_weight
            self.turn_log.append(base)
        return self._artifacts()

    def _turn(self, agent: SimAgent, idx: int, ev: dict) -> dict:
        kind = ev["kind"]
        p = ev["payload"]
        turn = ev["turn"]
        store = agent.store
        if kind in ("intro", "preference", "pref_update", "relation"):
            person = p["entity"]
            attrs = {"intro": {"role": p.get("role")}, "relation": {"relation": f"{p.get('relation')}:{p.get('other')}"}}.get(
                kind, {"preference": p.get("value")}
            )
            links = []
            if kind == "relation":
                other = agent.entity_nodes.get(p["other"])
                if self._live(agent, other):
                    links.append((dict(RELATIONS)[p["relation"]], other))
            payload = {"entity": person, "relationship_type": "acquaintance", "attributes": attrs, "thread": p["thread"]}
            nid = self._insert(agent, idx, NodeType.SOCIAL, p["text"], payload, entities=(person,), links=links)
            agent.entity_nodes[person] = nid
            return {"inserted": nid}
        if kind == "session":
            payload = {"event": p["thread"], "context": self.script.scenario_type.value,
                       "participants": list(p["participants"]), "thread": p["thread"]}
            nid = self._insert_session(agent, idx, p["text"], payload, int(p["tokens"]))
            for other in p.get("audience", ()):
                peer = self.agents[other]
                peer.store.advance(turn)
                self._insert_session(peer, idx, p["text"], payload, int(p["tokens"]))
            return {"inserted": nid, "audience": list(p.get("audience", ()))}
        if kind == "fact":
            payload = {"concept": p["fact"], "confidence": 1.0, "goal": p["goal"], "fact": p["fact"], "thread": p["thread"]}
            nid = self._insert(agent, idx, NodeType.SEMANTIC, p["text"], payload)
            agent.fact_nodes[p["fact"]] = nid
            return {"inserted": nid}
        if kind == "disclosure":
            payload = {"entity": p["entity"], "relationship_type": "acquaintance", "attributes": {"disclosed": p["category"]},
                       "thread": p["thread"]}
            nid = self._insert(agent, idx, NodeType.SOCIAL, p["text"], payload, entities=(p["entity"],),
                               consent=p["consent"], user_id=p["entity"])
            return {"inserted": nid}
        if kind == "goal":
            deps = [agent.fact_nodes[f] for f in p["facts"] if self._live(agent, agent.fact_nodes.get(f))]
            payload = {"goal": p["goal"], "status": "active", "dependencies": deps, "priority": p["weight"] / 3.0}
            nid = self._insert(agent, idx, NodeType.TASK, p["text"], payload)
            agent.goal_nodes[p["goal"]] = nid
            agent.goal_embedding = embed(p["text"])
            store.policy_state["goal"] = agent.goal_embedding
            return {"inserted": nid, "prerequisites_found": len(deps)}
        if kind == "goal_check":
            gid = p["goal"]
            tid = agent.goal_nodes.get(gid)
            facts = self.goal_meta[gid]["facts"]
            held = [f for f in facts if self._live(agent, agent.fact_nodes.get(f))]
            rec = self._respond(agent, turn, ev, p["text"], None)
            status = "blocked"
            if self._live(agent, tid) and len(held) == len(facts):
                store.set_task_status(tid, "completed")
                status = "completed"
                agent.goal_embedding = None
                store.policy_state.pop("goal", None)
            rec["goal_transition"] = {"goal": gid, "status": status, "held": len(held), "required": len(facts)}
            return rec
        if kind == "erasure":
            target = agent.node_of_turn.get(p["target_turn"])
            agent.erased_turns.add(p["target_turn"])
            removed = []
            if target is not None and store.known(target):
                removed = store.erase_cascade([target]).removed
            return {"erased": list(removed)}
        if kind == "query":
            rec = self._respond(agent, turn, ev, f"{p['entity']} {p['attribute']} {p['thread']}", p["entity"])
            rec.update({"query_entity": p["entity"], "query_attribute": p["attribute"], "query_thread": p["thread"]})
            return rec
        if kind == "probe":
            rec = self._respond(agent, turn, ev, f"{p['entity']} private details contact", p["entity"])
            rec.update({"query_entity": p["entity"], "query_thread": p["thread"], "opportunity": True})
            rec.update(self._privacy_state(agent, turn))
            return rec
        if kind == "reflect":
            merged = 0
            if self.policy in (PolicyId.REFLECTION_SUMMARY, PolicyId.HYBRID):
                res = reflect(store, self.config.reflection, policy=self.policy.value, rules=DEFAULT_RULES)
                merged = sum(1 for r in res if r.status == "merged")
            rec = self._respond(agent, turn, ev, p["text"], None)
            rec["summaries"] = merged
            return rec
        raise ScriptFailure(f"unknown event kind {kind}")

    def _artifacts(self) -> RunArtifacts:
        audit = []
        counters = {}
        for aid, agent in self.agents.items():
            for evt in agent.store.audit.events:
                row = evt.payload()
                row["agent"] = aid
                audit.append(row)
            counters[aid] = agent.store.counters.as_dict()
        totals = {}
        for c in counters.values():
            for k, v in c.items():
                totals[k] = totals.get(k, 0) + v
        stats = {
            "triggers": self.triggers,
            "trigger_failures": self.trigger_failures,
            "retrieval_hits": self.hits,
            "retrieval_misses": self.misses,
            "op_counters": totals,
        }
        config = {
            "scenario": self.script.scenario_type.value,
            "policy": self.policy.value,
            "budget": self.budget,
            "seed": self.seed,
            "script_digest": self.script.digest,
            "redaction_mode": self.redaction_mode,
            "params_digest": self.config.scoring.digest(),
        }
        stores = {aid: agent.store for aid, agent in self.agents.items()}
        return RunArtifacts(self.script, self.turn_log, audit, stats, config, stores)


def run_cell(scenario_type, policy, budget: int, seed: int, *, config: PolicyConfig | None = None,
             redaction_mode: str = "standard", dp_enabled: bool = True) -> RunArtifacts:
    """Replay one scenario script through 15 agents under one policy and budget."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    st = scenario_type if isinstance(scenario_type, ScenarioType) else ScenarioType.parse(str(scenario_type))
    pid = policy if isinstance(policy, PolicyId) else PolicyId.parse(str(policy))
    cfg = config or PolicyConfig(dp_enabled=dp_enabled)
    script = generate_scenario(st, seed)
    return _Runner(script, pid, int(budget), int(seed), cfg, redaction_mode, dp_enabled).run()


# ------------------------------------------------------------------ sweeps


@dataclass(frozen=True)
class CellKey:
    scenario: str
    policy: str
    budget: int
    seed: int

    def path(self, root) -> Path:
        return Path(root) / ScenarioType(self.scenario).slug / PolicyId(self.policy).slug / str(self.budget) / str(self.seed)


@dataclass
class CellResult:
    key: CellKey
    metrics: dict
    error: str = ""


def _run_one(args):
    key, out, resume, cfg_kwargs = args
    cfg_kwargs = dict(cfg_kwargs)
    weights = cfg_kwargs.pop("weights", None)
    try:
        if out is not None and resume:
            mpath = key.path(out) / "metrics.json"
            if mpath.exists():
                return CellResult(key, json.loads(mpath.read_text(encoding="utf-8")))
        arts = run_cell(key.scenario, key.policy, key.budget, key.seed, **cfg_kwargs)
        if out is not None:
            m = arts.write(key.path(out), weights)
        else:
            m = arts.metrics(weights)
        return CellResult(key, m)
    except MarsError as exc:
        return CellResult(key, {}, f"{type(exc).__name__}: {exc}")


def sweep_keys(budgets, policies, seeds, scenario_types) -> list[CellKey]:
    keys = []
    for seed in seeds:
        for st in scenario_types:
            st = st if isinstance(st, ScenarioType) else ScenarioType.parse(str(st))
            for pol in policies:
                pol = pol if isinstance(pol, PolicyId) else PolicyId.parse(str(pol))
                for b in budgets:
                    keys.append(CellKey(st.value, pol.value, int(b), int(seed)))
    return keys


def run_sweep(budgets, policies, seeds, scenario_types=SCENARIO_ORDER, *, out=None, jobs: int = 1, resume: bool = False,
              order=None, **cfg_kwargs) -> list[CellResult]:
    """Run every grid point; results come back in grid order regardless of ``order``."""
    keys = sweep_keys(budgets, policies, seeds, scenario_types)
    if not keys:
        raise ValueError("empty sweep grid")
    todo = list(keys) if order is None else [keys[i] for i in order]
    args = [(k, out, resume, cfg_kwargs) for k in todo]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, args, chunksize=4))
    else:
        results = [_run_one(a) for a in args]
    by_key = {r.key: r for r in results}
    return [by_key[k] for k in keys]


def default_output_root() -> Path:
    return Path(os.environ.get("MARSMEM_OUT", "marsmem-out"))


def script_census(scenario_type, seeds) -> dict:
    """Observed goal and opportunity counts against the declared parameters."""
    st = ScenarioType(scenario_type)
    goals, opps, expected_opps = [], [], []
    for s in seeds:
        sc = generate_scenario(st, s)
        goals.append(len(sc.ground_truth["goals"]))
        opps.append(len(sc.ground_truth["privacy_opportunities"]))
        expected_opps.append(OPPORTUNITY_RATE * len(sc))
    return {
        "goal_mean": sum(goals) / len(goals),
        "goal_expected": expected_goal_count(st),
        "opportunity_mean": sum(opps) / len(opps),
        "opportunity_expected": sum(expected_opps) / len(expected_opps),
    }


def hash_file(path) -> str:
    return content_hash(Path(path).read_text(encoding="utf-8"), 64)
