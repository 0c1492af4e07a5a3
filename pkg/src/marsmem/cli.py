"""Command-line entry point: run, sweep, verify, explain, receipt, export.

Exit codes: 0 success, 1 failed verification check, 2 invalid input,
3 runtime failure (a scenario script or sweep cell failed).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_settings
from .errors import MarsError, NeverSeen, ScriptFailure, UnknownUser
from .fifa_sim import SCENARIO_ORDER, CellKey, ScenarioType, default_output_root, run_cell, run_sweep
from .metrics import report_csv, sweep_report
from .policies import POLICY_ORDER, PolicyId

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_BUDGETS = (2000, 4000, 8000, 16000, 32000)
DEFAULT_SEEDS = tuple(range(1, 11))


class InputError(ValueError):
    pass


# ------------------------------------------------------------------ flag parsing


def _split(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",")]
    if not all(parts):
        raise InputError(f"empty entry in list {text!r}")
    return parts


def parse_ints(text: str, what: str, minimum: int) -> list[int]:
    """Comma list of integers; ``a-b`` expands to an inclusive range."""
    out = []
    for part in _split(text):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                lo, hi = int(lo), int(hi)
                if hi < lo:
                    raise InputError(f"{what} range {part!r} is empty")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise InputError(f"{what} must be integers, got {part!r}") from exc
    for v in out:
        if v < minimum:
            raise InputError(f"{what} must be at least {minimum}, got {v}")
    return list(dict.fromkeys(out))


def parse_policies(text: str) -> list[PolicyId]:
    try:
        return list(dict.fromkeys(PolicyId.parse(p) for p in _split(text)))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def parse_scenarios(text: str) -> list[ScenarioType]:
    try:
        return list(dict.fromkeys(ScenarioType.parse(s) for s in _split(text)))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _settings(args):
    if args.lambda_priv is not None and args.lambda_priv < 0:
        raise InputError("--lambda-priv must be non-negative")
    dp = None if args.dp is None else args.dp == "on"
    return load_settings(args.config).with_overrides(dp_enabled=dp, lambda_priv=args.lambda_priv)


def _out(args) -> Path:
    return Path(args.out) if args.out else default_output_root()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _cell_flags(args):
    scenario = parse_scenarios(args.scenario)
    policy = parse_policies(args.policy)
    if len(scenario) != 1 or len(policy) != 1:
        raise InputError("a single cell takes exactly one --scenario and one --policy")
    if args.budget < 1:
        raise InputError(f"--budget must be a positive integer, got {args.budget}")
    if args.seed < 0:
        raise InputError(f"--seed must be non-negative, got {args.seed}")
    return scenario[0], policy[0], args.budget, args.seed


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    scenario, policy, budget, seed = _cell_flags(args)
    settings = _settings(args)
    kw = settings.cell_kwargs()
    weights = kw.pop("weights")
    arts = run_cell(scenario, policy, budget, seed, **kw)
    cell_dir = CellKey(scenario.value, policy.value, budget, seed).path(_out(args))
    m = arts.write(cell_dir, weights)
    summary = {k: m[k] for k in ("nc", "gcr", "sra", "pp", "leakage_rate", "perf", "cost") if k in m}
    print(json.dumps({"cell": str(cell_dir), "metrics": summary, "triggers": arts.trigger_stats["triggers"]}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    policies = parse_policies(args.policies) if args.policies else list(POLICY_ORDER)
    budgets = parse_ints(args.budgets, "budgets", 1) if args.budgets else list(DEFAULT_BUDGETS)
    seeds = parse_ints(args.seeds, "seeds", 0) if args.seeds else list(DEFAULT_SEEDS)
    scenarios = parse_scenarios(args.scenarios) if args.scenarios else list(SCENARIO_ORDER)
    if args.jobs < 1:
        raise InputError("--jobs must be at least 1")
    if args.bootstrap < 1:
        raise InputError("--bootstrap must be at least 1")
    settings = _settings(args)
    out = _out(args)
    results = run_sweep(budgets, policies, seeds, scenarios, out=out, jobs=args.jobs, resume=args.resume, **settings.cell_kwargs())
    report = sweep_report(results, settings.weights, n_resamples=args.bootstrap, seed=0)
    report["grid"] = {
        "policies": [p.value for p in policies],
        "budgets": budgets,
        "seeds": seeds,
        "scenarios": [s.value for s in scenarios],
        "cells": len(policies) * len(budgets) * len(seeds),
        "runs": len(results),
    }
    _write_json(out / "report.json", report)
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    print(json.dumps({"report": str(out / "report.json"), "composite_matrix": report["composite_matrix"], "errors": len(report["errors"])}, sort_keys=True))
    for err in report["errors"]:
        print(f"cell failed: {err['cell']}: {err['error']}", file=sys.stderr)
    return EXIT_RUNTIME if report["errors"] else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    if args.instances is not None and args.instances < 1:
        raise InputError("--instances must be at least 1")
    checks = run_checks(args.instances, args.negative_controls, args.seed)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    if args.out:
        _write_json(Path(args.out) / "verify.json", {"passed": ok, "checks": [c.as_dict() for c in checks]})
    return EXIT_OK if ok else EXIT_CHECK


def _replay_store(args):
    scenario, policy, budget, seed = _cell_flags(args)
    settings = _settings(args)
    kw = settings.cell_kwargs()
    kw.pop("weights")
    arts = run_cell(scenario, policy, budget, seed, **kw)
    if args.agent not in arts.stores:
        raise InputError(f"unknown agent {args.agent!r}; agents are {', '.join(sorted(arts.stores))}")
    return arts.stores[args.agent]


def cmd_explain(args) -> int:
    from .audit import explain

    store = _replay_store(args)
    try:
        doc = explain(store.audit, store, args.node)
    except NeverSeen as exc:
        raise InputError(f"node {exc} was never stored by agent {args.agent}") from exc
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_receipt(args) -> int:
    from .privacy_engine import privacy_receipt

    store = _replay_store(args)
    try:
        doc = privacy_receipt(store, store.audit, args.user)
    except UnknownUser as exc:
        raise InputError(f"no data was ever attributed to user {exc}") from exc
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    store = _replay_store(args)
    scenario, policy, budget, seed = _cell_flags(args)
    path = CellKey(scenario.value, policy.value, budget, seed).path(_out(args)) / f"{args.agent}.jsonld"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(store.export_jsonld())
    print(json.dumps({"export": str(path), "nodes": len(store.nodes), "tombstones": len(store.tombstones)}))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _common(p, *, single: bool) -> None:
    if single:
        p.add_argument("--policy", default="hybrid", help="forgetting policy (fifo, lru, priority, reflection, random, hybrid)")
        p.add_argument("--budget", type=int, default=8000, help="token budget per agent store")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--scenario", default="project", help="social, project, learning, crisis or reflection")
    p.add_argument("--config", help="YAML or JSON settings file")
    p.add_argument("--out", help="output directory (default: $MARSMEM_OUT or ./marsmem-out)")
    p.add_argument("--dp", choices=("on", "off"), help="exponential-mechanism tie-breaking in the hybrid policy")
    p.add_argument("--lambda-priv", type=float, help="sensitivity penalty in the density score")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marsmem", description="Budgeted agent memory: simulate, sweep and verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario cell")
    _common(p, single=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a policy x budget x seed grid over scenarios")
    p.add_argument("--policies", help="comma list (default: all six)")
    p.add_argument("--budgets", help="comma list (default: 2000,4000,8000,16000,32000)")
    p.add_argument("--seeds", help="comma list or ranges like 1-10 (default: 1-10)")
    p.add_argument("--scenarios", help="comma list (default: all five)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="reuse cells whose metrics.json already exists")
    p.add_argument("--bootstrap", type=int, default=2000, help="bootstrap resamples for the stats report")
    _common(p, single=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--instances", type=int, help="cap on every randomized corpus size")
    p.add_argument("--negative-controls", action="store_true", help="also run the understated-sensitivity DP control")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write verify.json here")
    p.set_defaults(func=cmd_verify)

    for name, helptext, func in (
        ("explain", "history and removal reason of one node", cmd_explain),
        ("receipt", "privacy receipt for one user", cmd_receipt),
        ("export", "JSON-LD export of one agent store", cmd_export),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p, single=True)
        p.add_argument("--agent", default="a01")
        if name == "explain":
            p.add_argument("--node", required=True)
        if name == "receipt":
            p.add_argument("--user", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ScriptFailure as exc:
        print(f"script failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MarsError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
