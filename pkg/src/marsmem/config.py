"""Run settings from a YAML or JSON file.

Sections map onto the config dataclasses::

    scoring:    ScoringConfig fields
    reflection: ReflectionConfig fields
    dp:         DpConfig fields
    policy:     hysteresis_fraction, stale_after, temporal_importance_ceiling, dp_enabled
    metrics:    MetricWeights fields
    simulation: redaction_mode

Unknown sections or keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .metrics import MetricWeights
from .policies import PolicyConfig
from .privacy_engine import MODE_THRESHOLDS, DpConfig
from .reflection import ReflectionConfig
from .scoring import ScoringConfig

_POLICY_KEYS = ("hysteresis_fraction", "stale_after", "temporal_importance_ceiling", "dp_enabled")
_SECTIONS = ("scoring", "reflection", "dp", "policy", "metrics", "simulation")


class ConfigError(ValueError):
    pass


@dataclass
class Settings:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    weights: MetricWeights = field(default_factory=MetricWeights)
    redaction_mode: str = "standard"

    def with_overrides(self, *, dp_enabled: bool | None = None, lambda_priv: float | None = None) -> "Settings":
        pol = self.policy
        if lambda_priv is not None:
            pol = replace(pol, scoring=replace(pol.scoring, lambda_priv=lambda_priv))
        if dp_enabled is not None:
            pol = replace(pol, dp_enabled=dp_enabled)
        return Settings(pol, self.weights, self.redaction_mode)

    def cell_kwargs(self) -> dict:
        return {
            "config": self.policy,
            "dp_enabled": self.policy.dp_enabled,
            "redaction_mode": self.redaction_mode,
            "weights": self.weights,
        }


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls) if not f.name.startswith("_")}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(extra)}")
    try:
        return cls(**data)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {section!r} settings: {exc}") from exc


def settings_from_dict(doc: dict | None) -> Settings:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    extra = sorted(set(doc) - set(_SECTIONS))
    if extra:
        raise ConfigError(f"unknown config sections: {', '.join(extra)}")
    pol_raw = doc.get("policy") or {}
    bad = sorted(set(pol_raw) - set(_POLICY_KEYS))
    if bad:
        raise ConfigError(f"unknown keys in 'policy': {', '.join(bad)}")
    policy = PolicyConfig(
        scoring=_build(ScoringConfig, doc.get("scoring"), "scoring"),
        reflection=_build(ReflectionConfig, doc.get("reflection"), "reflection"),
        dp=_build(DpConfig, doc.get("dp"), "dp"),
        **pol_raw,
    )
    sim = doc.get("simulation") or {}
    if set(sim) - {"redaction_mode"}:
        raise ConfigError("only 'redaction_mode' is configurable under 'simulation'")
    mode = sim.get("redaction_mode", "standard")
    if mode not in MODE_THRESHOLDS:
        raise ConfigError(f"redaction_mode must be one of {', '.join(MODE_THRESHOLDS)}")
    return Settings(policy, _build(MetricWeights, doc.get("metrics"), "metrics"), mode)


def load_settings(path=None) -> Settings:
    if path is None:
        return Settings()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    return settings_from_dict(doc)
