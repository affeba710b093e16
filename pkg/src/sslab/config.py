"""Run configuration: one JSON document plus dotted ``key=value`` overrides.

A configuration is resolved by filling defaults, applying overrides and
validating every section.  Unknown keys are rejected at every level and
the seed is mandatory.  The resolved document is hashed (SHA-256 of its
canonical JSON form) and echoed in every report.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .dgp import DemandSystem, Design, make_system
from .errors import ConfigError, SslabError
from .harness import GridDesign
from .numdiff import FdScheme
from .oracle import ChannelMode, OracleSettings

DEFAULTS: dict = {
    "system": {"name": "CD3", "params": {}},
    "design": Design().to_dict(),
    "n": 100_000,
    "endogenous": False,
    "channel": ChannelMode.STABLE_COMPOSITION.value,
    "channels": [c.value for c in (ChannelMode.OBSERVABLE, ChannelMode.FROZEN,
                                   ChannelMode.STABLE_COMPOSITION)],
    "grid": GridDesign().to_dict(),
    "fd": None,
    # the plain rule-of-thumb leaves too few effective observations at n = 10^5;
    # a user-supplied estimator section replaces this one as a whole
    "estimator": {"scale": {"p": 7, "x": 4}},
    "oracle": {},
    "B": 199,
    "mc": {"systems": [{"name": "CD3", "params": {}}], "labels": None, "sizes": [100_000],
           "reps": 20},
    "output_dir": "out",
}

_ESTIMATOR_KEYS = {"scale", "outcome_scale", "overrides", "c_min", "roundtrip_tol",
                   "fd_fraction", "min_effective", "grid_points"}
_ORACLE_KEYS = {"method", "mc_draws", "seed", "cond_bandwidth", "outcome_bandwidth", "c_min",
                "bracket_margin"}
_MC_KEYS = {"systems", "sizes", "reps", "labels"}
_SYSTEM_KEYS = {"name", "params"}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in (
                "params", "estimator", "oracle"):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value``; the value is read as JSON, falling back to a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(doc: dict, path: list[str], value: Any) -> None:
    node = doc
    for depth, key in enumerate(path[:-1]):
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {'.'.join(path[:depth])!r}")
        if key not in node or node[key] is None:
            node[key] = {}
        node = node[key]
    if not isinstance(node, dict):
        raise ConfigError(f"cannot set {'.'.join(path)!r}")
    node[path[-1]] = value


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def _system(entry: Any, where: str) -> DemandSystem:
    if not isinstance(entry, dict) or "name" not in entry:
        raise ConfigError(f"{where} must be an object with a 'name'")
    unknown = set(entry) - _SYSTEM_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    params = entry.get("params") or {}
    try:
        return make_system(entry["name"], **copy.deepcopy(params))
    except (SslabError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class RunConfig:
    """Validated run settings together with the resolved JSON document."""

    doc: dict
    seed: int
    system: DemandSystem
    design: Design
    n: int
    endogenous: bool
    channel: ChannelMode
    channels: tuple
    grid: GridDesign
    scheme: FdScheme | None
    estimator: dict
    oracle: OracleSettings
    B: int
    mc_systems: tuple
    mc_labels: tuple
    mc_sizes: tuple
    mc_reps: int
    output_dir: Path

    @property
    def hash(self) -> str:
        return config_hash(self.doc)

    @classmethod
    def from_dict(cls, data: dict, overrides=()) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        data = copy.deepcopy(data)
        for text in overrides:
            path, value = parse_override(text)
            apply_override(data, path, value)
        if "seed" not in data:
            raise ConfigError("configuration must set 'seed'")
        seed = data.pop("seed")
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        doc = _merge(DEFAULTS, data)
        doc["seed"] = seed
        return cls._validate(doc)

    @classmethod
    def _validate(cls, doc: dict) -> "RunConfig":
        try:
            system = _system(doc["system"], "system")
            design = Design.from_dict(doc["design"])
            grid = GridDesign.from_dict(doc["grid"])
            channel = ChannelMode(doc["channel"])
            channels = tuple(ChannelMode(c) for c in doc["channels"])
            scheme = FdScheme.from_dict(doc["fd"]) if doc["fd"] is not None else None
            _check_keys(doc["estimator"], _ESTIMATOR_KEYS, "estimator")
            _check_keys(doc["oracle"], _ORACLE_KEYS, "oracle")
            oracle_kw = dict(doc["oracle"])
            oracle_kw.setdefault("seed", doc["seed"])
            if scheme is not None:
                oracle_kw["scheme"] = scheme
            oracle = OracleSettings(**oracle_kw)
            _check_keys(doc["mc"], _MC_KEYS, "mc")
            mc_systems = tuple(_system(s, f"mc.systems[{k}]")
                               for k, s in enumerate(doc["mc"]["systems"]))
            labels = doc["mc"].get("labels")
            mc_labels = tuple(labels) if labels is not None else tuple(
                s.name for s in mc_systems)
            if len(mc_labels) != len(mc_systems):
                raise ConfigError("mc.labels must match mc.systems in length")
        except ConfigError:
            raise
        except (SslabError, ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        n, B, reps = doc["n"], doc["B"], doc["mc"]["reps"]
        for name, value, low in (("n", n, 1), ("B", B, 1), ("mc.reps", reps, 0)):
            if isinstance(value, bool) or not isinstance(value, int) or value < low:
                raise ConfigError(f"{name} must be an integer >= {low}, got {value!r}")
        sizes = doc["mc"]["sizes"]
        if not isinstance(sizes, list) or not all(
                isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in sizes):
            raise ConfigError("mc.sizes must be a list of positive integers")
        if not isinstance(doc["endogenous"], bool):
            raise ConfigError("endogenous must be true or false")
        if not isinstance(doc["output_dir"], str):
            raise ConfigError("output_dir must be a string")
        try:
            canonical_json(doc)
        except ValueError as exc:
            raise ConfigError(f"configuration is not plain JSON: {exc}") from exc
        return cls(doc=doc, seed=doc["seed"], system=system, design=design, n=n,
                   endogenous=doc["endogenous"], channel=channel, channels=channels,
                   grid=grid, scheme=scheme, estimator=dict(doc["estimator"]), oracle=oracle,
                   B=B, mc_systems=mc_systems, mc_labels=mc_labels, mc_sizes=tuple(sizes),
                   mc_reps=reps, output_dir=Path(doc["output_dir"]))


def load_config(path, overrides=()) -> RunConfig:
    """Read a JSON configuration file and apply ``key=value`` overrides."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {str(path)!r}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(data, overrides)
