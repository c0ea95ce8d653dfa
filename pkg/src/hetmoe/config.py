"""Engine configuration: a single JSON document with dotted-key overrides.

Schema (every key optional; defaults shown by ``hetmoe --print-default-config``)::

    seed                     int, drives dataset generation and training
    dataset.*                DatasetSpec fields; skill_matrix is "default" or "dominant"
    experts[]                name, hidden_dim, base_latency_us, per_item_latency_us,
                             optional seed and skill (nation -> [0, 1])
    router.strategy          rule | pseudo | soft | hard
    router.k, router.tau, router.k_max, router.f_text
    router.rule_table        nation -> expert name
    fusion.mode              concat | weighted
    fusion.d, fusion.m, fusion.gate_scaling, fusion.l2_normalize
    training.*               TrainingConfig fields except seed
    pipeline.*               BenchSettings fields except seed
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path
from typing import Any

from .datagen import DatasetSpec, skill_rows_for
from .experts import DEFAULT_HIDDEN_DIMS, DEFAULT_LATENCIES, NATIONS, ConfigError, ExpertProfile, Registry, default_profiles
from .fusion import ModelSettings
from .pipeline import BenchSettings
from .router import RuleTable
from .trainer import FUSIONS, TrainingConfig

PUBLIC_STRATEGIES = ("rule", "pseudo", "soft", "hard")

_DEFAULT_NAMES = ("alpha", "beta", "gamma")


def default_config() -> dict[str, Any]:
    return {
        "seed": 1,
        "dataset": {
            "n_samples": 50_000,
            "nations": list(NATIONS),
            "positive_rate": 0.5,
            "vocab_size": 400,
            "overlap_tokens": 1,
            "query_len": [2, 4],
            "title_len": [6, 10],
            "skill_matrix": "default",
        },
        "experts": [
            {"name": name, "hidden_dim": dim, "base_latency_us": base, "per_item_latency_us": per}
            for name, dim, (base, per) in zip(_DEFAULT_NAMES, DEFAULT_HIDDEN_DIMS, DEFAULT_LATENCIES)
        ],
        "router": {
            "strategy": "hard",
            "k": 2,
            "tau": None,
            "k_max": None,
            "f_text": 256,
            "rule_table": {"ID": "alpha", "MY": "alpha", "PH": "beta", "SG": "beta", "TH": "gamma", "VN": "gamma"},
        },
        "fusion": {"mode": "concat", "d": 32, "m": 64, "gate_scaling": True, "l2_normalize": False},
        "training": {f.name: f.default for f in fields(TrainingConfig) if f.name != "seed"},
        "pipeline": {f.name: f.default for f in fields(BenchSettings) if f.name != "seed"},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"{where}: unknown configuration key")
        if isinstance(out[key], dict) and key != "rule_table":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def apply_override(cfg: dict, item: str) -> None:
    """``a.b.c=value``; value parsed as JSON, falling back to a plain string."""
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node: Any = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ConfigError(f"{'.'.join(parts[:i + 1])}: bad list index") from None
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise ConfigError(f"{'.'.join(parts[:i + 1])}: unknown configuration key")
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ConfigError(f"{key}: bad list index") from None
    elif isinstance(node, dict) and (last in node or parts[-2:-1] == ["rule_table"]):
        node[last] = value
    else:
        raise ConfigError(f"{key}: unknown configuration key")


def _check(cond: bool, field_path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_path}: {msg}")


def validate(cfg: dict) -> None:
    """Cross-field checks; every message starts with the offending key."""
    _check(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    experts = cfg["experts"]
    _check(isinstance(experts, list) and len(experts) >= 1, "experts", "need at least one expert")
    names = [e.get("name") for e in experts]
    _check(len(set(names)) == len(names), "experts", f"duplicate names {names}")
    for i, e in enumerate(experts):
        _check(isinstance(e.get("hidden_dim"), int) and e["hidden_dim"] >= 2,
               f"experts.{i}.hidden_dim", "must be an integer >= 2")
    r = cfg["router"]
    _check(r["strategy"] in PUBLIC_STRATEGIES, "router.strategy", f"must be one of {PUBLIC_STRATEGIES}")
    _check(isinstance(r["k"], int) and 1 <= r["k"] <= len(experts), "router.k",
           f"must lie in [1, {len(experts)}] (number of experts)")
    if r["tau"] is not None:
        _check(0.0 < r["tau"] < 1.0, "router.tau", "must lie in (0, 1)")
    if r["k_max"] is not None:
        _check(isinstance(r["k_max"], int) and 1 <= r["k_max"] <= r["k"], "router.k_max", "must lie in [1, k]")
    _check(isinstance(r["f_text"], int) and r["f_text"] >= 1, "router.f_text", "must be a positive integer")
    nations = cfg["dataset"]["nations"]
    for c in nations:
        _check(c in r["rule_table"], "router.rule_table", f"no entry for nation {c}")
    for c, name in r["rule_table"].items():
        _check(name in names, f"router.rule_table.{c}", f"unknown expert name {name!r}")
    f = cfg["fusion"]
    _check(f["mode"] in FUSIONS, "fusion.mode", f"must be one of {FUSIONS}")
    for key in ("d", "m"):
        _check(isinstance(f[key], int) and f[key] >= 1, f"fusion.{key}", "must be a positive integer")
    try:
        dataset_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dataset: {exc}") from None
    try:
        training_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None
    bench_settings(cfg)
    registry(cfg)


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = dict(cfg["dataset"])
    d["nations"] = tuple(d["nations"])
    d["query_len"] = tuple(d["query_len"])
    d["title_len"] = tuple(d["title_len"])
    return DatasetSpec(seed=cfg["seed"], **d)


def registry(cfg: dict) -> Registry:
    spec = dataset_spec(cfg)
    entries = cfg["experts"]
    skills = skill_rows_for(spec, len(entries))
    base = default_profiles(skills, [e["hidden_dim"] for e in entries],
                            [(e.get("base_latency_us", 1000), e.get("per_item_latency_us", 10)) for e in entries])
    profiles = []
    for i, (e, p) in enumerate(zip(entries, base)):
        skill = e.get("skill", p.skill)
        missing = [c for c in spec.nations if c not in skill]
        _check(not missing, f"experts.{i}.skill", f"missing nations {missing}")
        profiles.append(ExpertProfile(id=i, name=e["name"], hidden_dim=e["hidden_dim"], skill=dict(skill),
                                      base_latency_us=p.base_latency_us, per_item_latency_us=p.per_item_latency_us,
                                      seed=e.get("seed", p.seed)))
    return Registry(profiles)


def model_settings(cfg: dict, strategy: str | None = None, fusion: str | None = None) -> ModelSettings:
    r, f = cfg["router"], cfg["fusion"]
    names = [e["name"] for e in cfg["experts"]]
    table = RuleTable({c: names.index(n) for c, n in r["rule_table"].items()})
    table.validate(cfg["dataset"]["nations"], len(names))
    return ModelSettings(
        strategy=strategy or r["strategy"], fusion=fusion or f["mode"], k=r["k"], tau=r["tau"],
        k_max=r["k_max"], gate_scaling=f["gate_scaling"], l2_normalize=f["l2_normalize"],
        f_text=r["f_text"], nations=tuple(cfg["dataset"]["nations"]), d=f["d"], m=f["m"],
        rule_table=dict(table),
    )


def training_config(cfg: dict) -> TrainingConfig:
    return TrainingConfig(seed=cfg["seed"], **cfg["training"])


def bench_settings(cfg: dict, mode: str | None = None) -> BenchSettings:
    p = dict(cfg["pipeline"])
    if mode is not None:
        p["mode"] = mode
    return BenchSettings(seed=cfg["seed"], **p)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=False) + "\n"
