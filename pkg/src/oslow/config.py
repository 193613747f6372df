"""YAML run configuration: schema, defaults and line-anchored validation.

Every key has a default, so an empty file is a valid config. Example::

    seed: 0
    gen:
      suite: small
      num_samples: 1000
    train:
      epochs: 200
      method: gumbel-top-k
    flow:
      base_distribution: auto
    bench:
      methods: [oslow, varsort]
      seeds: [0]
    intervene:
      grid: "-2.5:2.5:21"
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .flow import BASE_FAMILIES, FlowConfig
from .trainer import METHODS, TrainConfig

BENCH_METHODS = ("oslow", "varsort", "gumbel-sinkhorn-st", "soft-sinkhorn")

DEFAULTS: dict = {
    "seed": 0,
    "gen": {"suite": "small", "num_samples": 1000},
    "train": {
        "k": 16,
        "epochs": 200,
        "batch_size": 128,
        "lr_theta": 1e-3,
        "lr_gamma": 1e-2,
        "weight_decay": 1e-2,
        "sigma_init": 0.5,
        "phase_lengths": [5, 1],
        "method": "gumbel-top-k",
        "tau": 0.1,
        "sinkhorn_iters": 50,
        "one_step": False,
        "standardize": True,
    },
    "flow": {
        "hidden_multipliers": [10, 10],
        "num_transforms": 1,
        "base_distribution": "auto",
        "clamp_a": 5.0,
        "clamp_b": 2.5,
    },
    "bench": {"methods": ["oslow", "varsort"], "seeds": [0]},
    "intervene": {"target": 1, "responses": None, "grid": "-2.5:2.5:21", "num_samples": 50, "level": 0.99},
}

CHOICES = {
    ("gen", "suite"): ("small", "large"),
    ("train", "method"): METHODS,
    ("flow", "base_distribution"): ("auto",) + BASE_FAMILIES,
}
LIST_ITEMS = {
    ("train", "phase_lengths"): int,
    ("flow", "hidden_multipliers"): int,
    ("bench", "methods"): str,
    ("bench", "seeds"): int,
    ("intervene", "responses"): int,
}


def _line_index(text: str, source: str) -> dict[tuple, int]:
    """1-based line of every mapping key, keyed by its path."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                sub = path + (key.value,)
                lines[sub] = key.start_mark.line + 1
                walk(value, sub)

    if root is not None:
        walk(root, ())
    return lines


def _coerce(value, kind, where: str, key: str):
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: {key} must be true or false, got {value!r}")
    if kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: {key} must be an integer, got {value!r}")
    if kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: {key} must be a number, got {value!r}")
    if kind is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: {key} must be a string, got {value!r}")
    raise AssertionError(kind)


def validate(raw: dict | None, lines: dict | None = None, source: str = "<config>") -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys and bad types."""
    lines = lines or {}
    cfg = copy.deepcopy(DEFAULTS)
    if raw is None:
        return cfg
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")

    def where(path):
        line = lines.get(path)
        return f"{source}:{line}" if line else source

    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{where((section,))}: unknown key {section!r}")
        if not isinstance(DEFAULTS[section], dict):
            cfg[section] = _coerce(body, int, where((section,)), section)
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{where((section,))}: section {section!r} must be a mapping")
        for key, value in body.items():
            path = (section, key)
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where(path)}: unknown key {key!r} in section {section!r}")
            default = DEFAULTS[section][key]
            if path in LIST_ITEMS:
                if value is None and default is None:
                    cfg[section][key] = None
                    continue
                if not isinstance(value, list):
                    raise ConfigError(f"{where(path)}: {section}.{key} must be a list")
                value = [_coerce(v, LIST_ITEMS[path], where(path), f"{section}.{key}") for v in value]
            else:
                value = _coerce(value, type(default), where(path), f"{section}.{key}")
            if path in CHOICES and value not in CHOICES[path]:
                raise ConfigError(f"{where(path)}: {section}.{key} must be one of {list(CHOICES[path])}, got {value!r}")
            if path == ("bench", "methods"):
                bad = [m for m in value if m not in BENCH_METHODS]
                if bad:
                    raise ConfigError(f"{where(path)}: unknown bench method(s) {bad}; choose from {list(BENCH_METHODS)}")
            cfg[section][key] = value
    try:
        train_config(cfg, d=1)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    text = path.read_text()
    lines = _line_index(text, str(path))
    return validate(yaml.safe_load(text), lines, str(path))


def flow_config(cfg: dict, d: int, noise: str | None = None) -> FlowConfig:
    """``base_distribution: auto`` follows the dataset's noise family when known."""
    opts = dict(cfg["flow"])
    if opts["base_distribution"] == "auto":
        opts["base_distribution"] = "standard-laplace" if noise == "laplace" else "standard-normal"
    return FlowConfig(d, **opts)


def train_config(cfg: dict, d: int, noise: str | None = None, seed: int | None = None) -> TrainConfig:
    opts = dict(cfg["train"])
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, flow=flow_config(cfg, d, noise), **opts)
