"""Flat-key TOML configuration shared by the CLI and the experiment runner."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .audit import CHECK_IDS
from .taxonomy import FAULT_CLASSES, REASONING_FAULTS

DEFAULTS = {
    "executor": "strong",
    "seed": 0,
    "topology_seeds": [0, 1],
    "n_services": 10,
    "replicas": 4,
    "n_nodes": 6,
    "fault_classes": list(FAULT_CLASSES),
    "reasoning_faults": list(REASONING_FAULTS),
    "inject_faults": True,
    "repeats": 3,
    "variant": "full",
    "workers": 1,
    "memory": True,
    "memory_wave": 13,
    "oracle": False,
    "baselines": True,
    "router.tau": 0.95,
    "router.epsilon": 0.10,
    "repair.delta": 0.05,
    "repair.K": 3,
    "repair.I": 3,
    "repair.topk_fallback": 3,
}
WEIGHT_PREFIX = "weights."
# execution knobs that cannot change results stay out of the echoed config
NOT_ECHOED = ("workers",)


class ConfigError(ValueError):
    pass


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_flat(path) -> dict:
    with open(path, "rb") as fh:
        return flatten(tomllib.load(fh))


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def weights(self):
        w = {k[len(WEIGHT_PREFIX):]: float(v) for k, v in self.values.items() if k.startswith(WEIGHT_PREFIX)}
        return w or None

    def echo(self) -> dict:
        return {k: v for k, v in sorted(self.values.items()) if k not in NOT_ECHOED}


def make_config(overrides: dict | None = None) -> ExperimentConfig:
    values = dict(DEFAULTS)
    for key, v in (overrides or {}).items():
        if key.startswith(WEIGHT_PREFIX):
            if key[len(WEIGHT_PREFIX):] not in CHECK_IDS:
                raise ConfigError(f"unknown config key {key!r}: no such audit check")
        elif key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = v
    bad = [f for f in values["reasoning_faults"] if f not in REASONING_FAULTS]
    if bad:
        raise ConfigError(f"reasoning_faults: unknown labels {bad}")
    bad = [f for f in values["fault_classes"] if f not in FAULT_CLASSES]
    if bad:
        raise ConfigError(f"fault_classes: unknown labels {bad}")
    if values["variant"] not in ("full", "no_fast_slow", "no_cce"):
        raise ConfigError(f"variant: unknown value {values['variant']!r}")
    if int(values["repeats"]) < 1:
        raise ConfigError("repeats: must be at least 1")
    return ExperimentConfig(values)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    flat = load_flat(path) if path else {}
    flat.update(overrides or {})
    return make_config(flat)
