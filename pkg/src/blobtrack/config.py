"""Run configuration: one schema covering every pipeline parameter.

The configuration is a nested dict mirrored exactly by ``--dump-config``;
JSON files are validated structurally (unknown keys rejected, types
checked against the defaults) before any processing starts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from .classifier import TrainConfig
from .detector import DetectorParams
from .flowfield import FlowParams


def default_config() -> Dict[str, Any]:
    return {
        "seed": 0,
        "flow": {
            "patch_radius": 3,
            "alpha": 70.0,
            "delta_max": 0.05,
            "min_neighbors": 4,
        },
        "detector": {
            "gamma": 0.3,
            "s_default": 500.0,
            "s_min": 50.0,
            "s_max": 5000.0,
            "suppression_radius": 10.0,
        },
        "filter": {
            "n": 20,
            "q_position": 0.0,
            "q_velocity": 200.0,
            "q_theta": 0.0,
            "q_angular_rate": 5.0,
            "q_lam": 0.5,
            "q_delta": 0.1,
            "p0_position": 4.0,
            "p0_velocity": 2.5e5,
            "p0_theta": 0.5,
            "p0_angular_rate": 10.0,
            "p0_lam": 4.0,
            "p0_delta": 2.0,
            "spawn_lam1": 3.0,
            "spawn_lam2": 1.5,
            "spawn_delta_mag": 1.5,
        },
        "patch": {
            "rho": 100.0,
        },
        "classifier": {
            "learning_rate": 1e-3,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "batch_size": 64,
            "epochs": 30,
            "train_fraction": 0.9,
        },
        "manager": {
            "significance": 0.95,
            "kappa": 20.0,
            "batch_size": 50,
            "eval_buffer_len": 15,
            "max_tracks": 0,
            "sample_period_us": 1000,
            "no_classifier": {
                "cov_trace_max": 3.0,
                "s_min": 50.0,
                "s_max": 5000.0,
                "lam_min": 0.5,
                "lam_max": 10.0,
            },
        },
        "evaluation": {
            "match_radius": 5.0,
            "cadence_us": 5000,
        },
    }


class ConfigError(ValueError):
    pass


def _check(defaults: Dict[str, Any], values: Dict[str, Any], prefix: str) -> None:
    for key, val in values.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown configuration key: {path}")
        ref = defaults[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: expected a section, got {type(val).__name__}")
            _check(ref, val, path + ".")
        elif isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{path}: expected a boolean")
        elif isinstance(ref, (int, float)):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {type(val).__name__}")
        elif not isinstance(val, type(ref)):
            raise ConfigError(f"{path}: expected {type(ref).__name__}")


def _merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> None:
    for key, val in overlay.items():
        if isinstance(val, dict):
            _merge(base[key], val)
        else:
            base[key] = val


def load_config(path=None, overrides: Dict[str, Any] = None) -> Dict[str, Any]:
    """Defaults, optionally overlaid with a JSON file and dotted overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as f:
            user = json.load(f)
        _check(cfg, user, "")
        _merge(cfg, user)
    for dotted, raw in (overrides or {}).items():
        apply_override(cfg, dotted, raw)
    return cfg


def apply_override(cfg: Dict[str, Any], dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` override with type coercion."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown configuration key: {dotted}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown configuration key: {dotted}")
    ref = node[leaf]
    try:
        if isinstance(ref, bool):
            node[leaf] = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(ref, int) and not isinstance(ref, bool):
            node[leaf] = int(raw)
        elif isinstance(ref, float):
            node[leaf] = float(raw)
        else:
            node[leaf] = raw
    except ValueError as e:
        raise ConfigError(f"{dotted}: cannot parse {raw!r}") from e


def dump_config(cfg: Dict[str, Any] = None) -> str:
    return json.dumps(cfg or default_config(), indent=2)


@dataclass
class PipelineConfig:
    """Typed view of the configuration dict used by the tracking engine."""

    raw: Dict[str, Any]

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "PipelineConfig":
        _check(default_config(), cfg, "")
        return cls(raw=copy.deepcopy(cfg))

    @property
    def flow(self) -> FlowParams:
        f = self.raw["flow"]
        return FlowParams(
            patch_radius=int(f["patch_radius"]),
            alpha=float(f["alpha"]),
            delta_max=float(f["delta_max"]),
            min_neighbors=int(f["min_neighbors"]),
        )

    @property
    def detector(self) -> DetectorParams:
        d = self.raw["detector"]
        return DetectorParams(
            gamma=float(d["gamma"]),
            s_default=float(d["s_default"]),
            s_min=float(d["s_min"]),
            s_max=float(d["s_max"]),
            suppression_radius=float(d["suppression_radius"]),
        )

    @property
    def train_config(self) -> TrainConfig:
        c = self.raw["classifier"]
        return TrainConfig(
            learning_rate=float(c["learning_rate"]),
            beta1=float(c["adam_beta1"]),
            beta2=float(c["adam_beta2"]),
            eps=float(c["adam_eps"]),
            batch_size=int(c["batch_size"]),
            epochs=int(c["epochs"]),
            seed=int(self.raw["seed"]),
            train_fraction=float(c["train_fraction"]),
        )

    @property
    def q_diag(self) -> np.ndarray:
        f = self.raw["filter"]
        return np.array(
            [
                f["q_position"], f["q_position"],
                f["q_velocity"], f["q_velocity"],
                f["q_theta"], f["q_angular_rate"],
                f["q_lam"], f["q_lam"],
                f["q_delta"], f["q_delta"],
            ],
            dtype=np.float64,
        )

    @property
    def p0_diag(self) -> np.ndarray:
        f = self.raw["filter"]
        return np.array(
            [
                f["p0_position"], f["p0_position"],
                f["p0_velocity"], f["p0_velocity"],
                f["p0_theta"], f["p0_angular_rate"],
                f["p0_lam"], f["p0_lam"],
                f["p0_delta"], f["p0_delta"],
            ],
            dtype=np.float64,
        )
