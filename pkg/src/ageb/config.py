"""Run configuration: defaults, file merging, dotted-key overrides.

Precedence is built-in defaults < config file < command-line overrides.
Unknown keys are rejected before any work happens, and the fully resolved
document is written next to every output so a run can be replayed exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .harness import TrainSpec
from .poison import PoisonSpec
from .trigger import StructuringElement, TriggerConfig
from .vit import ViTConfig

_VIT_DEFAULTS = {
    "image_size": 32,
    "patch_size": 4,
    "depth": 4,
    "heads": 4,
    "embed_dim": 64,
    "mlp_ratio": 2,
    "num_classes": 4,
    "record_block": -1,
}

_TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 64,
    "lr": 0.35,
    "weight_decay": 1e-4,
    "vit": dict(_VIT_DEFAULTS),
}

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {
        "kind": "synth",
        "size": 512,
        "test_size": 256,
        "image_size": 32,
        "num_classes": 4,
        "cifar_dir": "",
    },
    "surrogate": dict(copy.deepcopy(_TRAIN_DEFAULTS)),
    "train": dict(copy.deepcopy(_TRAIN_DEFAULTS)),
    "trigger": {
        "gradient_fraction": 0.40,
        "kernel_size": 3,
        "iterations": 1,
        "blend_alpha": 0.5,
        "bias_epsilon": 8.0 / 255.0,
        "saturation_factor": 0.95,
        "value_factor": 0.95,
    },
    "poison": {
        "rate": 0.10,
        "target_class": 0,
        "mask_mode": "gradient",
    },
    "eval": {
        "batch_size": 256,
    },
    "ablation": {
        "grid": "table3",
        "rates": [0.02, 0.05, 0.10],
        "seeds": [0, 1, 2],
        "kernel_sizes": [3, 5, 7],
        "iterations": [1, 2, 3],
        "fractions": [0.2, 0.4, 0.6],
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} expects a section")
            _merge(base[key], value, here)
        else:
            base[key] = value


def load_config(path=None, overrides: list[str] | None = None, seed=None) -> dict:
    """Resolve defaults + optional file + dotted overrides into one document."""
    cfg = default_config()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge(cfg, loaded)
    for item in overrides or []:
        _apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"config key {dotted!r} is a section, not a value")
    node[parts[-1]] = value


def validate_config(cfg: dict) -> None:
    if cfg["dataset"]["kind"] not in ("synth", "cifar10"):
        raise ConfigError(f"dataset.kind {cfg['dataset']['kind']!r} not synth|cifar10")
    if cfg["poison"]["mask_mode"] not in ("gradient", "random"):
        raise ConfigError(
            f"poison.mask_mode {cfg['poison']['mask_mode']!r} not gradient|random"
        )
    if cfg["ablation"]["grid"] not in ("table3", "rates", "kernel", "fraction"):
        raise ConfigError(
            f"ablation.grid {cfg['ablation']['grid']!r} not table3|rates|kernel|fraction"
        )
    if not 0.0 <= float(cfg["poison"]["rate"]) <= 1.0:
        raise ConfigError(f"poison.rate {cfg['poison']['rate']} outside [0, 1]")
    # construct the typed objects so their own validators run
    try:
        vit_config(cfg, "train")
        vit_config(cfg, "surrogate")
        trigger_config(cfg)
        train_spec(cfg, "train")
        train_spec(cfg, "surrogate")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def write_resolved(cfg: dict, directory) -> None:
    path = Path(directory) / "resolved_config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------


def vit_config(cfg: dict, section: str) -> ViTConfig:
    return ViTConfig.from_dict(cfg[section]["vit"])


def trigger_config(cfg: dict) -> TriggerConfig:
    t = cfg["trigger"]
    return TriggerConfig(
        gradient_fraction=float(t["gradient_fraction"]),
        element=StructuringElement(int(t["kernel_size"]), int(t["iterations"])),
        blend_alpha=float(t["blend_alpha"]),
        bias_epsilon=float(t["bias_epsilon"]),
        saturation_factor=float(t["saturation_factor"]),
        value_factor=float(t["value_factor"]),
    ).validate()


def train_spec(cfg: dict, section: str, seed: int | None = None) -> TrainSpec:
    s = cfg[section]
    return TrainSpec(
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        lr=float(s["lr"]),
        weight_decay=float(s["weight_decay"]),
        seed=cfg["seed"] if seed is None else seed,
        vit=vit_config(cfg, section),
    ).validate()


def poison_spec(cfg: dict, seed: int | None = None) -> PoisonSpec:
    p = cfg["poison"]
    return PoisonSpec(
        rate=float(p["rate"]),
        target_class=int(p["target_class"]),
        seed=cfg["seed"] if seed is None else seed,
        trigger=trigger_config(cfg),
        mask_mode=p["mask_mode"],
    )
