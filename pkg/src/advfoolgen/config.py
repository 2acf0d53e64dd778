"""Config resolution: defaults, YAML files, and key=value overrides.

The full resolved tree is echoed into every experiment manifest so reruns can
be checked against the exact settings that produced an artifact.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .errors import ConfigError


def default_config() -> dict:
    return {
        "seed": 0,
        "exp_dir": "experiments/run",
        "data": {
            "root": "data",
            "name": "cifar10",
            "train_subset": 5000,
            "test_subset": 1000,
        },
        "classifier": {
            "arch": "smallcnn",
            "epochs": 15,
            "batch_size": 128,
            "lr": 1.0e-3,
            "weight_decay": 5.0e-4,
        },
        "attack": {
            "mgn": 0.1,
            "weights": {"alpha": 0.1, "beta": 0.3, "gamma": 0.3, "lambda": 0.3},
            "latent_dim": 128,
            "epochs": 10,
            "d_steps_per_g": 5,
            "gan_mode": "vanilla",
            "clip": 0.01,
            "seed": None,
            "batch_size": 128,
            "lr_g": 2.0e-4,
            "lr_d": 2.0e-4,
            "save_every": 2,
            "base_channels": 32,
        },
        "baseline": {
            "name": "fgsm",
            "epsilon": 0.07,
            "steps": 10,
            "step_size": None,
            "random_start": False,
        },
        "defense": {
            "kind": "retrain",
            "strategy": "extra_class",
            "source": "advfool",
            "bits": 3,
            "quality": 75,
            "epsilon": 0.07,
            "steps": 7,
            "epoch": None,
        },
        "evaluate": {
            "topk": 5,
        },
        "analysis": {
            "folds": 5,
            "grid_points": 512,
            "span": 5.0,
            "reference_epoch": None,
        },
        "report": {
            "baselines": ["fgsm", "ifgsm"],
            "defenses": ["retrain", "adv_training", "bit_depth:3", "bit_depth:8", "jpeg:75"],
            "grid_images": 10,
            "grid_rows": 2,
        },
    }


def _merge_into(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} expects a mapping")
            _merge_into(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def _set_key(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(node[leaf], dict) and node[leaf]:
        raise ConfigError(f"config key {dotted!r} is a section, not a value")
    node[leaf] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key.strip(), value


def _validate(cfg: dict) -> None:
    weights = cfg["attack"]["weights"]
    total = sum(weights[k] for k in ("alpha", "beta", "gamma", "lambda"))
    if any(weights[k] < 0 for k in ("alpha", "beta", "gamma", "lambda")):
        raise ConfigError("attack.weights entries must be non-negative")
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"attack.weights must sum to 1, got {total!r}")
    if not 0.0 < cfg["attack"]["mgn"] <= 1.0:
        raise ConfigError(f"attack.mgn must lie in (0, 1], got {cfg['attack']['mgn']}")
    if cfg["attack"]["d_steps_per_g"] < 1:
        raise ConfigError("attack.d_steps_per_g must be >= 1")
    for section in ("classifier", "attack"):
        if cfg[section]["epochs"] < 1:
            raise ConfigError(f"{section}.epochs must be >= 1")
    if cfg["attack"]["gan_mode"] not in ("vanilla", "wasserstein"):
        raise ConfigError(f"attack.gan_mode must be vanilla or wasserstein")
    if cfg["baseline"]["epsilon"] < 0 or cfg["defense"]["epsilon"] < 0:
        raise ConfigError("epsilon values must be non-negative")
    if not 1 <= cfg["defense"]["bits"] <= 8:
        raise ConfigError(f"defense.bits must lie in [1, 8], got {cfg['defense']['bits']}")
    if not 1 <= cfg["defense"]["quality"] <= 100:
        raise ConfigError(
            f"defense.quality must lie in [1, 100], got {cfg['defense']['quality']}"
        )
    if cfg["analysis"]["folds"] < 2:
        raise ConfigError("analysis.folds must be >= 2")
    if cfg["baseline"]["name"] not in ("fgsm", "ifgsm", "pgd"):
        raise ConfigError(f"baseline.name must be fgsm, ifgsm, or pgd")


def resolve_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the YAML file, then key=value overrides; validated."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
        _merge_into(cfg, loaded)
    for item in overrides or []:
        key, value = parse_override(item)
        _set_key(cfg, key, value)
    _validate(cfg)
    return cfg


def stage_seed(cfg: dict, stage: str) -> int:
    """Per-stage seed derived from the root seed and the stage name."""
    from .generator import derive_seed

    return derive_seed(int(cfg["seed"]), stage)


def deep_copy(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
