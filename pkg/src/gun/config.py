"""Experiment configuration: strict JSON schema over the module configs.

Unknown keys are rejected with their full path so typos never pass
silently; every command writes the fully resolved config next to its
outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .data import SceneSpec
from .errors import ConfigError
from .gum import GuidanceConfig
from .net import ModelConfig, TrainRecipe

DEFAULT_RADII = [1.0, 2.0, 4.0, 8.0, 16.0]


@dataclass
class ExperimentConfig:
    scene: SceneSpec
    model: ModelConfig
    recipe: TrainRecipe
    radii: List[float] = field(default_factory=lambda: list(DEFAULT_RADII))
    seed: int = 0


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        scene=SceneSpec(),
        model=ModelConfig(num_classes=SceneSpec().num_classes),
        recipe=TrainRecipe(),
    )


def _build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key {path}.{sorted(unknown)[0]}")
    kwargs = {}
    for name, value in payload.items():
        if name == "guidance" and value is not None:
            value = _build(GuidanceConfig, value, f"{path}.guidance")
        elif isinstance(value, list) and name in ("branch_factors", "shape_count",
                                                  "shape_kinds", "bar_width"):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    unknown = set(payload) - {"scene", "model", "recipe", "radii", "seed"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}")
    base = default_config()
    scene = _build(SceneSpec, payload.get("scene", {}), "scene")
    model_payload = dict(payload.get("model", {}))
    model_payload.setdefault("num_classes", scene.num_classes)
    model = _build(ModelConfig, model_payload, "model")
    recipe = _build(TrainRecipe, payload.get("recipe", {}), "recipe")
    radii = payload.get("radii", list(DEFAULT_RADII))
    if not isinstance(radii, list) or not all(isinstance(r, (int, float)) for r in radii):
        raise ConfigError("radii must be a list of numbers")
    seed = payload.get("seed", base.seed)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(scene=scene, model=model, recipe=recipe,
                            radii=[float(r) for r in radii], seed=seed)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, tuple):
            return list(obj)
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [plain(v) for v in obj]
        return obj

    return {
        "scene": plain(cfg.scene),
        "model": plain(cfg.model),
        "recipe": plain(cfg.recipe),
        "radii": list(cfg.radii),
        "seed": cfg.seed,
    }


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(payload)


def dump_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
