"""Run configuration: one versioned YAML (or JSON) file for every command.

Example::

    version: 1
    seed: 0
    scene:
      num_scenes: 600
      val_fraction: 0.2
      fp_rate: 1.0
      noise: {center: 0.3, size: 0.15, heading: 0.1}
    train:
      epochs: 20
      variant: boundary_offset
    eval:
      iou_mode: 3d

Unknown keys anywhere are rejected before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import SchemaError
from .metrics import EvalSpec
from .synthetic import ClassPreset, ProposalNoise, SceneConfig
from .trainer import JitterConfig, TrainConfig

CONFIG_VERSION = 1


@dataclass
class GenerateConfig:
    num_scenes: int = 600
    val_fraction: float = 0.2
    fp_rate: float = 1.0
    noise: ProposalNoise = field(default_factory=ProposalNoise)
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    threads: Optional[int] = None
    scene: GenerateConfig = field(default_factory=GenerateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)


_SCENE_KEYS = {f.name for f in dataclasses.fields(SceneConfig)}
_GEN_KEYS = {f.name for f in dataclasses.fields(GenerateConfig)} - {"scene"}


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected a mapping, got {type(d).__name__}")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise SchemaError(f"{where}: unknown key(s) {extra}; allowed: {sorted(allowed)}")


def _build(cls, d: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, allowed, where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None


def _scene_section(d: dict) -> GenerateConfig:
    _check_keys(d, _GEN_KEYS | _SCENE_KEYS, "scene")
    gen = {k: v for k, v in d.items() if k in _GEN_KEYS}
    sc = {k: v for k, v in d.items() if k in _SCENE_KEYS}
    if "noise" in gen:
        gen["noise"] = _build(ProposalNoise, gen["noise"], "scene.noise")
    if "classes" in sc:
        presets = []
        for i, c in enumerate(sc["classes"]):
            _check_keys(c, {"name", "count", "size_mean", "size_sigma"}, f"scene.classes[{i}]")
            c = dict(c)
            c["count"] = tuple(c.get("count", (1, 1)))
            c["size_mean"] = tuple(c.get("size_mean", ()))
            presets.append(_build(ClassPreset, c, f"scene.classes[{i}]"))
        sc["classes"] = presets
    for key in ("sensor_origin",):
        if key in sc:
            sc[key] = tuple(sc[key])
    scene = _build(SceneConfig, sc, "scene")
    cfg = _build(GenerateConfig, gen, "scene")
    cfg.scene = scene
    if cfg.num_scenes < 1 or not 0.0 <= cfg.val_fraction < 1.0:
        raise SchemaError("scene: need num_scenes >= 1 and 0 <= val_fraction < 1")
    return cfg


def _train_section(d: dict, seed: int) -> TrainConfig:
    d = dict(d)
    if "jitter" in d:
        d["jitter"] = _build(JitterConfig, d["jitter"], "train.jitter")
    d.setdefault("seed", seed)
    return _build(TrainConfig, d, "train")


def _eval_section(d: dict) -> EvalSpec:
    d = dict(d)
    if "range_bins" in d:
        d["range_bins"] = tuple((str(n), float(lo), float(hi)) for n, lo, hi in d["range_bins"])
    return _build(EvalSpec, d, "eval")


def parse_config(raw: Optional[dict]) -> RunConfig:
    raw = raw or {}
    _check_keys(raw, {"version", "seed", "threads", "scene", "train", "eval"}, "config")
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise SchemaError(f"config: unsupported version {version!r} (expected {CONFIG_VERSION})")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise SchemaError("config: 'seed' must be an integer")
    return RunConfig(
        version=version,
        seed=seed,
        threads=raw.get("threads"),
        scene=_scene_section(raw.get("scene", {})),
        train=_train_section(raw.get("train", {}), seed),
        eval=_eval_section(raw.get("eval", {})),
    )


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return parse_config(raw)


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    d = dataclasses.asdict(cfg)
    scene = d.pop("scene")
    inner = scene.pop("scene")
    scene.update(inner)
    d["scene"] = scene
    d["eval"]["range_bins"] = [list(b) for b in cfg.eval.range_bins]
    return json.loads(json.dumps(d))
