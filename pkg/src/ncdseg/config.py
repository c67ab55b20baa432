"""Flat key-value run configuration.

Format: one `section.key = value` per line, `#` comments, unknown keys
rejected by name. A bare file reproduces the published hyper-parameters
(confidence 0.9, clean ratio 0.67, online threshold 0, ramp length 5,
reassignment at epoch 5, over-clustering factor 2, SGD 0.1/0.9/1e-4,
batch size 8). Trial seeds come from run.seeds; cmd-level code injects
them into the per-stage seeds.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from . import synth
from .segmenter import TrainConfig
from .selftrain import AugmentationSpec, FinetuneConfig


class ConfigError(Exception):
    pass


_TRAIN_KEYS = {
    "learning_rate": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "epochs": 30,
    "batch_size": 8,
    "lr_decay_epoch": 15,
    "lr_decay_factor": 0.1,
}

DEFAULTS: dict[str, object] = {
    "scene.height": 32,
    "scene.width": 32,
    "scene.feature_dim": 8,
    "scene.sigma": 0.5,
    "scene.prototype_scale": 3.0,
    "scene.prototype_style": "orthogonal",
    "scene.pair_gap": 1.0,
    "scene.objects_min": 1,
    "scene.objects_max": 3,
    "scene.max_novel_objects": 0,     # cap per image; 0 = unlimited
    "scene.min_object_frac": 0.2,
    "scene.max_object_frac": 0.5,
    "scene.class_skew": 1.0,
    "scene.clutter_rate": 0.0,
    "scene.clutter_mix": 1.0,
    "fold.n_base_fg": 2,
    "fold.n_novel": 5,
    "fold.n_base_images": 100,
    "fold.n_novel_images": 100,
    "fold.n_val_images": 50,
    "fold.seed": 0,
    "saliency.boundary_erode_dilate": 0,
    "saliency.flip_rate": 0.0,
    "saliency.miss_rate": 0.0,
    **{f"base_train.{k}": v for k, v in _TRAIN_KEYS.items()},
    **{f"novel_train.{k}": v for k, v in _TRAIN_KEYS.items()},
    "stage2.confidence": 0.9,
    "stage2.over_factor": 2,
    "stage2.min_novel_pixels": 16,
    "finetune.clean_ratio": 0.67,
    "finetune.online_threshold": 0.0,
    "finetune.ramp_length": 5,
    "finetune.reassign_epoch": 5,
    "finetune.ema_momentum": 0.99,
    "augment.flip_prob": 0.5,
    "augment.scale_jitter": 0.1,
    "augment.noise_sigma": 0.1,
    "switches.over_clustering": True,
    "switches.entropy_ranking": True,
    "switches.dynamic_reassignment": True,
    "switches.self_training": True,
    "run.seeds": (0,),
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def get(self, key: str):
        return self.values[key]

    def replace(self, **by_key) -> "RunConfig":
        """Override keys given with dots replaced by double underscores."""
        updated = dict(self.values)
        for name, value in by_key.items():
            key = name.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            updated[key] = value
        cfg = RunConfig(updated)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        sw = "switches."
        if self.get(sw + "dynamic_reassignment") and not self.get(sw + "entropy_ranking"):
            raise ConfigError("switches.dynamic_reassignment requires switches.entropy_ranking")
        if self.get(sw + "self_training") and not self.get(sw + "entropy_ranking"):
            raise ConfigError("switches.self_training requires switches.entropy_ranking")
        if not self.get("run.seeds"):
            raise ConfigError("run.seeds must list at least one seed")

    def dump(self) -> str:
        lines = [f"{key} = {_format(self.values[key])}" for key in DEFAULTS]
        return "\n".join(lines) + "\n"

    def section_hash(self, sections: tuple[str, ...], extra: str = "") -> str:
        """Content hash over the named sections, for stage caching."""
        lines = [f"{key} = {_format(self.values[key])}" for key in DEFAULTS
                 if key.split(".", 1)[0] in sections]
        blob = "\n".join(lines) + "\n" + extra
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_trial_seed(self, seed: int) -> "RunConfig":
        """Per-trial view: the shared seed drives every stage's rng."""
        return self.replace(fold__seed=seed)


def default_config() -> RunConfig:
    return RunConfig(dict(DEFAULTS))


def parse_config(text: str) -> RunConfig:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key: {key}")
        values[key] = _coerce(key, raw)
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def scene_spec(cfg: RunConfig) -> synth.SceneSpec:
    """Build the scene description; prototypes are seeded by fold.seed so
    each trial draws an independent class geometry."""
    n_classes = 1 + cfg.get("fold.n_base_fg") + cfg.get("fold.n_novel")
    prototypes = synth.make_prototypes(
        n_classes, cfg.get("scene.feature_dim"), scale=cfg.get("scene.prototype_scale"),
        seed=cfg.get("fold.seed"), style=cfg.get("scene.prototype_style"),
        pair_gap=cfg.get("scene.pair_gap"))
    cap = cfg.get("scene.max_novel_objects")
    return synth.SceneSpec(
        prototypes=prototypes,
        height=cfg.get("scene.height"),
        width=cfg.get("scene.width"),
        sigma=cfg.get("scene.sigma"),
        objects_min=cfg.get("scene.objects_min"),
        objects_max=cfg.get("scene.objects_max"),
        max_required=None if cap == 0 else cap,
        min_object_frac=cfg.get("scene.min_object_frac"),
        max_object_frac=cfg.get("scene.max_object_frac"),
        class_skew=cfg.get("scene.class_skew"),
        clutter_rate=cfg.get("scene.clutter_rate"),
        clutter_mix=cfg.get("scene.clutter_mix"),
    )


def fold_spec(cfg: RunConfig) -> synth.FoldSpec:
    return synth.FoldSpec(
        n_base_fg=cfg.get("fold.n_base_fg"),
        n_novel=cfg.get("fold.n_novel"),
        n_base_images=cfg.get("fold.n_base_images"),
        n_novel_images=cfg.get("fold.n_novel_images"),
        n_val_images=cfg.get("fold.n_val_images"),
        seed=cfg.get("fold.seed"),
    )


def saliency_spec(cfg: RunConfig) -> synth.SaliencyNoiseSpec:
    return synth.SaliencyNoiseSpec(
        boundary_erode_dilate=cfg.get("saliency.boundary_erode_dilate"),
        flip_rate=cfg.get("saliency.flip_rate"),
        miss_rate=cfg.get("saliency.miss_rate"),
    )


def _train_config(cfg: RunConfig, section: str, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.get(f"{section}.learning_rate"),
        momentum=cfg.get(f"{section}.momentum"),
        weight_decay=cfg.get(f"{section}.weight_decay"),
        epochs=cfg.get(f"{section}.epochs"),
        batch_size=cfg.get(f"{section}.batch_size"),
        lr_decay_epoch=cfg.get(f"{section}.lr_decay_epoch"),
        lr_decay_factor=cfg.get(f"{section}.lr_decay_factor"),
        seed=seed,
    )


def base_train_config(cfg: RunConfig, seed: int | None = None) -> TrainConfig:
    return _train_config(cfg, "base_train", cfg.get("fold.seed") if seed is None else seed)


def finetune_config(cfg: RunConfig, seed: int | None = None) -> FinetuneConfig:
    augment = AugmentationSpec(
        flip_prob=cfg.get("augment.flip_prob"),
        scale_jitter=cfg.get("augment.scale_jitter"),
        noise_sigma=cfg.get("augment.noise_sigma"),
    )
    return FinetuneConfig(
        train=_train_config(cfg, "novel_train", cfg.get("fold.seed") if seed is None else seed),
        clean_ratio=cfg.get("finetune.clean_ratio"),
        online_threshold=cfg.get("finetune.online_threshold"),
        ramp_length=cfg.get("finetune.ramp_length"),
        reassign_epoch=cfg.get("finetune.reassign_epoch"),
        ema_momentum=cfg.get("finetune.ema_momentum"),
        dynamic_reassignment=cfg.get("switches.dynamic_reassignment"),
        self_training=cfg.get("switches.self_training"),
        augment=augment,
    )
