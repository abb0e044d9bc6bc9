"""Versioned JSON run configuration.

One file describes a whole experiment: dataset recipe, architecture,
both training stages, and the evaluation protocol.  Unknown keys are
rejected (typos should fail loudly, not silently fall back to a
default), missing keys are filled from the documented defaults, and the
fully resolved dictionary is echoed into every output directory so a run
can be reproduced from its artifacts alone.

The adaptation section spells the content-regularizer weight ``lambda``,
matching the symbol users expect to tune; internally it becomes
``AdaptConfig.content_weight``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .evalkit import EvalConfig
from .model import ArchConfig
from .scenes import SceneSpec
from .shift import ShiftConfig
from .training import AdaptConfig, PretrainConfig

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "data": {
        "n_train": 200,
        "n_eval": 20,
        "image_size": [128, 160],
        "scene": {
            "seed": 0,
            "n_objects": 5,
            "depth_range": [0.5, 10.0],
        },
        "shift": {
            "color_gamma": [1.0, 1.0, 1.0],
            "noise_sigma": 0.0,
            "blur_radius": 0.0,
            "contrast": 1.0,
            "texture_overlay_strength": 0.0,
            "seed": 0,
        },
    },
    "arch": {
        "stem_channels": 16,
        "stage_channels": [16, 32, 64, 128],
        "stage_strides": [2, 2, 2, 2],
        "blocks_per_stage": 1,
        "decoder_channels": [64, 32, 16],
    },
    "pretrain": {
        "epochs": 12,
        "batch_size": 10,
        "lr": 0.01,
        "lr_decay": 0.1,
        "plateau_patience": 2,
        "holdout_frac": 0.1,
    },
    "adapt": {
        "regularizer": "dcr",
        "lambda": 10.0,
        "gan_form": "lsq",
        "use_depth_disc": True,
        "k_outer": 300,
        "m_inner": 1,
        "batch_size": 8,
        "lr": 1e-4,
        "disc_lr": 1e-3,
        "momentum": 0.9,
        "adapt_depth": 1,
        "ct_steps": 2000,
        "semi_unlabeled_per_labeled": 1,
        "labeled_frac": 0.05,
    },
    "eval": {
        "apply_median_scaling": True,
        "cap_meters": None,
        "upsample_to_gt": True,
        "global_scale": False,
    },
    "paths": {
        "dataset": "",
        "pretrained": "",
        "adapted": "",
    },
}


def _merge(defaults, given, trail=""):
    """Recursive default fill; any key absent from the defaults is an error."""
    if not isinstance(given, dict):
        raise ConfigError(f"config section {trail or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {trail}{key}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{trail}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Fully resolved experiment description."""

    resolved: dict  # the echo payload; includes defaults and any seed override
    seed: int
    n_train: int
    n_eval: int
    scene: SceneSpec
    shift: ShiftConfig
    arch: ArchConfig
    pretrain: PretrainConfig
    adapt: AdaptConfig
    eval_cfg: EvalConfig
    labeled_frac: float
    paths: dict

    def echo(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "config.json", "w") as fh:
            json.dump(self.resolved, fh, indent=1, sort_keys=True)
            fh.write("\n")


def resolve_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    resolved = _merge(DEFAULTS, raw)
    if resolved["version"] != CONFIG_VERSION:
        raise ConfigError(
            f"config version {resolved['version']!r} unsupported (expected {CONFIG_VERSION})"
        )
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    try:
        seed = int(resolved["seed"])
        data = resolved["data"]
        image_size = tuple(data["image_size"])
        scene = SceneSpec(
            seed=data["scene"]["seed"],
            image_size=image_size,
            n_objects=data["scene"]["n_objects"],
            depth_range=tuple(data["scene"]["depth_range"]),
        ).validate()
        shift = ShiftConfig(
            color_gamma=tuple(data["shift"]["color_gamma"]),
            noise_sigma=data["shift"]["noise_sigma"],
            blur_radius=data["shift"]["blur_radius"],
            contrast=data["shift"]["contrast"],
            texture_overlay_strength=data["shift"]["texture_overlay_strength"],
            seed=data["shift"]["seed"],
        ).validate()
        arch = ArchConfig(
            image_size=image_size,
            stem_channels=resolved["arch"]["stem_channels"],
            stage_channels=tuple(resolved["arch"]["stage_channels"]),
            stage_strides=tuple(resolved["arch"]["stage_strides"]),
            blocks_per_stage=resolved["arch"]["blocks_per_stage"],
            decoder_channels=tuple(resolved["arch"]["decoder_channels"]),
        )
        arch.validate()
        pre = PretrainConfig(seed=seed, **resolved["pretrain"])
        pre.validate()
        adapt_sec = dict(resolved["adapt"])
        labeled_frac = adapt_sec.pop("labeled_frac")
        adapt_sec["content_weight"] = adapt_sec.pop("lambda")
        adapt = AdaptConfig(seed=seed, **adapt_sec)
        adapt.validate(arch.n_stages)
        eval_cfg = EvalConfig(**resolved["eval"])
        eval_cfg.validate()
        n_train = int(data["n_train"])
        n_eval = int(data["n_eval"])
        if n_train < 1 or n_eval < 1:
            raise ConfigError("data.n_train and data.n_eval must be >= 1")
        if not 0.0 < float(labeled_frac) <= 1.0:
            raise ConfigError(f"adapt.labeled_frac must be in (0, 1], got {labeled_frac}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    return RunConfig(
        resolved=resolved,
        seed=seed,
        n_train=n_train,
        n_eval=n_eval,
        scene=scene,
        shift=shift,
        arch=arch,
        pretrain=pre,
        adapt=adapt,
        eval_cfg=eval_cfg,
        labeled_frac=float(labeled_frac),
        paths=dict(resolved["paths"]),
    )


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve_config(raw, seed_override)
