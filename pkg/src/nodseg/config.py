"""Declarative run configuration.

One strict JSON document drives every command: sections data / model /
train / freeze / eval. Unknown keys are rejected with their dotted path
(typos never fall back to defaults silently), and the fully-resolved
document, with every default made explicit, is written next to each run's
outputs so a run can be reproduced from its artifacts alone.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigurationError
from .network import DEFAULT_COMBINE_PAIRS, ModelConfig
from .objectives import LossWeights
from .std_activation import STDParams
from .trainer import FreezeSpec, TrainConfig

RESOLVED_CONFIG_NAME = "resolved_config.json"

_DEFAULTS = {
    "data": {
        "volumes_dir": None,
        "annotations_csv": None,
        "patch_dir": "patches",
        "i_min": 0.0,
        "i_max": 255.0,
        "keep_ratio": 1.0,
        "half_depth_mm": 5.0,
        "k_folds": 5,
        "seed": 0,
    },
    "model": {
        "in_channels": 1,
        "encoder_widths": [64, 128, 256, 512, 512],
        "decoder_widths": [256, 128, 64, 64],
        "classifier_base_width": 64,
        "classifier_blocks": [3, 4, 6, 3],
        "aspp_rates": [1, 5, 10, 15],
        "combination_enabled": True,
        "combine_pairs": [list(pair) for pair in DEFAULT_COMBINE_PAIRS],
        "std": {
            "eps0": 1.0,
            "lambda1": 1.0,
            "lambda2_0": 0.1,
            "sigma0": 1.5,
            "iters": 10,
            "kernel_radius": None,
            "learn_eps": True,
            "learn_lambda2": True,
            "learn_sigma": True,
        },
    },
    "train": {
        "phase": "pretrain",
        "epochs": 200,
        "batch_size": 10,
        "lr0": 0.001,
        "decay_factor": 0.75,
        "decay_period_epochs": 5,
        "weight_decay": 1e-8,
        "seed": 0,
        "std_enabled": False,
        "w_seg": 1.0,
        "w_cls": 1.0,
        "k_folds": 5,
    },
    "freeze": [],
    "eval": {
        "threshold": 0.5,
        "aggregation": "lesion",
    },
}

# keys whose default is null but that accept a typed value
_NULLABLE_TYPES = {
    "data.volumes_dir": str,
    "data.annotations_csv": str,
    "model.std.kernel_radius": int,
}


def _check_scalar(value, default, path: str):
    if path in _NULLABLE_TYPES:
        want = _NULLABLE_TYPES[path]
        if value is not None and not isinstance(value, want):
            raise ConfigurationError(f"{path}: expected {want.__name__} or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected string, got {value!r}")
        return value
    return value


def _resolve(defaults: dict, doc: dict, prefix: str = "") -> dict:
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected an object, got {doc!r}")
    for key in doc:
        if key not in defaults:
            raise ConfigurationError(f"unknown config key {prefix + key!r}")
    resolved = {}
    for key, default in defaults.items():
        path = prefix + key
        if key not in doc:
            resolved[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            resolved[key] = _resolve(default, doc[key], path + ".")
        elif isinstance(default, list):
            if not isinstance(doc[key], list):
                raise ConfigurationError(f"{path}: expected a list, got {doc[key]!r}")
            resolved[key] = copy.deepcopy(doc[key])
        else:
            resolved[key] = _check_scalar(doc[key], default, path)
    return resolved


class RunConfig:
    """The resolved configuration document plus typed accessors."""

    def __init__(self, doc: dict | None = None):
        self._doc = _resolve(_DEFAULTS, doc or {})
        self._validate_sections()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls(doc)

    def _validate_sections(self) -> None:
        # build the typed objects once so bad values fail at load time with
        # their section named, not midway through a run
        self.model_config()
        self.train_config()
        self.freeze_spec()
        ev = self._doc["eval"]
        if not 0.0 < ev["threshold"] < 1.0:
            raise ConfigurationError(f"eval.threshold must be in (0, 1), got {ev['threshold']}")
        if ev["aggregation"] not in ("lesion", "slice"):
            raise ConfigurationError(
                f"eval.aggregation must be 'lesion' or 'slice', got {ev['aggregation']!r}"
            )
        data = self._doc["data"]
        if data["i_max"] <= data["i_min"]:
            raise ConfigurationError(
                f"data.i_max ({data['i_max']}) must exceed data.i_min ({data['i_min']})"
            )
        if data["k_folds"] < 2:
            raise ConfigurationError(f"data.k_folds must be >= 2, got {data['k_folds']}")
        if data["keep_ratio"] < 0:
            raise ConfigurationError(f"data.keep_ratio must be >= 0, got {data['keep_ratio']}")

    # ------------------------------------------------------------ sections

    @property
    def data(self) -> dict:
        return self._doc["data"]

    @property
    def eval_threshold(self) -> float:
        return self._doc["eval"]["threshold"]

    @property
    def eval_aggregation(self) -> str:
        return self._doc["eval"]["aggregation"]

    def std_params(self) -> STDParams:
        s = self._doc["model"]["std"]
        params = STDParams(
            eps=s["eps0"],
            lambda1=s["lambda1"],
            lambda2=s["lambda2_0"],
            sigma=s["sigma0"],
            iters=s["iters"],
            kernel_radius=s["kernel_radius"],
            learn_eps=s["learn_eps"],
            learn_lambda2=s["learn_lambda2"],
            learn_sigma=s["learn_sigma"],
        )
        try:
            params.validate()
        except ValueError as exc:
            raise ConfigurationError(f"model.std: {exc}") from exc
        return params

    def model_config(self) -> ModelConfig:
        m = self._doc["model"]
        try:
            cfg = ModelConfig(
                in_channels=m["in_channels"],
                encoder_widths=tuple(m["encoder_widths"]),
                decoder_widths=tuple(m["decoder_widths"]),
                classifier_base_width=m["classifier_base_width"],
                classifier_blocks=tuple(m["classifier_blocks"]),
                aspp_rates=tuple(m["aspp_rates"]),
                combination_enabled=m["combination_enabled"],
                combine_pairs=tuple(tuple(pair) for pair in m["combine_pairs"]),
                std=self.std_params(),
            )
            cfg.validate()
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"model: {exc}") from exc
        return cfg

    def train_config(self) -> TrainConfig:
        t = self._doc["train"]
        try:
            weights = LossWeights(w_seg=t["w_seg"], w_cls=t["w_cls"])
            cfg = TrainConfig(
                phase=t["phase"],
                epochs=t["epochs"],
                batch_size=t["batch_size"],
                lr0=t["lr0"],
                decay_factor=t["decay_factor"],
                decay_period_epochs=t["decay_period_epochs"],
                weight_decay=t["weight_decay"],
                seed=t["seed"],
                std_enabled=t["std_enabled"],
                loss_weights=weights,
                k_folds=t["k_folds"],
            )
            cfg.validate()
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"train: {exc}") from exc
        return cfg

    def freeze_spec(self) -> FreezeSpec:
        groups = self._doc["freeze"]
        if not all(isinstance(g, str) for g in groups):
            raise ConfigurationError(f"freeze: expected a list of group names, got {groups!r}")
        return FreezeSpec(frozen_groups=tuple(groups))

    # --------------------------------------------------------- mutation

    def apply_phase(self, phase: str) -> None:
        """Pin the two-phase protocol: plain sigmoid while pretraining, the
        variational layer while fine-tuning. Recorded in the resolved doc."""
        if phase not in ("pretrain", "finetune"):
            raise ConfigurationError(f"unknown phase {phase!r}")
        self._doc["train"]["phase"] = phase
        self._doc["train"]["std_enabled"] = phase == "finetune"

    def override_seed(self, seed: int) -> None:
        self._doc["data"]["seed"] = int(seed)
        self._doc["train"]["seed"] = int(seed)

    # --------------------------------------------------------- emission

    def to_dict(self) -> dict:
        return copy.deepcopy(self._doc)

    def write_resolved(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_CONFIG_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path
