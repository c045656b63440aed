"""Experiment configuration: JSON in, validated dataclasses out.

A run is a pure function of (resolved config, code version), so every
default is materialized into ``resolved_config.json`` next to the
artifacts. Validation errors name the offending key by its dotted path.
"""

import copy
import json
import os
from dataclasses import dataclass

from .baselines import EdifySpec, PyramidalSpec
from .datasets import DatasetDescriptor
from .flowtrain import TrainConfig
from .model import ModelConfig
from .sampler import SampleConfig
from .schedule import ScheduleSpec, default_critical_times

METHODS = ("lapflow", "lfm", "edify", "pyramidal")


class ConfigError(ValueError):
    """Schema violation; the message starts with the dotted key path."""


_DEFAULTS = {
    "method": "lapflow",
    "seed": 0,
    "out_dir": None,                      # required
    "independent_scale_noise": False,
    "dataset": {
        "kind": "gaussians", "size": 16, "channels": 1, "count": 1024,
        "seed": 0, "num_classes": 0, "path": "",
    },
    "model": {
        "scales": 2, "hidden": 64, "heads": 4, "depth": 4, "patch": 2,
        "mlp_ratio": 4,
    },
    "schedule": {
        "path": "linear", "critical_times": None,   # None = evenly spaced
    },
    "train": {
        "steps": 20000, "batch_size": 16, "lr": 2e-4, "lr_schedule": "cosine",
        "final_lr": 1e-6, "ema_decay": 0.9999, "weight_decay": 0.0,
        "loss_reduction": "mean", "grad_clip": 0.0, "cfg_dropout": 0.1,
        "log_every": 100, "ckpt_every": 0,
    },
    "solver": {
        "kind": "dopri5", "rtol": 1e-5, "atol": 1e-5, "steps": 100,
    },
    "sample": {
        "count": 64, "cfg_scale": 1.0, "label": None, "use_ema": True,
        "jump_mode": "algorithmic",
    },
}


def _merge_section(resolved, raw, section):
    base = resolved[section]
    extra = raw.get(section, {})
    if not isinstance(extra, dict):
        raise ConfigError(f"{section}: expected an object")
    for key, val in extra.items():
        if key not in base:
            raise ConfigError(f"{section}.{key}: unknown key")
        base[key] = val


def resolve(raw: dict) -> dict:
    """Merge a raw config dict over the defaults; all keys validated."""
    resolved = copy.deepcopy(_DEFAULTS)
    for key, val in raw.items():
        if key not in resolved:
            raise ConfigError(f"{key}: unknown key")
        if isinstance(resolved[key], dict):
            continue
        resolved[key] = val
    for section in ("dataset", "model", "schedule", "train", "solver", "sample"):
        _merge_section(resolved, raw, section)
    if resolved["method"] not in METHODS:
        raise ConfigError(f"method: '{resolved['method']}' not one of {METHODS}")
    if resolved["out_dir"] is None:
        raise ConfigError("out_dir: missing required key")
    if resolved["method"] == "lfm":
        if "scales" in raw.get("model", {}) and raw["model"]["scales"] != 1:
            raise ConfigError("model.scales: method 'lfm' is the single-scale "
                              "configuration; scales must be 1")
        resolved["model"]["scales"] = 1
    if resolved["method"] == "edify":
        if "scales" in raw.get("model", {}) and raw["model"]["scales"] != 3:
            raise ConfigError("model.scales: the edify cascade is three-scale")
        resolved["model"]["scales"] = 3
    env_seed = os.environ.get("LAPFLOW_SEED")
    if env_seed is not None:
        resolved["seed"] = int(env_seed)
    if resolved["schedule"]["critical_times"] is None:
        resolved["schedule"]["critical_times"] = list(
            default_critical_times(resolved["model"]["scales"]))
    return resolved


@dataclass
class RunConfig:
    method: str
    seed: int
    out_dir: str
    independent_scale_noise: bool
    dataset: DatasetDescriptor
    model: ModelConfig
    schedule: ScheduleSpec        # main-pipeline schedule (K = model.scales)
    train: TrainConfig
    sample: SampleConfig
    resolved: dict                # the fully materialized dict, for writing

    def edify_spec(self) -> EdifySpec:
        t = self.resolved["schedule"]["critical_times"]
        return EdifySpec(t1=t[0], t2=t[1])

    def pyramidal_spec(self) -> PyramidalSpec:
        return PyramidalSpec(K=self.model.scales,
                             boundaries=tuple(self.resolved["schedule"]["critical_times"]))


def _build(section, cls, resolved, **extra):
    try:
        return cls(**{**resolved[section], **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    resolved = resolve(raw)
    dataset = _build("dataset", DatasetDescriptor, resolved)
    try:
        model = ModelConfig(
            scales=resolved["model"]["scales"],
            hidden=resolved["model"]["hidden"],
            heads=resolved["model"]["heads"],
            depth=resolved["model"]["depth"],
            patch=resolved["model"]["patch"],
            mlp_ratio=resolved["model"]["mlp_ratio"],
            channels=dataset.channels,
            num_classes=dataset.num_classes,
            input_size=dataset.size,
            stage_tokens=resolved["method"] in ("edify", "pyramidal"),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    try:
        spec = ScheduleSpec(K=model.scales,
                            critical_times=tuple(resolved["schedule"]["critical_times"]),
                            path=resolved["schedule"]["path"])
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    train = _build("train", TrainConfig, resolved, seed=resolved["seed"])
    try:
        sample = SampleConfig(
            count=resolved["sample"]["count"],
            seed=resolved["seed"],
            cfg_scale=resolved["sample"]["cfg_scale"],
            label=resolved["sample"]["label"],
            solver=resolved["solver"]["kind"],
            rtol=resolved["solver"]["rtol"],
            atol=resolved["solver"]["atol"],
            steps=resolved["solver"]["steps"],
            use_ema=resolved["sample"]["use_ema"],
        )
    except ValueError as exc:
        raise ConfigError(f"sample: {exc}") from exc
    cfg = RunConfig(method=resolved["method"], seed=resolved["seed"],
                    out_dir=resolved["out_dir"],
                    independent_scale_noise=resolved["independent_scale_noise"],
                    dataset=dataset, model=model, schedule=spec, train=train,
                    sample=sample, resolved=resolved)
    if cfg.method == "edify":
        cfg.edify_spec()    # validates the knots
    if cfg.method == "pyramidal":
        cfg.pyramidal_spec()
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(raw)


def write_resolved(cfg: RunConfig, path):
    with open(path, "w") as f:
        json.dump(cfg.resolved, f, indent=2, sort_keys=True)
        f.write("\n")
