"""Flat JSON run configuration: ``task.*``, ``model.*``, ``train.*`` and ``eval.*`` keys.

Every key is validated; anything unrecognized is an error so that a config
file fully determines a run.
"""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .models import (
    SyntheticTask,
    make_cluster_classification_task,
    make_lowrank_regression_task,
    model_spec_for_task,
)
from .trainer import TrainConfig

TASK_FACTORIES = {
    "regression": make_lowrank_regression_task,
    "classification": make_cluster_classification_task,
}
MODEL_KEYS = {"r_init", "lam", "init_log_alpha", "clamp", "adapters", "hidden", "backbone_seed"}
EVAL_DEFAULTS = {"k": [0, 5, 10], "n_bins": 15, "seed": 0, "split": "test"}
REQUIRED = ("task.kind", "train.beta")


class ConfigError(ValueError):
    """Raised for any invalid configuration; the message names the offending keys."""


def _task_keys(kind: str) -> set[str]:
    return set(inspect.signature(TASK_FACTORIES[kind]).parameters)


@dataclass
class RunConfig:
    task: dict
    model: dict
    train: TrainConfig
    eval: dict
    raw: dict

    def resolved(self) -> dict:
        """Every setting, defaults filled in, as flat dotted keys."""
        out = {}
        for k, v in self.task.items():
            out[f"task.{k}"] = v
        for k, v in self.model.items():
            out[f"model.{k}"] = v
        for k, v in self.train.to_dict().items():
            out[f"train.{k}"] = v
        for k, v in self.eval.items():
            out[f"eval.{k}"] = v
        return dict(sorted(out.items()))

    def model_spec(self, task: SyntheticTask) -> dict:
        return model_spec_for_task(task, **self.model)

    def with_seed(self, seed: int) -> RunConfig:
        """Same config with the data seed and the training seed both set to ``seed``."""
        raw = {**self.raw, "task.seed": seed, "train.seed": seed}
        return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object of dotted keys")
    problems = []
    for key in REQUIRED:
        if key not in raw:
            problems.append(f"missing required key {key!r}")
    groups: dict[str, dict] = {"task": {}, "model": {}, "train": {}, "eval": {}}
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if section not in groups or not name:
            problems.append(f"unknown key {key!r}")
            continue
        groups[section][name] = value
    if problems:
        raise ConfigError("; ".join(problems))

    kind = groups["task"].get("kind")
    if kind not in TASK_FACTORIES:
        raise ConfigError(f"task.kind: expected one of {sorted(TASK_FACTORIES)}, got {kind!r}")
    task_allowed = _task_keys(kind) | {"kind"}
    train_allowed = {f.name for f in fields(TrainConfig)}
    model_allowed = MODEL_KEYS - ({"backbone_seed"} if kind == "regression" else set())
    for section, allowed in (("task", task_allowed), ("model", model_allowed),
                             ("train", train_allowed), ("eval", set(EVAL_DEFAULTS))):
        for name in sorted(set(groups[section]) - allowed):
            problems.append(f"unknown key '{section}.{name}'")
    if problems:
        raise ConfigError("; ".join(problems))

    task = dict(groups["task"])
    sig = inspect.signature(TASK_FACTORIES[kind]).parameters
    for name, p in sig.items():
        task.setdefault(name, p.default)
    try:
        train = TrainConfig.from_dict(groups["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ev = {**EVAL_DEFAULTS, **groups["eval"]}
    if ev["split"] not in ("val", "test"):
        raise ConfigError(f"eval.split: expected 'val' or 'test', got {ev['split']!r}")
    return RunConfig(task, dict(groups["model"]), train, ev, dict(raw))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(raw)


def build_task(cfg: RunConfig) -> SyntheticTask:
    params = dict(cfg.task)
    kind = params.pop("kind")
    try:
        return TASK_FACTORIES[kind](**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
