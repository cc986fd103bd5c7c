"""Experiment configuration, checkpoint files and atomic writes.

Config files are JSON objects whose keys mirror the dataclasses below;
unknown keys are rejected at every nesting level so that a typo can never
silently fall back to a default.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, build_backbone, mlm_eval_loss, parameter_shapes, pretrain
from .errors import CheckpointError, ConfigError
from .optim import OptimConfig
from .numcore import Tensor
from .params import ParamStore
from .tasks import GRAMMAR_ID, TASK_NAMES, generate_corpus
from .trainer import STRATEGIES, PetConfig, TrainPlan

CHECKPOINT_FORMAT = 1

# Desk budgets: optimiser steps per task, shared by every strategy.
DEFAULT_STEPS = {
    "topic-pair": 500,
    "pattern-parity": 2000,
    "segment-similarity": 300,
    "topic-pair-large": 300,
}


@dataclass(frozen=True)
class PretrainConfig:
    corpus_size: int = 20000
    steps: int = 2000
    seed: int = 0
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=2e-3, weight_decay=0.01))

    def __post_init__(self):
        if self.corpus_size < 10:
            raise ConfigError(f"corpus_size must be >= 10, got {self.corpus_size}")
        if self.steps < 0:
            raise ConfigError(f"pretraining steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tasks: tuple = ("topic-pair",)
    strategies: tuple = ("ft", "eh-ft-bitfit")
    total_steps: dict = field(default_factory=lambda: dict(DEFAULT_STEPS))
    stage1_fraction: float = 0.10
    pet: PetConfig = field(default_factory=PetConfig)
    stage1_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=5e-3))
    stage2_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=1e-4))
    seeds: tuple = (0, 1, 2, 3)
    task_seed: int = 0
    d_mid: int | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for t in self.tasks:
            if t not in TASK_NAMES:
                raise ConfigError(f"unknown task {t!r}; built-ins: {', '.join(TASK_NAMES)}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; valid: {', '.join(STRATEGIES)}")
        unknown = set(self.total_steps) - set(TASK_NAMES)
        if unknown:
            raise ConfigError(f"total_steps names unknown tasks: {sorted(unknown)}")
        if any(int(v) < 0 for v in self.total_steps.values()):
            raise ConfigError("total_steps values must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not 0 <= self.stage1_fraction < 1:
            raise ConfigError(f"stage1_fraction must lie in [0, 1), got {self.stage1_fraction}")

    def steps_for(self, task: str) -> int:
        return int(self.total_steps.get(task, DEFAULT_STEPS.get(task, 300)))

    def plan(self, strategy: str, task: str, seed: int = 0, **overrides) -> TrainPlan:
        kw = dict(
            strategy=strategy,
            total_steps=self.steps_for(task),
            stage1_fraction=self.stage1_fraction,
            stage1_optim=self.stage1_optim,
            stage2_optim=self.stage2_optim,
            seed=seed,
            pet=self.pet,
            d_mid=self.d_mid,
        )
        kw.update(overrides)
        return TrainPlan(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"], d["strategies"], d["seeds"] = list(self.tasks), list(self.strategies), list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")


_NESTED = {
    (ExperimentConfig, "backbone"): BackboneConfig,
    (ExperimentConfig, "pretrain"): PretrainConfig,
    (ExperimentConfig, "pet"): PetConfig,
    (ExperimentConfig, "stage1_optim"): OptimConfig,
    (ExperimentConfig, "stage2_optim"): OptimConfig,
    (PretrainConfig, "optim"): OptimConfig,
}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        kw[k] = _build(sub, v, f"{where}.{k}") if sub else v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"bad value in {where}: {e}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------- files


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def encode_array(arr) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(entry: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(entry["data"], validate=True)
        shape = tuple(int(s) for s in entry["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"malformed tensor entry: {e}") from None
    a = np.frombuffer(raw, dtype="<f4")
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor payload holds {a.size} values, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape).astype(np.float32)


def checkpoint_text(params: dict, config: dict | None = None) -> str:
    """Canonical checkpoint JSON: names sorted, float32 little-endian base64 payloads."""
    body = {
        "format_version": CHECKPOINT_FORMAT,
        "config": config or {},
        "params": {name: encode_array(params[name]) for name in sorted(params)},
    }
    return dump_json(body)


def save_checkpoint(path, params: dict, config: dict | None = None) -> None:
    atomic_write(path, checkpoint_text(params, config))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(params, config)`` from a checkpoint file."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON: {e}") from None
    if body.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {body.get('format_version')!r}")
    params = {name: decode_array(entry) for name, entry in body.get("params", {}).items()}
    return params, body.get("config", {})


def load_backbone(path, cfg: BackboneConfig) -> Backbone:
    """Build a backbone of shape ``cfg`` from a checkpoint, naming the first mismatch."""
    params, _ = read_checkpoint(path)
    expected = parameter_shapes(cfg)
    for name in sorted(set(expected) | set(params)):
        if name not in params:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected tensor {name!r}")
        if tuple(params[name].shape) != tuple(expected[name]):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, config needs {tuple(expected[name])}"
            )
    return Backbone(cfg, ParamStore((n, Tensor(params[n])) for n in expected))


@dataclass
class PretrainOutcome:
    backbone: Backbone
    losses: list
    heldout_before: float
    heldout_after: float

    def summary(self) -> dict:
        return {"heldout_mlm_loss_initial": self.heldout_before, "heldout_mlm_loss_final": self.heldout_after}


def pretrain_backbone(cfg: ExperimentConfig) -> PretrainOutcome:
    """Initialise from the pretraining seed and run masked-token training."""
    p = cfg.pretrain
    corpus = generate_corpus(GRAMMAR_ID, p.seed, p.corpus_size)
    bb = build_backbone(cfg.backbone, seed=p.seed)
    before = mlm_eval_loss(bb, corpus.heldout)
    result = pretrain(bb, corpus.train, p.steps, p.optim, seed=p.seed)
    return PretrainOutcome(result.backbone, result.losses, before, mlm_eval_loss(bb, corpus.heldout))
