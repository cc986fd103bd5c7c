"""Efficient head finetuning: tune a classification head with a parameter-efficient
method, restore the pretrained backbone, then finetune everything.

Everything runs on a small numpy autodiff engine (``ehtune.numcore``).
"""

from .backbone import Backbone, BackboneConfig, build_backbone, pretrain
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    EhtuneError,
    OutOfRangeError,
    SequenceLengthError,
    ShapeError,
    TrainingError,
)
from .estimator import EHFTClassifier, EHFTRegressor, PCA2D, BackboneFeatures, check_tokens
from .experiment import ExperimentConfig, load_backbone, load_config, pretrain_backbone, save_checkpoint
from .head import Head, build_head
from .metrics import feature_change, param_distance, pca_project_2d, steps_to_threshold
from .optim import AdamW, OptimConfig, lr_at, split_budget
from .pet import apply_bitfit, apply_topk, attach_lora, attach_prefix, merge_lora, restore_backbone
from .tasks import TASK_NAMES, Task, evaluate, make_task
from .trainer import STRATEGIES, PetConfig, RunRecord, TrainPlan, run_strategy, run_suite, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "Backbone",
    "BackboneConfig",
    "BackboneFeatures",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "EHFTClassifier",
    "EHFTRegressor",
    "EhtuneError",
    "ExperimentConfig",
    "Head",
    "OptimConfig",
    "OutOfRangeError",
    "PCA2D",
    "PetConfig",
    "RunRecord",
    "STRATEGIES",
    "SequenceLengthError",
    "ShapeError",
    "TASK_NAMES",
    "Task",
    "TrainPlan",
    "TrainingError",
    "apply_bitfit",
    "apply_topk",
    "attach_lora",
    "attach_prefix",
    "build_backbone",
    "build_head",
    "check_tokens",
    "evaluate",
    "feature_change",
    "lr_at",
    "load_backbone",
    "load_config",
    "make_task",
    "merge_lora",
    "param_distance",
    "pca_project_2d",
    "pretrain",
    "pretrain_backbone",
    "restore_backbone",
    "run_strategy",
    "run_suite",
    "save_checkpoint",
    "split_budget",
    "steps_to_threshold",
    "train",
]
