"""Strategy orchestration under a shared optimiser-step budget.

Two-stage strategies spend ``stage1_steps`` on a restricted partition (head
only for LP-FT, head plus a PET method for EH-FT) and the remaining steps on
full finetuning. Each stage gets a fresh AdamW state and its own warmup and
decay schedule.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .backbone import Backbone
from .errors import ConfigError, ContractError, TrainingError
from .head import Head, build_head
from .metrics import FeatureSnapshot, feature_change, param_distance, pca_project_2d, probe_indices
from .optim import AdamW, OptimConfig, split_budget
from .params import ParamStore
from .pet import (
    ParamPartition,
    apply_bitfit,
    apply_topk,
    attach_lora,
    attach_prefix,
    full_partition,
    is_backbone_name,
    linear_probe_partition,
    model_stores,
    restore_backbone,
    trainable_fraction,
)
from .tasks import Task, evaluate

logger = logging.getLogger(__name__)

TWO_STAGE = (
    "lp-ft",
    "eh-ft-bitfit",
    "eh-ft-lora",
    "eh-ft-prefix",
    "eh-ft-reserve-bitfit",
    "eh-ft-reserve-lora",
)
SINGLE_STAGE = ("ft", "lp", "topk", "pet-bitfit", "pet-lora", "pet-prefix")
STRATEGIES = SINGLE_STAGE[:3] + TWO_STAGE + SINGLE_STAGE[3:]
GRAD_LOG_STEPS = 50


@dataclass(frozen=True)
class PetConfig:
    lora_rank: int = 8
    lora_alpha: float | None = None
    prefix_length: int = 8
    topk: int = 1


@dataclass(frozen=True)
class TrainPlan:
    strategy: str
    total_steps: int
    stage1_fraction: float = 0.10
    stage1_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=5e-3))
    stage2_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr_peak=1e-4))
    seed: int = 0
    pet: PetConfig = field(default_factory=PetConfig)
    d_mid: int | None = None
    stage1_steps_override: int | None = None
    eval_every: int = 50
    distance_every: int = 10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.strategy in SINGLE_STAGE and (self.stage1_fraction or self.stage1_steps_override):
            object.__setattr__(self, "stage1_fraction", 0.0)
            object.__setattr__(self, "stage1_steps_override", None)
        if not 0 <= self.stage1_fraction < 1:
            raise ConfigError(f"stage1_fraction must lie in [0, 1), got {self.stage1_fraction}")
        if self.stage1_steps_override is not None and not 0 <= self.stage1_steps_override <= self.total_steps:
            raise ConfigError("stage1_steps_override must lie in [0, total_steps]")

    @property
    def two_stage(self) -> bool:
        return self.strategy in TWO_STAGE

    @property
    def pet_method(self) -> str | None:
        for m in ("bitfit", "lora", "prefix"):
            if self.strategy.endswith(m):
                return m
        return None

    @property
    def reserve(self) -> bool:
        return "reserve" in self.strategy

    def budget(self) -> tuple[int, int]:
        if self.stage1_steps_override is not None:
            return self.stage1_steps_override, self.total_steps - self.stage1_steps_override
        return split_budget(self.total_steps, self.stage1_fraction)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        d = dict(d)
        d["stage1_optim"] = OptimConfig(**d["stage1_optim"])
        d["stage2_optim"] = OptimConfig(**d["stage2_optim"])
        d["pet"] = PetConfig(**d["pet"])
        return cls(**d)


@dataclass
class RunRecord:
    """Everything logged by one run; JSON-serialisable via ``to_dict``."""

    plan: dict
    task: str
    metric_name: str
    backbone_config: dict
    stage1_steps: int
    stage2_steps: int
    optimizer_steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    loss_stage: list = field(default_factory=list)
    dev_evals: list = field(default_factory=list)
    feature_change: dict = field(default_factory=dict)
    param_distance: list = field(default_factory=list)
    param_distance_final: float = 0.0
    grad_norms: list = field(default_factory=list)
    trainable_fraction: dict = field(default_factory=dict)
    partitions: dict = field(default_factory=dict)
    frozen_checks: dict = field(default_factory=dict)
    projection: dict = field(default_factory=dict)
    final_metric: float | None = None
    initial_loss: float | None = None
    wall_clock: float = 0.0

    @property
    def strategy(self) -> str:
        return self.plan["strategy"]

    @property
    def seed(self) -> int:
        return self.plan["seed"]

    def stage_losses(self, stage: int) -> list:
        return [l for l, s in zip(self.losses, self.loss_stage) if s == stage]

    def final_stage_losses(self) -> list:
        return self.stage_losses(2)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def clone_backbone(bb: Backbone) -> Backbone:
    store = ParamStore((n, nc.Tensor(t.data)) for n, t in bb.params.items())
    return Backbone(bb.config, store)


def batch_stream(rng: np.random.Generator, n: int, batch_size: int):
    """Endless minibatches drawn from per-epoch shuffles."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) == batch_size or n < batch_size:
                yield idx


def task_loss(head: Head, features: nc.Tensor, y, regression: bool) -> nc.Tensor:
    logits = head.forward_logits(features)
    if regression:
        return nc.mse_loss(logits, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return nc.cross_entropy(logits, y)


def predict(bb: Backbone, head: Head, X, regression: bool, batch_size: int = 256) -> np.ndarray:
    outs = []
    with nc.no_grad():
        for start in range(0, len(X), batch_size):
            logits = head.forward_logits(bb.forward_features(X[start : start + batch_size])).data
            outs.append(logits[:, 0] if regression else logits)
    out = np.concatenate(outs) if outs else np.zeros((0,))
    return out if regression else out.argmax(axis=1)


def _grad_norm(stores, select) -> float:
    total = 0.0
    for s in stores:
        for name, t in s.items():
            if t.grad is not None and select(name):
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


@dataclass
class TrainedModel:
    record: RunRecord
    backbone: Backbone
    head: Head


class _Run:
    """Mutable state of one strategy execution."""

    def __init__(self, plan: TrainPlan, pretrained: Backbone, task: Task):
        self.plan = plan
        self.task = task
        self.snapshot = pretrained.params.snapshot()
        self.bb = clone_backbone(pretrained)
        d_mid = plan.d_mid or 4 * pretrained.config.d_model
        self.head = build_head(pretrained.config.d_model, d_mid, task.head_outputs, seed=_seed(plan.seed, 1))
        # one shuffled stream per stage, so stage-2 batches do not depend on stage-1 length
        self.streams = {
            stage: batch_stream(np.random.default_rng(_seed(plan.seed, 2 + 2 * (stage - 1))), len(task.train_X), bs)
            for stage, bs in ((1, plan.stage1_optim.batch_size), (2, plan.stage2_optim.batch_size))
        }
        self.probe = task.train_X[probe_indices(len(task.train_X))]
        self.probe_id = f"{task.name}:train[:{len(self.probe)}]"
        s1, s2 = plan.budget()
        self.record = RunRecord(
            plan=plan.to_dict(),
            task=task.name,
            metric_name=task.metric,
            backbone_config=pretrained.config.to_dict(),
            stage1_steps=s1,
            stage2_steps=s2,
        )
        self.global_step = 0
        self.steps_per_epoch = max(1, len(task.train_X) // plan.stage2_optim.batch_size)

    def snapshot_features(self, tag: str) -> FeatureSnapshot:
        return FeatureSnapshot(tag, self.bb.features(self.probe), self.probe_id)

    def encoder_state(self) -> dict:
        return {n: t.data for n, t in self.bb.params.items() if is_backbone_name(n)}

    def dev_metric(self) -> float | None:
        if len(self.task.dev_X) == 0:
            return None
        preds = predict(self.bb, self.head, self.task.dev_X, self.task.is_regression)
        try:
            return evaluate(self.task.metric, preds, self.task.dev_y)
        except ContractError:  # constant regression output has no correlation
            return 0.0

    def log_distance(self):
        ref = {n: a for n, a in self.snapshot.items() if is_backbone_name(n)}
        self.record.param_distance.append([self.global_step, param_distance(self.encoder_state(), ref)])

    def train_stage(self, stage: int, steps: int, partition: ParamPartition, optim: OptimConfig):
        stores = model_stores(self.bb, self.head)
        partition.apply(stores)
        key = f"stage{stage}"
        self.record.partitions[key] = partition.to_dict()
        self.record.trainable_fraction[key] = trainable_fraction(partition, stores)
        digests = partition.frozen_digests(stores)
        checks = 0
        opt = AdamW(optim, total_steps=max(steps, 1))
        log_grads = stage == 2
        for step in range(steps):
            idx = next(self.streams[stage])
            for s in stores:
                s.zero_grad()
            feats = self.bb.forward_features(self.task.train_X[idx])
            loss = task_loss(self.head, feats, self.task.train_y[idx], self.task.is_regression)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{self.plan.strategy} loss is not finite in stage {stage}", step=self.global_step)
            loss.backward()
            if log_grads and step < GRAD_LOG_STEPS:
                self.record.grad_norms.append(
                    {
                        "step": step,
                        "head": _grad_norm(stores, lambda n: n.startswith("head.")),
                        "backbone": _grad_norm(stores, is_backbone_name),
                    }
                )
            opt.step(stores)
            if self.record.initial_loss is None:
                self.record.initial_loss = value
            self.record.losses.append(value)
            self.record.loss_stage.append(stage)
            self.global_step += 1
            if (step + 1) % self.steps_per_epoch == 0:
                self._check_frozen(partition, stores, digests, key)
                checks += 1
            if self.global_step % self.plan.distance_every == 0:
                self.log_distance()
            if self.plan.eval_every and self.global_step % self.plan.eval_every == 0:
                self.record.dev_evals.append([self.global_step, self.dev_metric()])
        self._check_frozen(partition, stores, digests, key)
        self.record.frozen_checks[key] = {"checks": checks + 1, "frozen_tensors": len(digests), "ok": True}
        self.record.optimizer_steps.append(opt.step_index)
        for s in stores:
            s.set_trainable(())

    def _check_frozen(self, partition, stores, digests, key):
        now = partition.frozen_digests(stores)
        changed = [n for n in digests if now.get(n) != digests[n]]
        if changed:
            raise TrainingError(f"frozen tensors changed during {key}: {changed[:5]}", step=self.global_step)

    def stage_one_partition(self) -> ParamPartition:
        plan, bb, head = self.plan, self.bb, self.head
        method = plan.pet_method
        seed = _seed(plan.seed, 3)
        if plan.strategy in ("lp", "lp-ft"):
            return linear_probe_partition(bb, head)
        if method == "bitfit":
            return apply_bitfit(bb, head)
        if method == "lora":
            return attach_lora(bb, plan.pet.lora_rank, plan.pet.lora_alpha, seed=seed, head=head)[1]
        if method == "prefix":
            return attach_prefix(bb, plan.pet.prefix_length, seed=seed, head=head)[1]
        raise ConfigError(f"strategy {plan.strategy!r} has no stage-1 partition")

    def record_projection(self):
        """2-D PCA of head mid-layer features on probe (train) and dev examples."""
        dev = self.task.dev_X[:256]
        with nc.no_grad():
            train_mid = self.head.mid_features(self.bb.forward_features(self.probe)).data
            dev_mid = self.head.mid_features(self.bb.forward_features(dev)).data if len(dev) else np.zeros((0, self.head.d_mid))
        mids = np.concatenate([train_mid, dev_mid])
        labels = np.concatenate([self.task.train_y[: len(self.probe)], self.task.dev_y[: len(dev)]])
        splits = ["train"] * len(train_mid) + ["dev"] * len(dev_mid)
        try:
            proj = pca_project_2d(mids)
        except ContractError:
            return
        self.record.projection = {
            "explained_variance": proj.explained_variance.tolist(),
            "points": [[float(x), float(y), float(l), s] for (x, y), l, s in zip(proj.points, labels, splits)],
        }

    def execute(self) -> TrainedModel:
        plan, rec = self.plan, self.record
        t0 = time.perf_counter()
        pre = self.snapshot_features("pretrained")
        s1, s2 = plan.budget()
        self.log_distance()
        if plan.two_stage:
            self.train_stage(1, s1, self.stage_one_partition(), plan.stage1_optim)
            stage1_end = self.snapshot_features("stage1_end")
            rec.feature_change["pre_stage1"] = feature_change(pre, stage1_end)
            if plan.strategy != "lp-ft":
                restore_backbone(self.bb, self.snapshot, reserve=plan.reserve)
            restored = self.snapshot_features("restored")
            rec.feature_change["pre_restored"] = feature_change(pre, restored)
            self.record_projection()
            stores = model_stores(self.bb, self.head)
            extra = [n for s in stores for n in s if n.startswith("adapter.")]
            base = full_partition(self.bb, self.head)
            part = ParamPartition.over(stores, set(base.trainable) | set(extra))
            self.train_stage(2, s2, part, plan.stage2_optim)
            final = self.snapshot_features("final")
            rec.feature_change["stage1_final"] = feature_change(stage1_end, final)
        else:
            self.record_projection()
            if plan.strategy == "ft":
                part, optim = full_partition(self.bb, self.head), plan.stage2_optim
            elif plan.strategy == "topk":
                part, optim = apply_topk(self.bb, self.head, plan.pet.topk), plan.stage2_optim
            else:
                part, optim = self.stage_one_partition(), plan.stage1_optim
            self.train_stage(2, s2, part, optim)
            final = self.snapshot_features("final")
        rec.feature_change["pre_final"] = feature_change(pre, final)
        if not rec.param_distance or rec.param_distance[-1][0] != self.global_step:
            self.log_distance()
        rec.param_distance_final = rec.param_distance[-1][1]
        rec.final_metric = self.dev_metric()
        rec.wall_clock = time.perf_counter() - t0
        return TrainedModel(rec, self.bb, self.head)


def _seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream])


def train(plan: TrainPlan, pretrained: Backbone, task: Task) -> TrainedModel:
    """Run ``plan`` from a copy of ``pretrained``; the caller's backbone is untouched."""
    return _Run(plan, pretrained, task).execute()


def run_strategy(plan: TrainPlan, pretrained: Backbone, task: Task) -> RunRecord:
    return train(plan, pretrained, task).record


def _run_job(args):
    plan, pretrained, task = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return run_strategy(plan, pretrained, task)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EHTUNE_THREADS", "1")))
    except ValueError:
        return 1


def run_many(jobs: list, workers: int | None = None) -> list:
    """Run ``(plan, pretrained, task)`` triples, in parallel when ``workers > 1``.

    Results come back in job order regardless of completion order.
    """
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [run_strategy(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def aggregate(records: list) -> list[dict]:
    """Mean and sample standard deviation of the final metric per (strategy, task).

    Rows are sorted by strategy then task, and seeds are sorted within a
    group, so the result does not depend on record order.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault((r.strategy, r.task), []).append(r)
    rows = []
    for (strategy, task), recs in sorted(groups.items()):
        recs = sorted(recs, key=lambda r: r.seed)
        vals = np.array([r.final_metric for r in recs], dtype=np.float64)
        rows.append(
            {
                "strategy": strategy,
                "task": task,
                "metric_name": recs[0].metric_name,
                "n_seeds": len(recs),
                "seeds": [r.seed for r in recs],
                "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            }
        )
    return rows


def run_suite(plans: list, tasks: list, seeds: list, pretrained: Backbone, workers: int | None = None):
    """Every (plan, task, seed) combination; returns ``(records, aggregate rows)``."""
    if not seeds:
        raise ConfigError("run_suite needs at least one seed")
    jobs = [(replace(p, seed=s), pretrained, t) for p in plans for t in tasks for s in seeds]
    records = run_many(jobs, workers)
    return records, aggregate(records)
