"""Parameter-efficient tuning: BitFit, LoRA, prefix-tuning, top-k, and restore.

Every strategy is expressed as a ``ParamPartition`` over the union of the
backbone, head and adapter stores. The head is trainable under every
partition except the degenerate empty one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .backbone import Backbone, is_encoder_param
from .errors import CheckpointError, ConfigError, ContractError
from .head import Head
from .numcore import Tensor
from .params import ParamStore

ADAPTER_PREFIX = "adapter."
LORA_TARGETS = ("q", "v")


@dataclass(frozen=True)
class ParamPartition:
    trainable: frozenset
    frozen: frozenset

    def __post_init__(self):
        overlap = self.trainable & self.frozen
        if overlap:
            raise ContractError(f"names both trainable and frozen: {sorted(overlap)[:5]}")

    @classmethod
    def over(cls, stores: Iterable[ParamStore], trainable: Iterable[str]) -> "ParamPartition":
        everything = {n for s in stores for n in s}
        trainable = frozenset(trainable)
        unknown = trainable - everything
        if unknown:
            raise ContractError(f"unknown parameter names: {sorted(unknown)[:5]}")
        return cls(trainable, frozenset(everything - trainable))

    def apply(self, stores: Iterable[ParamStore]) -> None:
        for s in stores:
            s.set_trainable(n for n in s if n in self.trainable)

    def frozen_digests(self, stores: Iterable[ParamStore]) -> dict[str, str]:
        return {n: s.digest(n) for s in stores for n in s if n in self.frozen}

    def to_dict(self) -> dict:
        return {"trainable": sorted(self.trainable), "frozen": sorted(self.frozen)}


def is_backbone_name(name: str) -> bool:
    return is_encoder_param(name) and not name.startswith(("head.", ADAPTER_PREFIX))


class LoraAdapter:
    """Low-rank deltas on the query and value projections of every layer.

    For a projection with weight ``W`` ([d_in, d_out], applied as ``x @ W``)
    the adapter adds ``(alpha / r) * x @ A^T @ B^T`` where ``A`` is
    [r, d_in] and ``B`` is [d_out, r]. ``B`` starts at zero.
    """

    def __init__(self, params: ParamStore, rank: int, alpha: float):
        self.params = params
        self.rank = rank
        self.alpha = alpha

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def adjust(self, out: Tensor, x: Tensor, layer: int, proj: str) -> Tensor:
        if proj not in LORA_TARGETS:
            return out
        a = self.params[f"adapter.lora.layer.{layer}.{proj}.A"]
        b = self.params[f"adapter.lora.layer.{layer}.{proj}.B"]
        return out + (x @ a.transpose() @ b.transpose()) * self.scale

    def delta(self, layer: int, proj: str) -> np.ndarray:
        """Effective weight change in ``x @ W`` layout, i.e. ``scale * (B A)^T``."""
        a = self.params[f"adapter.lora.layer.{layer}.{proj}.A"].data
        b = self.params[f"adapter.lora.layer.{layer}.{proj}.B"].data
        return (self.scale * (b @ a)).T


class PrefixState:
    """Per-layer learned key and value prefixes of shape [L, d_model].

    Prefix slots carry no position embedding and are visible to every query.
    """

    def __init__(self, params: ParamStore, length: int, n_layers: int):
        self.params = params
        self.length = length
        self.n_layers = n_layers

    @property
    def keys(self) -> list[Tensor]:
        return [self.params[f"adapter.prefix.layer.{i}.key"] for i in range(self.n_layers)]

    @property
    def values(self) -> list[Tensor]:
        return [self.params[f"adapter.prefix.layer.{i}.value"] for i in range(self.n_layers)]


def model_stores(bb: Backbone, head: Head | None = None) -> list[ParamStore]:
    stores = [bb.params]
    if head is not None:
        stores.append(head.params)
    if bb.lora is not None:
        stores.append(bb.lora.params)
    if bb.prefix is not None:
        stores.append(bb.prefix.params)
    return stores


def _head_names(head: Head | None) -> list[str]:
    return [] if head is None else list(head.params)


def full_partition(bb: Backbone, head: Head | None = None) -> ParamPartition:
    """Every encoder tensor plus the head; the MLM output layer stays frozen."""
    return ParamPartition.over(model_stores(bb, head), bb.encoder_names() + _head_names(head))


def linear_probe_partition(bb: Backbone, head: Head) -> ParamPartition:
    return ParamPartition.over(model_stores(bb, head), _head_names(head))


def apply_bitfit(bb: Backbone, head: Head | None = None) -> ParamPartition:
    """Encoder bias terms (layer-norm biases included) plus the head."""
    biases = [n for n in bb.encoder_names() if n.endswith(".bias")]
    return ParamPartition.over(model_stores(bb, head), biases + _head_names(head))


def attach_lora(
    bb: Backbone, r: int, alpha: float | None = None, seed: int = 0, head: Head | None = None
) -> tuple[LoraAdapter, ParamPartition]:
    """Attach rank-``r`` adapters to every query and value projection.

    ``alpha`` defaults to ``r`` (scale 1). ``A`` draws from N(0, 1/d_in).
    """
    d = bb.config.d_model
    if not 1 <= r <= d:
        raise ConfigError(f"LoRA rank must lie in [1, {d}], got {r}")
    if bb.lora is not None:
        raise ContractError("a LoRA adapter is already attached")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i in range(bb.config.n_layers):
        for proj in LORA_TARGETS:
            store[f"adapter.lora.layer.{i}.{proj}.A"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(r, d)))
            store[f"adapter.lora.layer.{i}.{proj}.B"] = Tensor(np.zeros((d, r)))
    adapter = LoraAdapter(store, r, float(r if alpha is None else alpha))
    bb.lora = adapter
    return adapter, ParamPartition.over(model_stores(bb, head), list(store) + _head_names(head))


def merge_lora(bb: Backbone, adapter: LoraAdapter | None = None) -> Backbone:
    """Fold the adapter into the projection weights and detach it."""
    adapter = adapter or bb.lora
    if adapter is None or bb.lora is not adapter:
        raise ContractError("merge_lora needs the adapter currently attached to the backbone")
    for i in range(bb.config.n_layers):
        for proj in LORA_TARGETS:
            w = bb.params[f"layer.{i}.attn.{proj}.weight"]
            w.data = (w.data + adapter.delta(i, proj)).astype(w.data.dtype)
    bb.lora = None
    return bb


def attach_prefix(
    bb: Backbone, length: int, seed: int = 0, head: Head | None = None, init_std: float = 0.5
) -> tuple[PrefixState, ParamPartition]:
    """Attach ``length`` key/value prefix vectors to every attention layer."""
    cfg = bb.config
    if not 0 <= length <= cfg.max_seq_len:
        raise ConfigError(f"prefix length must lie in [0, {cfg.max_seq_len}], got {length}")
    if bb.prefix is not None:
        raise ContractError("a prefix is already attached")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i in range(cfg.n_layers):
        store[f"adapter.prefix.layer.{i}.key"] = Tensor(rng.normal(0.0, init_std, size=(length, cfg.d_model)))
        store[f"adapter.prefix.layer.{i}.value"] = Tensor(rng.normal(0.0, init_std, size=(length, cfg.d_model)))
    state = PrefixState(store, length, cfg.n_layers)
    bb.prefix = state
    return state, ParamPartition.over(model_stores(bb, head), list(store) + _head_names(head))


def apply_topk(bb: Backbone, head: Head | None, k: int) -> ParamPartition:
    """Train the top ``k`` encoder layers and the head.

    Embeddings belong to no layer; they train only when ``k`` covers every
    layer, which makes ``k = n_layers`` identical to full finetuning.
    """
    n = bb.config.n_layers
    if not 1 <= k <= n:
        raise ConfigError(f"top-k needs 1 <= k <= {n}, got {k}")
    if k == n:
        return full_partition(bb, head)
    layers = {f"layer.{i}." for i in range(n - k, n)}
    names = [name for name in bb.encoder_names() if any(name.startswith(p) for p in layers)]
    return ParamPartition.over(model_stores(bb, head), names + _head_names(head))


def restore_backbone(bb: Backbone, snapshot: dict, reserve: bool = False) -> Backbone:
    """Reset every backbone tensor to ``snapshot`` and detach all adapters.

    With ``reserve=True`` nothing is reset: adapters stay attached and tuned
    values are kept, only the name/shape check runs.
    """
    store = bb.params
    if set(snapshot) != set(store):
        missing = sorted(set(store) - set(snapshot))
        extra = sorted(set(snapshot) - set(store))
        raise CheckpointError(f"snapshot names differ from backbone: missing {missing[:3]}, extra {extra[:3]}")
    for name, arr in snapshot.items():
        if tuple(arr.shape) != store[name].shape:
            raise CheckpointError(f"snapshot shape mismatch for {name!r}: {arr.shape} vs {store[name].shape}")
    if reserve:
        return bb
    for name, arr in snapshot.items():
        t = store[name]
        t.data = np.array(arr, dtype=t.data.dtype)
        t.grad = None
    bb.lora = None
    bb.prefix = None
    return bb


def trainable_fraction(partition: ParamPartition, stores: Iterable[ParamStore]) -> float:
    """Trainable backbone-plus-adapter values over backbone values.

    Head tensors and the MLM output layer count in neither numerator nor
    denominator.
    """
    trainable = backbone = 0
    for s in stores:
        for name, t in s.items():
            if name.startswith("head."):
                continue
            if is_backbone_name(name):
                backbone += t.size
                if name in partition.trainable:
                    trainable += t.size
            elif name.startswith(ADAPTER_PREFIX) and name in partition.trainable:
                trainable += t.size
    return trainable / backbone if backbone else 0.0


def lora_param_count(n_layers: int, r: int, d_in: int, d_out: int) -> int:
    return n_layers * len(LORA_TARGETS) * r * (d_in + d_out)


def prefix_param_count(n_layers: int, length: int, d_model: int) -> int:
    return n_layers * 2 * length * d_model

