"""Two-layer tanh MLP classification head."""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Tensor
from .params import ParamStore

PREFIX = "head."


class Head:
    """logits = tanh(x @ W1 + b1) @ W2 + b2, with tensors named ``head.*``."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.d_model, self.d_mid = params["head.W1"].shape
        self.n_classes = params["head.W2"].shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.d_model, self.d_mid, self.n_classes

    def _check(self, features: Tensor):
        if features.ndim != 2 or features.shape[1] != self.d_model:
            raise ShapeError(f"head expects features [batch, {self.d_model}], got {features.shape}")

    def mid_features(self, features) -> Tensor:
        features = nc.as_tensor(features)
        self._check(features)
        p = self.params
        return nc.tanh(features @ p["head.W1"] + p["head.b1"])

    def forward_logits(self, features) -> Tensor:
        p = self.params
        return self.mid_features(features) @ p["head.W2"] + p["head.b2"]

    def state(self) -> dict:
        return self.params.snapshot()

    def install(self, state: dict) -> None:
        """Transplant head values from another head with identical dimensions."""
        shapes = {k: tuple(v.shape) for k, v in state.items()}
        if shapes != self.params.shapes():
            raise ShapeError(f"head dimension mismatch: have {self.params.shapes()}, got {shapes}")
        self.params.load(state)


def build_head(d_model: int, d_mid: int, n_classes: int, seed: int) -> Head:
    """Weights from N(0, 1/fan_in), zero biases."""
    if min(d_model, d_mid, n_classes) < 1:
        raise ConfigError(f"head dims must be >= 1, got {(d_model, d_mid, n_classes)}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store["head.W1"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), size=(d_model, d_mid)))
    store["head.b1"] = Tensor(np.zeros(d_mid))
    store["head.W2"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_mid), size=(d_mid, n_classes)))
    store["head.b2"] = Tensor(np.zeros(n_classes))
    return Head(store)


def head_param_count(d_model: int, d_mid: int, n_classes: int) -> int:
    return d_model * d_mid + d_mid + d_mid * n_classes + n_classes
