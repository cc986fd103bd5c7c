"""Miniature post-LN transformer encoder with masked-token pretraining.

Token ids 0-3 are reserved (``PAD``, ``CLS``, ``SEP``, ``MASK``); position 0
of every sequence holds ``CLS`` and its final hidden state is the pooled
feature handed to a classification head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, OutOfRangeError, SequenceLengthError, TrainingError
from .numcore import Tensor
from .optim import AdamW, OptimConfig
from .params import ParamStore

logger = logging.getLogger(__name__)

PAD, CLS, SEP, MASK = 0, 1, 2, 3
N_SPECIAL = 4
MASK_RATE = 0.15
_NEG_INF = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    max_seq_len: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported; set it to 0")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError(f"vocab_size must exceed the {N_SPECIAL} reserved ids")

    def to_dict(self):
        return asdict(self)


def parameter_shapes(cfg: BackboneConfig) -> dict[str, tuple]:
    """Every backbone tensor name and shape, in initialisation order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "embed.token.weight": (cfg.vocab_size, d),
        "embed.position.weight": (cfg.max_seq_len, d),
        "embed.norm.weight": (d,),
        "embed.norm.bias": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer.{i}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        shapes[f"{p}.ffn.in.weight"] = (d, f)
        shapes[f"{p}.ffn.in.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, d)
        shapes[f"{p}.ffn.out.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
    shapes["mlm.out.weight"] = (d, cfg.vocab_size)
    shapes["mlm.out.bias"] = (cfg.vocab_size,)
    return shapes


def is_encoder_param(name: str) -> bool:
    """True for feature-extractor tensors; the MLM output layer is pretraining-only."""
    return not name.startswith("mlm.")


class Backbone:
    """Encoder parameters plus whatever adapters are currently attached.

    ``lora`` and ``prefix`` are set by :mod:`ehtune.pet`; when present they
    take part in every forward pass.
    """

    def __init__(self, config: BackboneConfig, params: ParamStore):
        expected = parameter_shapes(config)
        if params.shapes() != expected:
            raise ConfigError("parameter store does not match the backbone config")
        self.config = config
        self.params = params
        self.lora = None
        self.prefix = None

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if is_encoder_param(n)]

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be a [batch, seq] array, got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len={self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise OutOfRangeError(
                f"token ids must lie in [0, {self.config.vocab_size}); got [{tokens.min()}, {tokens.max()}]"
            )
        return tokens.astype(np.int64, copy=False)

    def _project(self, x: Tensor, layer: int, proj: str) -> Tensor:
        p = self.params
        out = x @ p[f"layer.{layer}.attn.{proj}.weight"] + p[f"layer.{layer}.attn.{proj}.bias"]
        if self.lora is not None:
            out = self.lora.adjust(out, x, layer, proj)
        return out

    def hidden_states(self, tokens, prefix=None) -> Tensor:
        """Final-layer hidden states, shape [batch, seq, d_model]."""
        tokens = self.check_tokens(tokens)
        cfg, p = self.config, self.params
        prefix = self.prefix if prefix is None else prefix
        b, s = tokens.shape
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        n_prefix = 0 if prefix is None else prefix.length

        x = nc.embedding(p["embed.token.weight"], tokens) + p["embed.position.weight"][:s]
        x = nc.layer_norm(x, p["embed.norm.weight"], p["embed.norm.bias"])

        key_mask = np.where(tokens == PAD, _NEG_INF, 0.0)
        if n_prefix:
            key_mask = np.concatenate([np.zeros((b, n_prefix)), key_mask], axis=1)
        key_mask = Tensor(key_mask[:, None, None, :])
        scale = 1.0 / math.sqrt(dh)

        for i in range(cfg.n_layers):
            q = self._project(x, i, "q")
            k = self._project(x, i, "k")
            v = self._project(x, i, "v")
            if n_prefix:
                k = nc.concat([nc.broadcast_to(prefix.keys[i], (b, n_prefix, cfg.d_model)), k], axis=1)
                v = nc.concat([nc.broadcast_to(prefix.values[i], (b, n_prefix, cfg.d_model)), v], axis=1)
            ctx_len = s + n_prefix
            qh = q.reshape(b, s, h, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(b, ctx_len, h, dh).transpose(0, 2, 3, 1)
            vh = v.reshape(b, ctx_len, h, dh).transpose(0, 2, 1, 3)
            att = nc.softmax_rows((qh @ kh) * scale + key_mask)
            ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(b, s, cfg.d_model)
            attn_out = self._project(ctx, i, "o")
            x = nc.layer_norm(x + attn_out, p[f"layer.{i}.norm1.weight"], p[f"layer.{i}.norm1.bias"])
            ff = nc.gelu(x @ p[f"layer.{i}.ffn.in.weight"] + p[f"layer.{i}.ffn.in.bias"])
            ff = ff @ p[f"layer.{i}.ffn.out.weight"] + p[f"layer.{i}.ffn.out.bias"]
            x = nc.layer_norm(x + ff, p[f"layer.{i}.norm2.weight"], p[f"layer.{i}.norm2.bias"])
        return x

    def forward_features(self, tokens, prefix=None) -> Tensor:
        """Pooled features: the final hidden state at position 0, shape [batch, d_model]."""
        return self.hidden_states(tokens, prefix)[:, 0, :]

    def forward_mlm_loss(self, tokens, mask_positions, original_ids) -> Tensor:
        """Cross-entropy of the MLM output layer at the masked positions only.

        ``mask_positions`` is a pair ``(rows, cols)`` of index arrays.
        """
        rows, cols = (np.asarray(a, dtype=np.int64) for a in mask_positions)
        if rows.size == 0:
            raise ContractError("forward_mlm_loss needs at least one masked position")
        hidden = self.hidden_states(tokens)
        picked = hidden[rows, cols]
        logits = picked @ self.params["mlm.out.weight"] + self.params["mlm.out.bias"]
        return nc.cross_entropy(logits, original_ids)

    def features(self, tokens, batch_size: int = 256) -> np.ndarray:
        """Gradient-free pooled features as a numpy array."""
        tokens = np.asarray(tokens)
        out = []
        with nc.no_grad():
            for start in range(0, len(tokens), batch_size):
                out.append(self.forward_features(tokens[start : start + batch_size]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.d_model), np.float32)


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Seeded initialisation.

    Projection and output weights draw from N(0, 1/fan_in), embeddings from
    N(0, 0.1^2); biases start at zero and layer-norm gains at one.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif "norm" in name:
            arr = np.ones(shape)
        elif name.startswith("embed."):
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        store[name] = Tensor(arr)
    return Backbone(cfg, store)


def mask_batch(sequences: np.ndarray, rng: np.random.Generator, rate: float = MASK_RATE):
    """Replace ``rate`` of each row's content positions by ``MASK``.

    ``sequences`` already carries ``CLS`` at column 0; at least one content
    position per row is masked. Returns (masked tokens, (rows, cols), original ids).
    """
    tokens = np.array(sequences, dtype=np.int64)
    rows, cols = [], []
    for r in range(tokens.shape[0]):
        content = np.flatnonzero(tokens[r, 1:] != PAD) + 1
        n = max(1, int(round(rate * len(content))))
        chosen = np.sort(rng.choice(content, size=n, replace=False))
        rows.extend([r] * n)
        cols.extend(chosen.tolist())
    rows, cols = np.asarray(rows), np.asarray(cols)
    original = tokens[rows, cols].copy()
    tokens[rows, cols] = MASK
    return tokens, (rows, cols), original


def with_cls(content: np.ndarray) -> np.ndarray:
    content = np.asarray(content, dtype=np.int64)
    return np.concatenate([np.full((len(content), 1), CLS, dtype=np.int64), content], axis=1)


def mlm_eval_loss(bb: Backbone, sequences: np.ndarray, seed: int = 0, batch_size: int = 256) -> float:
    """Mean masked-token loss over ``sequences`` (content only) with a fixed masking."""
    rng = np.random.default_rng(seed)
    tokens = with_cls(sequences)
    total, count = 0.0, 0
    with nc.no_grad():
        for start in range(0, len(tokens), batch_size):
            masked, pos, orig = mask_batch(tokens[start : start + batch_size], rng)
            loss = bb.forward_mlm_loss(masked, pos, orig).item()
            total += loss * len(orig)
            count += len(orig)
    return total / count


@dataclass
class PretrainResult:
    backbone: Backbone
    snapshot: dict
    losses: list


def pretrain(
    bb: Backbone,
    corpus: np.ndarray,
    steps: int,
    optim: OptimConfig,
    seed: int = 0,
    log_every: int = 0,
) -> PretrainResult:
    """Masked-token training of every backbone tensor on ``corpus`` content rows.

    The returned snapshot is the frozen pretrained state used downstream.
    """
    corpus = np.asarray(corpus)
    if len(corpus) == 0:
        raise ContractError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    tokens = with_cls(corpus)
    bb.params.set_trainable(bb.params)
    opt = AdamW(optim, total_steps=max(steps, 1))
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(tokens), size=optim.batch_size)
        masked, pos, orig = mask_batch(tokens[idx], rng)
        bb.params.zero_grad()
        loss = bb.forward_mlm_loss(masked, pos, orig)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("pretraining loss is not finite", step=step)
        loss.backward()
        opt.step([bb.params])
        losses.append(value)
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, value)
    bb.params.set_trainable(())
    return PretrainResult(bb, bb.params.snapshot(), losses)
