"""Synthetic pretraining corpus, downstream tasks and evaluation metrics.

The generator is a Markov chain over (latent topic, token) pairs. Each of
``N_TOPICS`` topics owns a block of content tokens. At every position the
topic persists with probability ``STAY`` (otherwise it jumps uniformly to
another topic); the next token is, with probability ``P_SUCCESSOR``, a
deterministic topic-specific successor of the previous token, and otherwise
a draw from the topic's emission distribution (``BLOCK_MASS`` on the
topic's block with Zipf weights, the rest uniform over all content tokens).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .backbone import CLS, N_SPECIAL, PAD, SEP
from .errors import ConfigError, ContractError

VOCAB_SIZE = 64
N_CONTENT = VOCAB_SIZE - N_SPECIAL
N_TOPICS = 4
BLOCK = N_CONTENT // N_TOPICS
STAY = 0.9
P_SUCCESSOR = 0.7
BLOCK_MASS = 0.7
GRAMMAR_ID = "topics-v1"
CORPUS_SEQ_LEN = 24


@dataclass(frozen=True)
class Grammar:
    name: str
    emissions: np.ndarray  # [topics, content tokens]
    successors: np.ndarray  # [topics, content tokens] -> content index
    topic_transition: np.ndarray  # [topics, topics]

    @property
    def n_topics(self):
        return self.emissions.shape[0]

    @property
    def n_content(self):
        return self.emissions.shape[1]

    def joint_transition(self) -> np.ndarray:
        """Transition matrix over states ``z * n_content + t``."""
        k, v = self.emissions.shape
        out = np.zeros((k * v, k * v))
        for z in range(k):
            for t in range(v):
                row = out[z * v + t]
                for z2 in range(k):
                    pz = self.topic_transition[z, z2]
                    row[z2 * v : (z2 + 1) * v] += pz * (1.0 - P_SUCCESSOR) * self.emissions[z2]
                    row[z2 * v + self.successors[z2, t]] += pz * P_SUCCESSOR
        return out

    @lru_cache(maxsize=None)
    def stationary(self) -> np.ndarray:
        """Stationary distribution over (topic, token) states, shape [topics, content]."""
        p = self.joint_transition()
        w, vecs = np.linalg.eig(p.T)
        pi = np.real(vecs[:, np.argmin(np.abs(w - 1.0))])
        pi = np.abs(pi) / np.abs(pi).sum()
        return pi.reshape(self.n_topics, self.n_content)

    def token_marginal(self) -> np.ndarray:
        """Stationary unigram distribution over content tokens (ids offset by N_SPECIAL)."""
        return self.stationary().sum(axis=0)

    def __hash__(self):
        return hash(self.name)

    def __eq__(self, other):
        return isinstance(other, Grammar) and other.name == self.name


@lru_cache(maxsize=None)
def get_grammar(name: str = GRAMMAR_ID) -> Grammar:
    if name != GRAMMAR_ID:
        raise ConfigError(f"unknown grammar {name!r}; available: {GRAMMAR_ID!r}")
    zipf = 1.0 / np.arange(1, BLOCK + 1)
    zipf /= zipf.sum()
    emissions = np.full((N_TOPICS, N_CONTENT), (1.0 - BLOCK_MASS) / N_CONTENT)
    successors = np.zeros((N_TOPICS, N_CONTENT), dtype=np.int64)
    for z in range(N_TOPICS):
        block = np.arange(z * BLOCK, (z + 1) * BLOCK)
        emissions[z, block] += BLOCK_MASS * zipf
        # inside the block: a fixed 15-cycle with stride 7; outside: hashed into the block
        for t in range(N_CONTENT):
            pos = (t - z * BLOCK) % BLOCK if t in block else (3 * t + z) % BLOCK
            successors[z, t] = z * BLOCK + (pos + 7) % BLOCK
    trans = np.full((N_TOPICS, N_TOPICS), (1.0 - STAY) / (N_TOPICS - 1))
    np.fill_diagonal(trans, STAY)
    return Grammar(name, emissions, successors, trans)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    u = rng.random(probs.shape[0])[:, None]
    idx = (probs.cumsum(axis=1) < u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_sequences(
    grammar: Grammar,
    rng: np.random.Generator,
    n: int,
    length: int,
    topics: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` content-index sequences and their per-position topics.

    With ``topics`` given, each row keeps that topic throughout and starts
    from the topic-conditional stationary state; otherwise rows start from
    the joint stationary distribution and topics evolve.
    """
    k, v = grammar.n_topics, grammar.n_content
    pi = grammar.stationary()
    toks = np.zeros((n, length), dtype=np.int64)
    zs = np.zeros((n, length), dtype=np.int64)
    if topics is None:
        state = _sample_rows(np.broadcast_to(pi.reshape(-1), (n, k * v)), rng)
        z, t = state // v, state % v
    else:
        z = np.asarray(topics, dtype=np.int64)
        cond = pi / pi.sum(axis=1, keepdims=True)
        t = _sample_rows(cond[z], rng)
    toks[:, 0], zs[:, 0] = t, z
    for pos in range(1, length):
        if topics is None:
            z = _sample_rows(grammar.topic_transition[z], rng)
        emitted = _sample_rows(grammar.emissions[z], rng)
        follow = rng.random(n) < P_SUCCESSOR
        t = np.where(follow, grammar.successors[z, t], emitted)
        toks[:, pos], zs[:, pos] = t, z
    return toks, zs


@dataclass
class Corpus:
    sequences: np.ndarray  # token ids, [n, CORPUS_SEQ_LEN], no CLS
    grammar: str
    seed: int
    heldout_fraction: float = 0.1

    @property
    def n_heldout(self) -> int:
        return max(1, int(round(self.heldout_fraction * len(self.sequences))))

    @property
    def train(self) -> np.ndarray:
        return self.sequences[: len(self.sequences) - self.n_heldout]

    @property
    def heldout(self) -> np.ndarray:
        return self.sequences[len(self.sequences) - self.n_heldout :]


def generate_corpus(grammar: str, seed: int, n: int, length: int = CORPUS_SEQ_LEN) -> Corpus:
    """``n`` grammar sequences; the last 10% form the held-out MLM evaluation slice."""
    if n < 1:
        raise ContractError(f"corpus size must be >= 1, got {n}")
    g = get_grammar(grammar)
    toks, _ = sample_sequences(g, np.random.default_rng([seed, 0]), n, length)
    return Corpus(toks + N_SPECIAL, grammar, seed)


# ---------------------------------------------------------------- tasks


@dataclass
class Task:
    name: str
    kind: str  # "classification" | "regression"
    n_classes: int
    metric: str
    train_X: np.ndarray
    train_y: np.ndarray
    dev_X: np.ndarray
    dev_y: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def is_regression(self) -> bool:
        return self.kind == "regression"

    @property
    def head_outputs(self) -> int:
        return 1 if self.is_regression else self.n_classes

    def label_distribution(self) -> dict:
        if self.is_regression:
            return {"mean": float(np.mean(self.train_y)), "std": float(np.std(self.train_y))}
        counts = np.bincount(self.train_y, minlength=self.n_classes)
        return {str(c): float(x) / len(self.train_y) for c, x in enumerate(counts)}


TOPIC_SEGMENT = 8
# fraction of segment tokens replaced by uniform content tokens (similarity task)
SIMILARITY_NOISE = 0.45
PARITY_LEN = 16
PARITY_BIGRAM = (N_SPECIAL + 5, N_SPECIAL + 40)


def _pair_tokens(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    n = len(s1)
    return np.concatenate(
        [np.full((n, 1), CLS), s1 + N_SPECIAL, np.full((n, 1), SEP), s2 + N_SPECIAL], axis=1
    ).astype(np.int64)


def _noisy(segments: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(segments.shape) < SIMILARITY_NOISE
    return np.where(hit, rng.integers(0, N_CONTENT, size=segments.shape), segments)


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % 2
    rng.shuffle(y)
    return y


def _topic_pair(rng, n, g):
    y = _balanced_labels(n, rng)
    z1 = rng.integers(0, g.n_topics, size=n)
    other = (z1 + rng.integers(1, g.n_topics, size=n)) % g.n_topics
    z2 = np.where(y == 1, z1, other)
    s1, _ = sample_sequences(g, rng, n, TOPIC_SEGMENT, topics=z1)
    s2, _ = sample_sequences(g, rng, n, TOPIC_SEGMENT, topics=z2)
    return _pair_tokens(s1, s2), y, {"topics": np.stack([z1, z2], axis=1)}


def count_bigram(tokens, bigram=PARITY_BIGRAM) -> int:
    tokens = np.asarray(tokens)
    return int(np.sum((tokens[:-1] == bigram[0]) & (tokens[1:] == bigram[1])))


def _pattern_parity(rng, n, g):
    a, b = PARITY_BIGRAM
    seqs, _ = sample_sequences(g, rng, n, PARITY_LEN)
    seqs = seqs + N_SPECIAL
    # strip natural occurrences of the marker tokens so counts are controlled
    for tok in (a, b):
        hits = seqs == tok
        seqs[hits] = N_SPECIAL + (seqs[hits] - N_SPECIAL + 1) % N_CONTENT
    y = _balanced_labels(n, rng)
    counts = np.where(y == 1, rng.choice([1, 3], size=n, p=[0.7, 0.3]), rng.choice([0, 2], size=n, p=[0.7, 0.3]))
    for i in range(n):
        slots = rng.choice(PARITY_LEN // 2, size=counts[i], replace=False) * 2
        for s in slots:
            seqs[i, s], seqs[i, s + 1] = a, b
    tokens = np.concatenate([np.full((n, 1), CLS), seqs], axis=1).astype(np.int64)
    labels = np.array([count_bigram(row) % 2 for row in tokens])
    return tokens, labels, {"counts": counts}


def _segment_similarity(rng, n, g):
    z1 = rng.integers(0, g.n_topics, size=n)
    z2 = rng.integers(0, g.n_topics, size=n)
    s1, _ = sample_sequences(g, rng, n, TOPIC_SEGMENT, topics=z1)
    s2, _ = sample_sequences(g, rng, n, TOPIC_SEGMENT, topics=z2)
    s1, s2 = _noisy(s1, rng), _noisy(s2, rng)
    copy_rate = rng.random(n)
    copy = rng.random(s2.shape) < copy_rate[:, None]
    src = rng.integers(0, TOPIC_SEGMENT, size=s2.shape)
    s2 = np.where(copy, np.take_along_axis(s1, src, axis=1), s2)
    y = np.array([len(set(a) & set(b)) / len(set(a) | set(b)) for a, b in zip(s1, s2)])
    return _pair_tokens(s1, s2), y, {}


_BUILTINS = {
    # name: (builder, kind, n_classes, metric, n_train, n_dev)
    "topic-pair": (_topic_pair, "classification", 2, "accuracy", 250, 1000),
    "pattern-parity": (_pattern_parity, "classification", 2, "mcc", 8000, 1000),
    "segment-similarity": (_segment_similarity, "regression", 1, "spearman", 1000, 1000),
    "topic-pair-large": (_topic_pair, "classification", 2, "accuracy", 10_000, 1000),
}

TASK_NAMES = tuple(_BUILTINS)


def make_task(name: str, seed: int = 0, grammar: str = GRAMMAR_ID) -> Task:
    """Deterministic built-in task with disjoint train and dev splits."""
    if name not in _BUILTINS:
        raise ConfigError(f"unknown task {name!r}; built-ins: {', '.join(TASK_NAMES)}")
    builder, kind, n_classes, metric, n_train, n_dev = _BUILTINS[name]
    g = get_grammar(grammar)
    rng = np.random.default_rng([seed, 1 + TASK_NAMES.index(name)])
    X, y, info = builder(rng, n_train + 2 * n_dev, g)
    seen, keep = set(), []
    for i in range(len(X)):
        key = X[i].tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
    keep = np.asarray(keep)
    train_idx, dev_idx = keep[:n_train], keep[n_train : n_train + n_dev]
    if len(dev_idx) < n_dev:
        raise ContractError(f"task {name!r} produced too few distinct examples")
    info = {k: v[train_idx].tolist() for k, v in info.items()} | {"seed": seed, "grammar": grammar}
    return Task(name, kind, n_classes, metric, X[train_idx], y[train_idx], X[dev_idx], y[dev_idx], info)


def export_task(task: Task, path) -> None:
    """Line-delimited JSON, one example per line."""
    with open(path, "w") as fh:
        for split, X, y in (("train", task.train_X, task.train_y), ("dev", task.dev_X, task.dev_y)):
            for tokens, label in zip(X, y):
                label = float(label) if task.is_regression else int(label)
                fh.write(json.dumps({"task": task.name, "split": split, "tokens": tokens.tolist(), "label": label}))
                fh.write("\n")


def import_task(path, name: str | None = None) -> Task:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ContractError(f"{path} holds no examples")
    name = name or rows[0]["task"]
    if name not in _BUILTINS:
        raise ConfigError(f"unknown task {name!r}")
    _, kind, n_classes, metric, _, _ = _BUILTINS[name]
    ydtype = float if kind == "regression" else np.int64

    def split(which):
        sel = [r for r in rows if r["split"] == which]
        X = np.array([r["tokens"] for r in sel], dtype=np.int64)
        return X, np.array([r["label"] for r in sel], dtype=ydtype)

    train_X, train_y = split("train")
    dev_X, dev_y = split("dev")
    return Task(name, kind, n_classes, metric, train_X, train_y, dev_X, dev_y)


# ---------------------------------------------------------------- metrics


def _binary(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"preds and labels must be 1-D of equal length, got {preds.shape}, {labels.shape}")
    if preds.size == 0:
        raise ContractError("metric needs at least one example")
    return preds.astype(np.int64), labels.astype(np.int64)


def confusion(preds, labels) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) for binary predictions."""
    p, y = _binary(preds, labels)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, tn, fp, fn


def accuracy(preds, labels) -> float:
    p, y = _binary(preds, labels)
    return float(np.mean(p == y))


def mcc(preds, labels) -> float:
    """Matthews correlation; 0 when any marginal of the confusion matrix is empty."""
    tp, tn, fp, fn = confusion(preds, labels)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(float(denom))


def f1(preds, labels) -> float:
    tp, _, fp, fn = confusion(preds, labels)
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError(f"pearson needs two 1-D arrays of equal length >= 2, got {x.shape}, {y.shape}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ContractError("correlation is undefined for a zero-variance input")
    return float(dx @ dy) / np.sqrt(sxx * syy)


def spearman(x, y) -> float:
    """Pearson correlation of average-tie ranks."""
    return pearson(rankdata(x), rankdata(y))


METRICS = {"accuracy": accuracy, "mcc": mcc, "f1": f1, "pearson": pearson, "spearman": spearman}


def evaluate(metric: str, preds, labels) -> float:
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    return float(METRICS[metric](preds, labels))
