import numpy as np

from ehtune.backbone import BackboneConfig
from ehtune.head import build_head

TINY = BackboneConfig(vocab_size=16, max_seq_len=8, d_model=8, n_heads=2, n_layers=1, d_ff=16)
SMALL = BackboneConfig(vocab_size=64, max_seq_len=32, d_model=16, n_heads=2, n_layers=2, d_ff=32)


def random_tokens(rng, n, seq, vocab, cls=1):
    x = rng.integers(4, vocab, size=(n, seq))
    x[:, 0] = cls
    return x


def head_for(bb, n_classes=2, seed=0):
    return build_head(bb.config.d_model, 4 * bb.config.d_model, n_classes, seed=seed)


# brute-force metric oracles, written for clarity rather than speed


def brute_confusion(p, y):
    out = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for a, b in zip(p, y):
        key = ("t" if a == b else "f") + ("p" if a == 1 else "n")
        out[key] += 1
    return out


def brute_mcc(p, y):
    c = brute_confusion(p, y)
    den = (c["tp"] + c["fp"]) * (c["tp"] + c["fn"]) * (c["tn"] + c["fp"]) * (c["tn"] + c["fn"])
    return 0.0 if den == 0 else (c["tp"] * c["tn"] - c["fp"] * c["fn"]) / den**0.5


def brute_f1(p, y):
    c = brute_confusion(p, y)
    return 0.0 if c["tp"] == 0 else 2 * c["tp"] / (2 * c["tp"] + c["fp"] + c["fn"])


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def brute_ranks(x):
    """Average rank of each element, ties sharing the mean of their positions."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks
