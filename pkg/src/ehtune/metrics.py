"""Analysis quantities: feature drift, parameter distance, convergence, projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PROBE_SIZE = 256


@dataclass(frozen=True)
class FeatureSnapshot:
    """Pooled backbone features on a fixed probe set.

    ``probe_id`` identifies the probe examples (and their order); snapshots
    are only comparable when it matches.
    """

    tag: str
    features: np.ndarray
    probe_id: str = ""


def probe_indices(n_train: int, size: int = PROBE_SIZE) -> np.ndarray:
    """First ``size`` training examples in dataset order."""
    return np.arange(min(n_train, size))


def feature_change(before: FeatureSnapshot, after: FeatureSnapshot) -> float:
    """Mean over probe examples of the L2 norm of the per-example feature difference."""
    a, b = np.asarray(before.features, np.float64), np.asarray(after.features, np.float64)
    if before.probe_id != after.probe_id:
        raise ContractError(f"snapshots use different probe sets: {before.probe_id!r} vs {after.probe_id!r}")
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"snapshot shapes differ: {a.shape} vs {b.shape}")
    if len(a) == 0:
        return 0.0
    diff = b - a
    # rescale rows so that tiny differences do not underflow to a zero norm
    scale = np.abs(diff).max(axis=1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return float((np.linalg.norm(diff / safe, axis=1) * scale[:, 0]).mean())


def param_distance(theta: dict, theta0: dict, names=None) -> float:
    """Squared Euclidean distance summed over the named tensors.

    ``theta`` and ``theta0`` map names to arrays; by default every shared
    name is used, and the name sets must agree.
    """
    if names is None:
        if set(theta) != set(theta0):
            diff = sorted(set(theta) ^ set(theta0))
            raise ContractError(f"parameter name sets differ: {diff[:5]}")
        names = theta0
    total = 0.0
    for name in sorted(names):
        a, b = np.asarray(theta[name], np.float64), np.asarray(theta0[name], np.float64)
        if a.shape != b.shape:
            raise ContractError(f"shape mismatch for {name!r}: {a.shape} vs {b.shape}")
        d = a - b
        total += float(np.sum(d * d))
    return total


@dataclass(frozen=True)
class Projection:
    points: np.ndarray  # [n, 2]
    explained_variance: np.ndarray  # [2]
    components: np.ndarray  # [2, d]
    mean: np.ndarray


def _power_iteration(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int):
    v = start / np.linalg.norm(start)
    lam = float(v @ cov @ v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        lam_new = float(w @ cov @ w)
        # a sign flip between iterates still counts as converged (negative residual eigenvalues)
        moved = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0) and moved < tol:
            return w, lam_new
        v, lam = w, lam_new
    return v, lam


def pca_project_2d(features, tol: float = 1e-8, max_iter: int = 1000) -> Projection:
    """Project centred rows onto the top two principal directions.

    Directions come from power iteration with deflation on the covariance,
    started from a fixed vector; each direction's sign is fixed so that its
    largest-magnitude coordinate is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError(f"PCA needs at least 3 rows of features, got shape {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    if not np.any(np.abs(xc) > 0):
        raise ContractError("features have rank 0 (all rows identical)")
    cov = xc.T @ xc / (len(x) - 1)
    d = cov.shape[0]
    start = np.ones(d) + np.arange(d) / d
    comps, lams = [], []
    work = cov.copy()
    for _ in range(min(2, d)):
        v, lam = _power_iteration(work, start, tol, max_iter)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        lams.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
        start = start - (start @ v) * v
        if np.linalg.norm(start) < 1e-12:
            start = np.eye(d)[np.argmin(np.abs(v))]
    while len(comps) < 2:
        comps.append(np.zeros(d))
        lams.append(0.0)
    components = np.stack(comps)
    return Projection(xc @ components.T, np.asarray(lams), components, mu)


def smoothed(curve, window: int) -> np.ndarray:
    """Trailing moving average; early entries average what is available."""
    c = np.asarray(curve, dtype=np.float64)
    if c.size == 0:
        return c
    cs = np.concatenate([[0.0], np.cumsum(c)])
    idx = np.arange(1, c.size + 1)
    lo = np.maximum(idx - window, 0)
    return (cs[idx] - cs[lo]) / (idx - lo)


def steps_to_threshold(loss_curve, tau: float, window: int = 20):
    """First step whose trailing-``window`` mean loss is below ``tau``; None if never."""
    if not tau > 0:
        raise ContractError(f"threshold must be positive, got {tau}")
    below = np.flatnonzero(smoothed(loss_curve, window) < tau)
    return int(below[0]) if below.size else None


def grad_norm_summary(grad_log: list, window: int = 10):
    """Mean head and backbone gradient norms over the first ``window`` logged steps.

    ``grad_log`` holds dicts with ``head`` and ``backbone`` norms (as stored
    in a run record). Returns ``(head_mean, backbone_mean, head/backbone)``
    with the ratio ``None`` when the backbone mean is zero.
    """
    if not grad_log:
        raise ContractError("run record holds no gradient-norm log")
    rows = grad_log[:window]
    head = float(np.mean([r["head"] for r in rows]))
    backbone = float(np.mean([r["backbone"] for r in rows]))
    ratio = head / backbone if backbone > 0 else None
    return head, backbone, ratio
