"""Class-area distribution: initialization, EMA updates and batch rescaling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .ot import check_measure


@dataclass(frozen=True)
class AreaState:
    a_tilde: np.ndarray
    epoch: int = 0
    gamma: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "a_tilde", check_measure(self.a_tilde, "a_tilde"))


@dataclass(frozen=True)
class ClassFrequencies:
    nu_d: np.ndarray
    nu_b: np.ndarray | None = None


def init_area(nu_d, gamma: float = 0.02) -> AreaState:
    """Start from the dataset class frequencies."""
    return AreaState(check_measure(nu_d, "nu_d").copy(), epoch=0, gamma=gamma)


def image_density(p_image) -> np.ndarray:
    """Mean class probability over the patches of one image."""
    p = np.asarray(p_image, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("expected a K x |C| prediction matrix")
    return p.mean(axis=0)


def mean_density(densities: Iterable[np.ndarray]) -> np.ndarray:
    """Dataset mean of per-image densities, summed in index order."""
    total = None
    count = 0
    for q in densities:
        total = np.array(q, dtype=np.float64) if total is None else total + q
        count += 1
    if count == 0:
        raise ValueError("no densities to average")
    return total / count


def ema_update(state: AreaState, mean_dens, gamma: float | None = None) -> AreaState:
    """One epoch of the exponential moving average towards ``mean_dens``."""
    gamma = state.gamma if gamma is None else gamma
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    target = check_measure(mean_dens, "mean density", normalized=False)
    if target.size != state.a_tilde.size:
        raise ValueError("mean density has the wrong number of classes")
    if gamma == 0.0:
        new = state.a_tilde.copy()
    elif gamma == 1.0:
        new = target.copy()
    else:
        new = (1.0 - gamma) * state.a_tilde + gamma * target
    return replace(state, a_tilde=new, epoch=state.epoch + 1, gamma=gamma)


def batch_rescale(a_tilde, nu_b, nu_d) -> np.ndarray:
    """Column marginal for one batch: ``(nu_b / nu_d) * a_tilde`` normalized.

    Classes with ``nu_b == 0`` get exactly zero mass.
    """
    a_tilde = check_measure(a_tilde, "a_tilde")
    nu_b = np.asarray(nu_b, dtype=np.float64)
    nu_d = check_measure(nu_d, "nu_d")
    if not (a_tilde.shape == nu_b.shape == nu_d.shape):
        raise ValueError("a_tilde, nu_b and nu_d must have the same length")
    if np.any(nu_b < 0) or not np.any(nu_b > 0):
        raise ValueError("nu_b must be nonnegative with at least one present class")
    present = nu_b > 0
    if np.any(nu_d[present] <= 0):
        raise ValueError("nu_d is zero for a class present in the batch")
    alpha = np.zeros_like(a_tilde)
    alpha[present] = nu_b[present] / nu_d[present] * a_tilde[present]
    z = alpha.sum()
    if z <= 0:
        raise ValueError("rescaled areas have no mass")
    return alpha / z


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats, bounded by log 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same length")
    m = 0.5 * (p + q)
    return float(0.5 * _kl(p, m) + 0.5 * _kl(q, m))


def _kl(p, m):
    pos = p > 0
    return max(float(np.sum(p[pos] * np.log(p[pos] / m[pos]))), 0.0)


def area_entropy(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    pos = a > 0
    return float(-np.sum(a[pos] * np.log(a[pos])))


def ema_fixed_point(state_m: AreaState, state_prev: AreaState, mean_dens, tol: float = 1e-9) -> bool:
    """Both equalities of the EMA stopping condition hold within ``tol``."""
    a_m, a_prev = state_m.a_tilde, state_prev.a_tilde
    target = np.asarray(mean_dens, dtype=np.float64)
    return bool(
        np.max(np.abs(a_m - a_prev)) <= tol and np.max(np.abs(a_m - target)) <= tol
    )


def presence_matrix(labels_per_image: Sequence[Iterable[int]], class_count: int) -> np.ndarray:
    y = np.zeros((len(labels_per_image), class_count))
    for i, labels in enumerate(labels_per_image):
        for c in labels:
            if not 0 <= c < class_count:
                raise ValueError(f"label {c} outside 0..{class_count - 1}")
            y[i, c] = 1.0
    return y


def class_frequencies(labels_per_image: Sequence[Iterable[int]], class_count: int) -> np.ndarray:
    """Image-presence counts per class normalized over all presence counts."""
    if len(labels_per_image) == 0:
        raise ValueError("need at least one image")
    counts = presence_matrix(labels_per_image, class_count).sum(axis=0)
    if counts.sum() == 0:
        raise ValueError("no labels present")
    return counts / counts.sum()


def batch_frequencies(labels_per_image, class_count: int, indicator: bool = False) -> np.ndarray:
    """``nu_b`` for one batch: fractional presence, or a 0/1 presence indicator."""
    nu = class_frequencies(labels_per_image, class_count)
    return (nu > 0).astype(np.float64) if indicator else nu
