"""Match loss, multi-label BCE, their sum, and finite-difference checks.

Couplings enter the match loss as constants: gradients only flow through
``log P`` of the two branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ot import coupling_entropy

MCE_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    match: float
    mce: float
    total: float
    entropy_terms: float


@dataclass
class MatchResult:
    value: float
    cross_terms: float
    entropy_terms: float
    grad_global: np.ndarray
    grad_local: np.ndarray


def batch_alignment(mappings, valids, n_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-image alignments into row indices of the flattened batch."""
    mapping = np.concatenate([m + i * n_patches for i, m in enumerate(mappings)])
    valid = np.concatenate(list(valids))
    return mapping, valid


def match_loss(p_g, p_l, q_g, q_l, mapping, valid=None, mode: str = "cross") -> MatchResult:
    """Cross-view cross-entropy against couplings plus coupling entropies.

    ``mapping[i]`` is the global row aligned with local row ``i``. Rows with
    ``valid[i] == False`` are dropped and the remaining mass is scaled back up
    to the full coupling mass. ``mode="self"`` pairs each branch with its own
    coupling instead. Returned gradients are w.r.t. the logits of each branch.
    """
    p_g, p_l = np.asarray(p_g, float), np.asarray(p_l, float)
    q_g, q_l = np.asarray(q_g, float), np.asarray(q_l, float)
    mapping = np.asarray(mapping)
    if not (p_g.shape == p_l.shape == q_g.shape == q_l.shape):
        raise ValueError("predictions and couplings must share one shape")
    n = p_l.shape[0]
    if mapping.shape != (n,):
        raise ValueError(f"alignment has {mapping.shape} entries for {n} local rows")
    if np.any(mapping < 0) or np.any(mapping >= p_g.shape[0]):
        raise ValueError("alignment points outside the global rows")
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    entropy = coupling_entropy(q_l) + coupling_entropy(q_g)
    if n_valid == 0:
        return MatchResult(entropy, 0.0, entropy, np.zeros_like(p_g), np.zeros_like(p_l))
    w = n / n_valid
    log_g, log_l = np.log(p_g), np.log(p_l)
    grad_g = np.zeros_like(p_g)
    grad_l = np.zeros_like(p_l)
    rows = np.flatnonzero(valid)

    if mode == "cross":
        tgt_l = q_g[mapping[rows]]
        tgt_g = q_l[rows]
        g_rows = mapping[rows]
        cross = -np.sum(tgt_l * log_l[rows]) - np.sum(tgt_g * log_g[g_rows])
        grad_l[rows] = p_l[rows] * tgt_l.sum(axis=1, keepdims=True) - tgt_l
        np.add.at(grad_g, g_rows, p_g[g_rows] * tgt_g.sum(axis=1, keepdims=True) - tgt_g)
    elif mode == "self":
        # invalid rows only exist on the local side
        cross = -w * np.sum(q_l[rows] * log_l[rows]) - np.sum(q_g * log_g)
        grad_l[rows] = w * (p_l[rows] * q_l[rows].sum(axis=1, keepdims=True) - q_l[rows])
        grad_g = p_g * q_g.sum(axis=1, keepdims=True) - q_g
        return MatchResult(cross + entropy, cross, entropy, grad_g, grad_l)
    else:
        raise ValueError(f"unknown match mode {mode!r}")

    cross *= w
    return MatchResult(cross + entropy, cross, entropy, grad_g * w, grad_l * w)


def argmax_coupling(p) -> np.ndarray:
    """One-hot rows at the arg-max class, scaled to the uniform patch mass."""
    p = np.asarray(p)
    q = np.zeros_like(p, dtype=float)
    q[np.arange(p.shape[0]), p.argmax(axis=1)] = 1.0 / p.shape[0]
    return q


@dataclass
class MCEResult:
    value: float
    grad: np.ndarray
    clamped: bool


def mce_loss(pooled, labels) -> MCEResult:
    """Mean binary cross-entropy over images and classes."""
    s = np.asarray(pooled, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    clamped = bool(np.any(s < MCE_CLAMP) or np.any(s > 1 - MCE_CLAMP))
    inside = (s >= MCE_CLAMP) & (s <= 1 - MCE_CLAMP)
    s = np.clip(s, MCE_CLAMP, 1 - MCE_CLAMP)
    value = -np.mean(y * np.log(s) + (1 - y) * np.log1p(-s))
    grad = (s - y) / (s * (1 - s)) / s.size
    # clamped entries are flat
    grad = np.where(inside, grad, 0.0)
    return MCEResult(float(value), grad, clamped)


def pc2m_breakdown(match: MatchResult, mce: MCEResult) -> LossBreakdown:
    return LossBreakdown(
        match=match.value,
        mce=mce.value,
        total=match.value + mce.value,
        entropy_terms=match.entropy_terms,
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    errors: dict[str, float] = field(default_factory=dict)
    passed: bool = True
    tolerance: float = 1e-4
    entry_errors: dict[str, float] = field(default_factory=dict)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def tensor_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-wise relative error of one parameter tensor.

    Entry-wise ratios blow up on entries near zero, where the central
    difference carries roundoff of order eps * |loss| / h.
    """
    analytic = np.asarray(analytic, float).ravel()
    numeric = np.asarray(numeric, float).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    names=None,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_fn(params)`` returns ``(value, grads)``. With ``max_entries`` a
    seeded random subset of each parameter's entries is checked. The pass
    decision uses the per-tensor norm-wise error; the worst entry-wise ratio
    is reported alongside.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_fn(work)
    names = list(grads) if names is None else list(names)
    rng = np.random.default_rng(seed)
    errors, entry_errors = {}, {}
    for name in names:
        arr = work[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(work)[0]
            flat[i] = old - h
            down = loss_fn(work)[0]
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        analytic = np.asarray(grads[name]).reshape(-1)[idx]
        errors[name] = tensor_relative_error(analytic, numeric, floor)
        entry_errors[name] = float(relative_error(analytic, numeric, floor).max())
    worst = max(errors, key=errors.get)
    return GradCheckReport(errors[worst], worst, errors, errors[worst] <= tolerance, tolerance, entry_errors)
