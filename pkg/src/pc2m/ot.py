"""Entropic optimal transport between patches and classes.

The cost of assigning patch ``i`` to class ``c`` is ``-log P[i, c]``, so the
Gibbs kernel ``exp(-S / eps)`` is simply ``P ** (1 / eps)``. Couplings are
found by Sinkhorn-Knopp scaling towards a uniform patch marginal and a
class-area marginal that may contain zeros for classes absent from a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

MEASURE_ATOL = 1e-9
ROW_ATOL = 1e-7
LOG_DOMAIN_THRESHOLD = 1e-30


def check_measure(weights, name: str = "measure", normalized: bool = True) -> np.ndarray:
    """Validate a discrete measure and return it as a float64 vector."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{name} must be a non-empty vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    if normalized and abs(w.sum() - 1.0) > MEASURE_ATOL:
        raise ValueError(f"{name} must sum to 1, got {w.sum():.12g}")
    return w


def check_predictions(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"prediction matrix must be 2-D, got shape {p.shape}")
    if np.any(p <= 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("prediction entries must lie in (0, 1]")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_ATOL:
        raise ValueError("prediction rows must sum to 1")
    return p


def make_patch_marginal(n_patches: int) -> np.ndarray:
    """Uniform measure over ``n_patches`` patches."""
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    delta = np.full(n_patches, 1.0 / n_patches)
    return delta / delta.sum()


def cost_matrix(p) -> np.ndarray:
    return -np.log(check_predictions(p))


@dataclass
class GibbsKernel:
    values: np.ndarray
    epsilon: float


def gibbs_kernel(p, epsilon: float) -> GibbsKernel:
    """Kernel ``exp(-S/eps)`` for the cost ``S = -log P``, i.e. ``P ** (1/eps)``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p = check_predictions(p)
    if epsilon == 1.0:
        return GibbsKernel(p.copy(), 1.0)
    return GibbsKernel(np.exp(np.log(p) / epsilon), float(epsilon))


@dataclass
class SinkhornResult:
    coupling: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations: int
    violation: float
    converged: bool
    active: np.ndarray
    log_domain: bool = False
    trace: list[float] = field(default_factory=list)


def marginal_violation(q, row_m, col_m) -> float:
    """Max of the L1 deviations of the row and column sums of ``q``."""
    q = np.asarray(q, dtype=np.float64)
    row_err = np.abs(q.sum(axis=1) - np.asarray(row_m)).sum()
    col_err = np.abs(q.sum(axis=0) - np.asarray(col_m)).sum()
    return float(max(row_err, col_err))


def sinkhorn(
    kernel: GibbsKernel | np.ndarray,
    row_m,
    col_m,
    tol: float = 1e-6,
    max_iter: int = 500,
    log_domain: bool | None = None,
) -> SinkhornResult:
    """Scale ``kernel`` to a coupling with marginals ``(row_m, col_m)``.

    Columns where ``col_m`` is zero are removed before iterating and come back
    as zero columns. ``v`` is reported on the active columns only. If
    ``max_iter`` runs out the last iterate is returned with ``converged=False``.
    The log-domain path is taken automatically when some kernel entry is
    below 1e-30, unless ``log_domain`` forces a choice.
    """
    k = kernel.values if isinstance(kernel, GibbsKernel) else np.asarray(kernel, dtype=np.float64)
    row_m = check_measure(row_m, "row marginal")
    col_m = check_measure(col_m, "column marginal", normalized=False)
    if k.shape != (row_m.size, col_m.size):
        raise ValueError(f"kernel shape {k.shape} does not match marginals ({row_m.size}, {col_m.size})")
    if not np.any(col_m > 0):
        raise ValueError("column marginal has no mass")
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError("kernel entries must be finite and nonnegative")

    active = np.flatnonzero(col_m > 0)
    k_act = k[:, active]
    c_act = col_m[active]
    if log_domain is None:
        log_domain = bool(np.any(k_act < LOG_DOMAIN_THRESHOLD))

    if log_domain:
        q_act, u, v, iters, trace = _sinkhorn_log(k_act, row_m, c_act, tol, max_iter)
    else:
        q_act, u, v, iters, trace = _sinkhorn_mult(k_act, row_m, c_act, tol, max_iter)

    q = np.zeros_like(k)
    q[:, active] = q_act
    violation = marginal_violation(q, row_m, col_m)
    return SinkhornResult(
        coupling=q,
        u=u,
        v=v,
        iterations=iters,
        violation=violation,
        converged=violation <= tol,
        active=active,
        log_domain=log_domain,
        trace=trace,
    )


def _sinkhorn_mult(k, r, c, tol, max_iter):
    v = np.ones(k.shape[1])
    u = np.ones(k.shape[0])
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        u = r / (k @ v)
        v = c / (k.T @ u)
        q = u[:, None] * k * v[None, :]
        err = float(np.abs(q.sum(axis=1) - r).sum())
        trace.append(err)
        if err <= tol:
            break
    return u[:, None] * k * v[None, :], u, v, it, trace


def _sinkhorn_log(k, r, c, tol, max_iter):
    with np.errstate(divide="ignore"):
        log_k = np.log(k)
    log_r, log_c = np.log(r), np.log(c)
    f = np.zeros(k.shape[0])
    g = np.zeros(k.shape[1])
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        f = log_r - logsumexp(log_k + g[None, :], axis=1)
        g = log_c - logsumexp(log_k + f[:, None], axis=0)
        q = np.exp(log_k + f[:, None] + g[None, :])
        err = float(np.abs(q.sum(axis=1) - r).sum())
        trace.append(err)
        if err <= tol:
            break
    return np.exp(log_k + f[:, None] + g[None, :]), np.exp(f), np.exp(g), it, trace


def coupling_entropy(q) -> float:
    """``H(Q) = -sum Q (log Q - 1)`` with ``0 log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    pos = q > 0
    return float(-np.sum(q[pos] * (np.log(q[pos]) - 1.0)))


def transport_objective(q, s, epsilon: float) -> float:
    """Entropic transport objective ``<Q, S>_F - eps H(Q)``."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if q.shape != s.shape:
        raise ValueError(f"shape mismatch: coupling {q.shape} vs cost {s.shape}")
    # zero-mass cells contribute nothing even where the cost is large
    cost = float(np.sum(np.where(q > 0, q * s, 0.0)))
    return cost - epsilon * coupling_entropy(q) if epsilon else cost


def fixed_point_test(p, alpha, epsilon: float = 1.0, tol: float = 1e-9) -> bool:
    """True when Sinkhorn would leave the kernel ``P**(1/eps)`` untouched.

    The column means of the kernel must be proportional to ``alpha``. Row sums
    of the kernel must also be constant, which holds automatically for
    ``eps = 1`` because prediction rows sum to one.
    """
    k = gibbs_kernel(p, epsilon).values
    alpha = check_measure(alpha, "alpha")
    if alpha.size != k.shape[1]:
        raise ValueError("alpha length does not match class count")
    rows = k.sum(axis=1)
    if np.max(np.abs(rows / rows.mean() - 1.0)) > tol:
        return False
    col_means = k.mean(axis=0)
    scaled = col_means / col_means.sum()
    return bool(np.max(np.abs(scaled - alpha)) <= tol)


def epsilon_at(epoch: int, epochs: int, schedule: tuple[float, float] | None) -> float:
    """Linear epsilon schedule over training; constant 1.0 without one."""
    if schedule is None:
        return 1.0
    start, end = schedule
    if epochs <= 1:
        return float(end)
    frac = min(max((epoch - 1) / (epochs - 1), 0.0), 1.0)
    return float(start + (end - start) * frac)
