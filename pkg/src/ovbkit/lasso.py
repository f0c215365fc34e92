"""Weighted Lasso by cyclic coordinate descent, with KKT certificates.

Objective::

    (1 / 2n) |y - X theta|^2 + lam * sum_j loadings_j |theta_j|

The solver keeps a working set. Each outer pass recomputes the full
gradient ``X^T (y - X theta) / n``, adds every KKT violator to the working
set and runs covariance-update coordinate descent on the working set's
Gram block. Once the working set is stable, the sign-consistent
stationarity system is solved directly so converged fits satisfy the KKT
conditions to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from numpy.typing import NDArray

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000
# sweeps between attempts to solve the sign-consistent system exactly
POLISH_EVERY = 50


class IllPosedError(ValueError):
    pass


@dataclass
class LassoProblem:
    X: NDArray[np.float64]
    y: NDArray[np.float64]
    lam: float
    loadings: Optional[NDArray[np.float64]] = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"shape mismatch: X {self.X.shape}, y {self.y.shape}")
        p = self.X.shape[1]
        if self.loadings is None:
            self.loadings = np.ones(p)
        self.loadings = np.asarray(self.loadings, dtype=np.float64)
        if self.loadings.shape != (p,):
            raise ValueError(f"loadings must have length {p}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if np.any(self.loadings < 0) or not np.all(np.isfinite(self.loadings)):
            raise ValueError("loadings must be finite and non-negative")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("X and y must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def penalties(self) -> NDArray[np.float64]:
        return self.lam * self.loadings


@dataclass
class LassoFit:
    theta_hat: NDArray[np.float64]
    support: NDArray[np.intp]
    objective: float
    iterations: int
    converged: bool
    max_violation: float = np.nan


@dataclass
class KktReport:
    gradient: NDArray[np.float64]
    max_violation: float
    active_sign_ok: bool
    violations: NDArray[np.float64] = field(repr=False, default=None)


def lasso_objective(problem: LassoProblem, theta: NDArray[np.float64]) -> float:
    r = problem.y - problem.X @ theta
    return float(0.5 * (r @ r) / problem.n + problem.lam * np.sum(problem.loadings * np.abs(theta)))


def _violations(
    g: NDArray[np.float64], theta: NDArray[np.float64], pen: NDArray[np.float64]
) -> NDArray[np.float64]:
    active = theta != 0
    return np.where(
        active,
        np.abs(g - pen * np.sign(theta)),
        np.maximum(np.abs(g) - pen, 0.0),
    )


def kkt_residuals(fit: LassoFit, problem: LassoProblem) -> KktReport:
    """Gradient correlations and KKT violations of ``fit`` for ``problem``."""
    theta = np.asarray(fit.theta_hat, dtype=np.float64)
    if theta.shape != (problem.p,):
        raise ValueError("fit and problem dimensions disagree")
    g = problem.X.T @ (problem.y - problem.X @ theta) / problem.n
    pen = problem.penalties
    viol = _violations(g, theta, pen)
    active = theta != 0
    # stationarity on the active set forces sgn(g_j) = sgn(theta_j) whenever the penalty is positive
    penalized = active & (pen > 0)
    sign_ok = bool(np.all(np.sign(g[penalized]) == np.sign(theta[penalized])))
    return KktReport(
        gradient=g,
        max_violation=float(viol.max()) if viol.size else 0.0,
        active_sign_ok=sign_ok,
        violations=viol,
    )


def lambda_max(X: NDArray[np.float64], y: NDArray[np.float64], loadings=None) -> float:
    """Smallest lambda for which the all-zero vector solves the weighted Lasso."""
    X = np.asarray(X, dtype=np.float64)
    w = np.ones(X.shape[1]) if loadings is None else np.asarray(loadings, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("lambda_max needs strictly positive loadings")
    if X.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(X.T @ y) / (X.shape[0] * w)))


@numba.njit(cache=True, nogil=True)
def _cd_working_set(G, c, theta, pen, tol, max_sweeps):
    """Cyclic coordinate descent on a Gram block; updates ``theta`` in place.

    Returns (sweeps, final max KKT violation on the block).
    """
    m = theta.shape[0]
    grad = c - G @ theta
    viol = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        for j in range(m):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = theta[j]
            z = grad[j] + gjj * old
            if z > pen[j]:
                new = (z - pen[j]) / gjj
            elif z < -pen[j]:
                new = (z + pen[j]) / gjj
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for i in range(m):
                    grad[i] -= G[i, j] * delta
                theta[j] = new
        viol = 0.0
        for j in range(m):
            if theta[j] > 0.0:
                v = abs(grad[j] - pen[j])
            elif theta[j] < 0.0:
                v = abs(grad[j] + pen[j])
            else:
                v = abs(grad[j]) - pen[j]
            if v > viol:
                viol = v
        if viol <= tol:
            break
    return sweeps, viol


def _polish(
    G: NDArray[np.float64], c: NDArray[np.float64], theta: NDArray[np.float64], pen: NDArray[np.float64]
) -> Optional[NDArray[np.float64]]:
    """Solve the stationarity equations on the current support and signs.

    Returns None when the system is singular or the solution flips a sign.
    """
    act = np.flatnonzero(theta)
    if act.size == 0:
        return None
    s = np.sign(theta[act])
    Gaa = G[np.ix_(act, act)]
    try:
        sol = np.linalg.solve(Gaa, c[act] - pen[act] * s)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or np.any(np.sign(sol) != s):
        return None
    out = np.zeros_like(theta)
    out[act] = sol
    return out


def _working_set_solve(grad, block, theta, pen, degenerate, tol, max_iter):
    """Shared outer loop. ``grad(theta)`` returns the full gradient and
    ``block(idx)`` the Gram block and correlations of the columns ``idx``."""
    free = ~degenerate
    sweeps = 0
    converged = False
    working = np.zeros(theta.size, dtype=bool)

    def violation(th):
        v = _violations(grad(th), th, pen)
        v[degenerate] = 0.0
        return v

    while True:
        viol = violation(theta)
        max_viol = float(viol.max())
        if max_viol <= tol:
            converged = True
            break
        if sweeps >= max_iter:
            break
        grown = working | ((theta != 0) | (viol > 0)) & free
        # once the working set holds every violator, tighten the inner solve
        inner_tol = tol * (0.01 if np.array_equal(grown, working) else 0.1)
        working = grown
        idx = np.flatnonzero(working)
        Gw, cw = block(idx)
        tw = np.ascontiguousarray(theta[idx])
        used, _ = _cd_working_set(Gw, cw, tw, pen[idx], inner_tol, min(POLISH_EVERY, max_iter - sweeps))
        sweeps += int(used)
        polished = _polish(Gw, cw, tw, pen[idx])
        cur = theta.copy()
        cur[idx] = tw
        theta = cur
        if polished is not None:
            cand = theta.copy()
            cand[idx] = polished
            if violation(cand).max() <= violation(cur).max():
                theta = cand
    return theta, sweeps, converged, max_viol


def _degenerate_columns(col_sq: NDArray[np.float64], loadings: NDArray[np.float64]) -> NDArray[np.bool_]:
    scale = max(float(col_sq.max()) if col_sq.size else 0.0, np.finfo(float).tiny)
    degenerate = col_sq <= np.finfo(float).eps ** 2 * scale
    if np.any(degenerate & (loadings == 0)):
        bad = np.flatnonzero(degenerate & (loadings == 0)).tolist()
        raise IllPosedError(f"zero-variance columns {bad} carry zero penalty loading")
    return degenerate


def solve_lasso(problem: LassoProblem, warm_start: Optional[NDArray[np.float64]] = None) -> LassoFit:
    """Minimize the weighted Lasso objective of ``problem``.

    The caller is responsible for demeaning. ``warm_start`` seeds the
    iterate (used along descending lambda paths). A fit that does not reach
    ``problem.tol`` within ``problem.max_iter`` sweeps is returned with
    ``converged=False``.
    """
    X, y = problem.X, problem.y
    n, p = X.shape
    degenerate = _degenerate_columns(np.einsum("ij,ij->j", X, X) / n, problem.loadings)
    theta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=np.float64)
    theta[degenerate] = 0.0
    if p == 0:
        return LassoFit(theta, np.flatnonzero(theta), float(0.5 * y @ y / n), 0, True, 0.0)

    def grad(th):
        return X.T @ (y - X @ th) / n

    def block(idx):
        Xw = X[:, idx]
        return Xw.T @ Xw / n, Xw.T @ y / n

    theta, sweeps, converged, max_viol = _working_set_solve(
        grad, block, theta, problem.penalties, degenerate, problem.tol, problem.max_iter
    )
    return LassoFit(
        theta_hat=theta,
        support=np.flatnonzero(theta),
        objective=lasso_objective(problem, theta),
        iterations=sweeps,
        converged=converged,
        max_violation=max_viol,
    )


def lasso_path(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    lams: NDArray[np.float64],
    loadings: Optional[NDArray[np.float64]] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    stop_when_saturated: bool = False,
) -> NDArray[np.float64]:
    """Solutions along ``lams`` (in the given order), warm-started.

    Works from the Gram matrix ``X^T X / n``, computed once, so it is much
    cheaper than repeated ``solve_lasso`` calls when ``p`` is moderate.
    With ``stop_when_saturated`` the path stops once the active set reaches
    ``n - 1`` (the demeaned design's rank bound) and the remaining rows
    repeat the last solution. Returns a ``(len(lams), p)`` array.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    w = np.ones(p) if loadings is None else np.asarray(loadings, dtype=np.float64)
    G = X.T @ X / n
    c = X.T @ y / n
    degenerate = _degenerate_columns(np.diag(G).copy(), w)

    def grad(th):
        return c - G @ th

    def block(idx):
        return np.ascontiguousarray(G[np.ix_(idx, idx)]), c[idx]

    out = np.zeros((len(lams), p))
    theta = np.zeros(p)
    for i, lam in enumerate(lams):
        if p:
            theta, _, _, _ = _working_set_solve(grad, block, theta.copy(), lam * w, degenerate, tol, max_iter)
        out[i] = theta
        if stop_when_saturated and np.count_nonzero(theta) >= n - 1:
            out[i + 1 :] = theta
            break
    return out
