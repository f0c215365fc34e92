"""Treatment-effect estimators for ``Y = D alpha + X beta + eta``.

* ``post_double_lasso``: Lasso of Y on X, Lasso of D on X, then OLS of Y on
  D and the union of the selected controls.
* ``debiased_lasso``: joint Lasso of Y on (D, X) plus a one-step correction
  built from a nodewise Lasso of D on X.
* ``ols_fit``: OLS of Y on (D, X) with HC0, HC3 or HCK standard errors.
* ``oracle_estimator``: regression of ``Y - X pi*`` on ``D - X gamma*``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray
from scipy.sparse.linalg import LinearOperator, cg
from scipy.stats import norm

from .lasso import LassoProblem, solve_lasso
from .model_core import Dataset, ensure_demeaned
from .reg_rules import RegularizationChoice

VARIANCE_KINDS = ("HC0", "HC3", "HCK")
RANK_TOL = 1e-10
HCK_DENSE_MAX_N = 4000


class InfeasibleError(ValueError):
    """The final least-squares step has at least as many regressors as observations."""


class DegenerateTreatmentError(ValueError):
    pass


@dataclass
class PdlFit:
    alpha_tilde: float
    beta_tilde: NDArray[np.float64]
    I1: NDArray[np.intp]
    I2: NDArray[np.intp]
    union_plus_amelioration: NDArray[np.intp]
    se: float
    lambda1_used: RegularizationChoice
    lambda2_used: RegularizationChoice
    dropped_collinear: NDArray[np.intp] = field(default_factory=lambda: np.empty(0, np.intp))
    singular_fallback_used: bool = False

    @property
    def selected(self) -> NDArray[np.intp]:
        return np.union1d(self.I1, self.I2)


@dataclass
class DebiasedFit:
    alpha_hat_initial: float
    alpha_tilde: float
    tau1_sq: float
    gamma_hat: NDArray[np.float64]
    se: float
    beta_hat: NDArray[np.float64] = field(default=None, repr=False)

    @property
    def selected(self) -> NDArray[np.intp]:
        return np.union1d(np.flatnonzero(self.beta_hat), np.flatnonzero(self.gamma_hat))


@dataclass
class OlsFit:
    coefficients: NDArray[np.float64]
    residuals: NDArray[np.float64]
    variance_kind: str
    alpha_se: float
    singular_fallback_used: bool = False
    kept_columns: NDArray[np.intp] = field(default=None, repr=False)
    obs_variances: Optional[NDArray[np.float64]] = field(default=None, repr=False)

    @property
    def alpha(self) -> float:
        return float(self.coefficients[0])


# ---------------------------------------------------------------------
# Least-squares helpers
# ---------------------------------------------------------------------


def independent_columns(A: NDArray[np.float64], tol: float = RANK_TOL) -> NDArray[np.intp]:
    """Indices of a maximal linearly independent column subset, column 0 forced.

    Column 0 (the treatment) is partialled out of the others, then pivoted
    QR picks the independent remainder. Returns an empty array when column
    0 is identically zero.
    """
    n, m = A.shape
    scale = float(np.max(np.linalg.norm(A, axis=0))) if m else 0.0
    d = A[:, 0] if m else np.zeros(n)
    dd = float(d @ d)
    if m == 0 or dd <= (tol * scale) ** 2:
        return np.empty(0, np.intp)
    rest = A[:, 1:]
    if rest.shape[1] == 0:
        return np.array([0], dtype=np.intp)
    resid = rest - np.outer(d, d @ rest / dd)
    _, R, piv = sla.qr(resid, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * scale))
    return np.concatenate([[0], np.sort(piv[:rank]) + 1]).astype(np.intp)


def _hc_alpha_se(
    d_resid: NDArray[np.float64], obs_var: NDArray[np.float64]
) -> float:
    """Sandwich variance of the treatment coefficient via its partialled-out regressor."""
    denom = d_resid @ d_resid
    if denom == 0:
        return float("nan")
    return float(np.sqrt(np.sum(d_resid**2 * obs_var)) / denom)


def _orthonormal_basis(A: NDArray[np.float64]) -> NDArray[np.float64]:
    if A.shape[1] == 0:
        return np.zeros((A.shape[0], 0))
    Q, _ = np.linalg.qr(A)
    return Q


def hck_variances(
    Q: NDArray[np.float64], resid: NDArray[np.float64], dense_max_n: int = HCK_DENSE_MAX_N
) -> tuple[NDArray[np.float64], bool]:
    """Per-observation variances solving ``(M * M) s = e * e``.

    ``M = I - Q Q^T`` is the residual maker of the design (``Q`` an
    orthonormal basis including the intercept) and ``*`` is the elementwise
    product. Returns the solution and whether the system was usable.
    """
    n = Q.shape[0]
    e2 = resid**2
    h = np.einsum("ij,ij->i", Q, Q)
    if n <= dense_max_n:
        P = Q @ Q.T
        MM = P * P
        MM[np.diag_indices(n)] += 1.0 - 2.0 * h
        try:
            lu = sla.lu_factor(MM, check_finite=False)
            if np.min(np.abs(np.diag(lu[0]))) <= 1e-12 * np.max(np.abs(np.diag(lu[0]))):
                return e2, False
            sol = sla.lu_solve(lu, e2, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return e2, False
    else:
        # (M*M) s = s (1 - 2h) + diag(Q (Q^T diag(s) Q) Q^T)
        def matvec(s):
            s = np.ravel(s)
            inner = Q.T @ (Q * s[:, None])
            return s * (1.0 - 2.0 * h) + np.einsum("ij,jk,ik->i", Q, inner, Q)

        op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
        sol, info = cg(op, e2, rtol=1e-12, maxiter=10 * n)
        if info != 0:
            return e2, False
    if not np.all(np.isfinite(sol)):
        return e2, False
    return sol, True


def _ls(A: NDArray[np.float64], y: NDArray[np.float64]) -> NDArray[np.float64]:
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


# ---------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------


def ols_fit(data: Dataset, variance_kind: str = "HCK", columns: Optional[Iterable[int]] = None) -> OlsFit:
    """OLS of Y on (D, X[:, columns]) on demeaned data (intercept implicit).

    ``columns`` defaults to every control. Collinear columns are pruned by
    pivoted QR before fitting.
    """
    if variance_kind not in VARIANCE_KINDS:
        raise ValueError(f"variance_kind must be one of {VARIANCE_KINDS}")
    data = ensure_demeaned(data)
    n = data.n
    cols = np.arange(data.p) if columns is None else np.asarray(sorted(set(columns)), dtype=np.intp)
    Z = np.column_stack([data.D, data.X[:, cols]])
    if Z.shape[1] > n:
        raise InfeasibleError(f"OLS infeasible: {Z.shape[1]} regressors exceed n={n}")
    keep = independent_columns(Z)
    fallback = keep.size < Z.shape[1]
    if keep.size == 0:
        raise DegenerateTreatmentError("treatment is identically zero after demeaning")
    Zk = Z[:, keep]
    coef_k = _ls(Zk, data.Y)
    resid = data.Y - Zk @ coef_k
    coef = np.zeros(Z.shape[1])
    coef[keep] = coef_k

    ctrl = Zk[:, 1:]
    d_resid = data.D - ctrl @ _ls(ctrl, data.D) if ctrl.shape[1] else data.D.copy()

    Q = _orthonormal_basis(np.column_stack([np.ones(n), Zk]))
    kind = variance_kind
    obs_var: NDArray[np.float64]
    if kind == "HC0":
        obs_var = resid**2
    elif kind == "HC3":
        h = np.einsum("ij,ij->i", Q, Q)
        obs_var = resid**2 / np.maximum(1.0 - h, np.finfo(float).eps) ** 2
    else:
        obs_var, ok = hck_variances(Q, resid)
        if not ok:
            warnings.warn("HCK system numerically singular; falling back to HC3", stacklevel=2)
            fallback = True
            h = np.einsum("ij,ij->i", Q, Q)
            obs_var = resid**2 / np.maximum(1.0 - h, np.finfo(float).eps) ** 2
            kind = "HC3"
    se = _hc_alpha_se(d_resid, obs_var)
    return OlsFit(
        coefficients=coef,
        residuals=resid,
        variance_kind=kind,
        alpha_se=se,
        singular_fallback_used=bool(fallback),
        kept_columns=keep,
        obs_variances=obs_var,
    )


def _check_loadings(choice: RegularizationChoice, p: int, what: str) -> None:
    if choice.loadings.shape != (p,):
        raise ValueError(f"{what}: loadings have length {choice.loadings.size}, expected {p}")


def post_double_lasso(
    data: Dataset,
    choice1: RegularizationChoice,
    choice2: RegularizationChoice,
    amelioration: Iterable[int] = (),
    variance_kind: str = "HC0",
) -> PdlFit:
    """Post double Lasso estimate of the treatment effect."""
    data = ensure_demeaned(data)
    _check_loadings(choice1, data.p, "choice1")
    _check_loadings(choice2, data.p, "choice2")
    fit1 = solve_lasso(LassoProblem(data.X, data.Y, choice1.lam, choice1.loadings))
    fit2 = solve_lasso(LassoProblem(data.X, data.D, choice2.lam, choice2.loadings))
    I1, I2 = fit1.support, fit2.support
    amel = np.asarray(sorted(set(int(a) for a in amelioration)), dtype=np.intp)
    if amel.size and (amel.min() < 0 or amel.max() >= data.p):
        raise ValueError("amelioration indices out of range")
    S = np.union1d(np.union1d(I1, I2), amel).astype(np.intp)
    if S.size + 1 >= data.n:
        raise InfeasibleError(
            f"post-OLS infeasible: {S.size} selected controls plus treatment vs n={data.n}"
        )
    ols = ols_fit(data, variance_kind, columns=S)
    beta = np.zeros(data.p)
    beta[S] = ols.coefficients[1:]
    dropped = np.setdiff1d(S, S[ols.kept_columns[1:] - 1])
    return PdlFit(
        alpha_tilde=ols.alpha,
        beta_tilde=beta,
        I1=I1,
        I2=I2,
        union_plus_amelioration=S,
        se=ols.alpha_se,
        lambda1_used=choice1,
        lambda2_used=choice2,
        dropped_collinear=dropped.astype(np.intp),
        singular_fallback_used=ols.singular_fallback_used,
    )


def post_lasso(
    data: Dataset, choice1: RegularizationChoice, variance_kind: str = "HC0"
) -> PdlFit:
    """OLS of Y on D and the controls selected by a single Lasso of Y on X."""
    data = ensure_demeaned(data)
    _check_loadings(choice1, data.p, "choice1")
    fit1 = solve_lasso(LassoProblem(data.X, data.Y, choice1.lam, choice1.loadings))
    S = fit1.support
    if S.size + 1 >= data.n:
        raise InfeasibleError("post-OLS infeasible")
    ols = ols_fit(data, variance_kind, columns=S)
    beta = np.zeros(data.p)
    beta[S] = ols.coefficients[1:]
    return PdlFit(
        ols.alpha, beta, S, np.empty(0, np.intp), S, ols.alpha_se, choice1, choice1,
        singular_fallback_used=ols.singular_fallback_used,
    )


def debiased_lasso(
    data: Dataset, choice1: RegularizationChoice, choice2: RegularizationChoice
) -> DebiasedFit:
    """Debiased Lasso with a nodewise-Lasso approximate inverse.

    ``choice1`` applies to the joint Lasso of Y on Z = (D, X) and must carry
    p + 1 loadings (treatment first; the treatment is penalized).
    ``choice2`` applies to the Lasso of D on X.
    """
    data = ensure_demeaned(data)
    n, p = data.n, data.p
    _check_loadings(choice1, p + 1, "choice1 (joint design)")
    _check_loadings(choice2, p, "choice2")
    Z = np.column_stack([data.D, data.X])
    joint = solve_lasso(LassoProblem(Z, data.Y, choice1.lam, choice1.loadings))
    theta = joint.theta_hat
    node = solve_lasso(LassoProblem(data.X, data.D, choice2.lam, choice2.loadings))
    gamma = node.theta_hat
    d_resid = data.D - data.X @ gamma
    tau1_sq = float(d_resid @ d_resid / n + choice2.lam * np.sum(choice2.loadings * np.abs(gamma)))
    if tau1_sq <= 0:
        raise DegenerateTreatmentError("tau_1^2 is zero: the treatment is identically zero")
    resid = data.Y - Z @ theta
    alpha_hat = float(theta[0])
    # Omega_1 Z^T = tau^-2 (D - X gamma)^T
    alpha_tilde = alpha_hat + float(d_resid @ resid) / (n * tau1_sq)
    sigma_u = float(np.sqrt(resid @ resid / n))
    se = sigma_u * float(np.sqrt(d_resid @ d_resid / n)) / (tau1_sq * np.sqrt(n))
    return DebiasedFit(
        alpha_hat_initial=alpha_hat,
        alpha_tilde=alpha_tilde,
        tau1_sq=tau1_sq,
        gamma_hat=gamma,
        se=se,
        beta_hat=theta[1:].copy(),
    )


def oracle_estimator(data: Dataset) -> float:
    """Regression of ``Y - X pi*`` on ``D - X gamma*`` using the true coefficients."""
    est, _ = oracle_with_se(data)
    return est


def oracle_with_se(data: Dataset) -> tuple[float, float]:
    if data.truth is None:
        raise ValueError("oracle estimator needs the true-parameter sidecar")
    spec = data.truth.spec
    data = ensure_demeaned(data)
    dv = data.D - data.X @ spec.gamma_star
    yu = data.Y - data.X @ spec.pi_star
    denom = dv @ dv
    est = float(dv @ yu / denom)
    resid = yu - est * dv
    se = float(np.sqrt(np.sum(dv**2 * resid**2)) / denom)
    return est, se


def confidence_interval(estimate: float, se: float, level: float = 0.90) -> tuple[float, float]:
    """Normal-approximation interval ``estimate +/- z_{(1+level)/2} se``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if se < 0:
        raise ValueError("standard error must be non-negative")
    half = float(norm.ppf((1.0 + level) / 2.0)) * se
    return estimate - half, estimate + half
