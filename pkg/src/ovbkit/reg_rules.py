"""Regularization-parameter rules.

All lambdas are returned on the solver's canonical scale
``(1/2n)|y - X theta|^2 + lam * sum_j l_j |theta_j|``. The heteroscedastic
data-driven rule is usually written as
``(1/n) RSS + (lam_B / n) sum_j |l_j theta_j|``; dividing by two gives the
canonical ``lam = lam_B / (2n)`` with the same loadings.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from .lasso import LassoProblem, lambda_max, lasso_path, solve_lasso
from .model_core import DomainError, RngStream

RULES = ("bickel", "lemma1", "bcch", "cv_min", "cv_1se")

BCCH_C = 1.1
BCCH_ITER = 2
BCCH_REL_TOL = 1e-4
CV_FOLDS = 10
CV_GRID = 100
CV_RATIO = 1e-4
DEFAULT_TAU = 0.5


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizationChoice:
    rule: str
    lam: float
    loadings: NDArray[np.float64]
    multiplier: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.multiplier > 0:
            raise ValueError("multiplier must be positive")
        w = np.asarray(self.loadings, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("loadings must be non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "loadings", w)

    @property
    def label(self) -> str:
        return self.rule if self.multiplier == 1.0 else f"{self.rule}x{self.multiplier:g}"


def _check_positive(**kw: float) -> None:
    for name, val in kw.items():
        if not val > 0:
            raise DomainError(f"{name} must be positive, got {val}")


def lambda_bickel(sigma: float, b: float, tau: float, n: int, p: int) -> RegularizationChoice:
    """``2 sigma sqrt(2 b (1 + tau) log p / n)`` with unit loadings."""
    _check_positive(sigma=sigma, b=b, tau=tau, n=n, p=p)
    lam = 2.0 * sigma * math.sqrt(2.0 * b * (1.0 + tau) * math.log(p) / n)
    return RegularizationChoice(
        "bickel", lam, np.ones(p), provenance={"sigma": sigma, "b": b, "tau": tau}
    )


def lambda_lemma1(
    sigma: float, phi: float, s_over_n: float, tau: float, n: int, p: int
) -> RegularizationChoice:
    """``(2 sigma / phi) sqrt(s/n) sqrt(2 (1 + tau) log p / n)`` with unit loadings."""
    if not 0 < phi <= 1:
        raise DomainError(f"phi must lie in (0, 1], got {phi}")
    _check_positive(sigma=sigma, s_over_n=s_over_n, tau=tau, n=n, p=p)
    # same operation order as lambda_bickel so phi = 1 reproduces it bit for bit
    lam = 2.0 * (sigma / phi) * math.sqrt(2.0 * s_over_n * (1.0 + tau) * math.log(p) / n)
    return RegularizationChoice(
        "lemma1",
        lam,
        np.ones(p),
        provenance={"sigma": sigma, "phi": phi, "s_over_n": s_over_n, "tau": tau},
    )


def column_rms(X: NDArray[np.float64]) -> NDArray[np.float64]:
    """Root mean square of each column; zero columns get 1 (their coefficient stays 0)."""
    rms = np.sqrt(np.einsum("ij,ij->j", X, X) / X.shape[0])
    rms[rms == 0] = 1.0
    return rms


def bickel_for_data(
    X: NDArray[np.float64], sigma: float, tau: float = DEFAULT_TAU
) -> RegularizationChoice:
    """Known-sigma rule on the normalized design.

    Normalizing each column to unit mean square, solving with
    ``2 sigma sqrt(2 (1 + tau) log p / n)`` and rescaling the coefficients is
    the same problem as solving on the raw design with loadings equal to the
    column root mean squares.
    """
    n, p = X.shape
    base = lambda_bickel(sigma, 1.0, tau, n, p)
    return replace(base, loadings=column_rms(X), provenance={**base.provenance, "normalized": True})


def lemma1_for_data(
    X: NDArray[np.float64], sigma: float, phi: float = 1.0, tau: float = DEFAULT_TAU
) -> RegularizationChoice:
    n, p = X.shape
    base = lambda_lemma1(sigma, phi, 1.0, tau, n, p)
    return replace(base, loadings=column_rms(X), provenance={**base.provenance, "normalized": True})


def bcch_raw_lambda(n: int, p: int, c: float = BCCH_C) -> float:
    """``2 c sqrt(n) Phi^{-1}(1 - varsigma / (2p))`` with ``varsigma = 0.1 / log n``."""
    if n <= 1:
        raise DomainError("the data-driven rule needs n > 1 (log n must be positive)")
    _check_positive(c=c, p=p)
    varsigma = 0.1 / math.log(n)
    return 2.0 * c * math.sqrt(n) * float(norm.isf(varsigma / (2.0 * p)))


def _heteroscedastic_loadings(X: NDArray[np.float64], e: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sqrt((X**2).T @ (e**2) / X.shape[0])


def lambda_bcch(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    c: float = BCCH_C,
    n_iter: int = BCCH_ITER,
    stream: Optional[RngStream] = None,
) -> RegularizationChoice:
    """Heteroscedasticity-robust rule with iterated penalty loadings.

    Initial loadings use ``y - ybar`` as the residual; each iteration fits
    the Lasso, refits OLS on its support and recomputes the loadings from
    the post-Lasso residuals. ``stream`` is accepted for interface symmetry;
    the rule is deterministic.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    raw = bcch_raw_lambda(n, p, c)
    lam = raw / (2.0 * n)
    e = y - y.mean()
    if not np.any(e):
        raise DegenerateInputError("outcome is constant: all initial penalty loadings are zero")
    zero_col = ~np.any(X, axis=0)
    w = _heteroscedastic_loadings(X, e)
    w[zero_col] = 1.0
    iters = 0
    fallbacks = 0
    for _ in range(n_iter):
        fit = solve_lasso(LassoProblem(X, y, lam, w))
        S = fit.support
        if S.size + 1 < n:
            if S.size:
                coef, *_ = np.linalg.lstsq(X[:, S], y, rcond=None)
                e = y - X[:, S] @ coef
            else:
                e = y - y.mean()
        else:
            fallbacks += 1
            e = y - X @ fit.theta_hat
        w_new = _heteroscedastic_loadings(X, e)
        w_new[zero_col] = 1.0
        iters += 1
        change = np.max(np.abs(w_new - w) / np.where(w > 0, w, 1.0))
        w = w_new
        if change < BCCH_REL_TOL:
            break
    if np.any(w[~zero_col] == 0):
        w[w == 0] = np.finfo(float).tiny
    return RegularizationChoice(
        "bcch",
        lam,
        w,
        provenance={"c": c, "varsigma": 0.1 / math.log(n), "raw_lambda": raw,
                    "iterations": iters, "lasso_residual_fallbacks": fallbacks},
    )


def cv_lambda(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    folds: int = CV_FOLDS,
    grid_size: int = CV_GRID,
    stream: Optional[RngStream] = None,
    loadings: Optional[NDArray[np.float64]] = None,
) -> tuple[RegularizationChoice, RegularizationChoice]:
    """K-fold cross-validation over a geometric lambda grid.

    Returns the error-minimizing choice and the largest lambda whose CV
    error is within one standard error of the minimum. Loadings default to
    column root mean squares (standardized covariates). Each training fold
    is re-centered so the held-out error includes an intercept.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds:
        raise ValueError(f"n={n} is smaller than the number of folds {folds}")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    w = column_rms(X) if loadings is None else np.asarray(loadings, dtype=np.float64)
    lmax = lambda_max(X, y - y.mean(), w)
    if lmax == 0:
        lmax = 1.0
    grid = lmax * np.geomspace(1.0, CV_RATIO, grid_size) if grid_size > 1 else np.array([lmax])

    rng = (stream or RngStream(0, 0, "cv_folds")).generator()
    assign = rng.permutation(np.arange(n) % folds)

    errs = []
    for f in range(folds):
        test = assign == f
        train = ~test
        ytr = y[train]
        if np.ptp(ytr) == 0:
            warnings.warn(f"fold {f} has a constant training outcome; skipped", stacklevel=2)
            continue
        xm, ym = X[train].mean(axis=0), ytr.mean()
        Xtr, Xte = X[train] - xm, X[test] - xm
        ytr_c, yte_c = ytr - ym, y[test] - ym
        path = lasso_path(Xtr, ytr_c, grid, w, stop_when_saturated=True)
        resid = yte_c[:, None] - Xte @ path.T
        errs.append(np.mean(resid**2, axis=0))
    if not errs:
        raise DegenerateInputError("every cross-validation fold was degenerate")
    E = np.vstack(errs)
    mean_err = E.mean(axis=0)
    se = E.std(axis=0, ddof=1) / math.sqrt(E.shape[0]) if E.shape[0] > 1 else np.zeros(grid.size)
    i_min = int(np.argmin(mean_err))
    within = np.flatnonzero(mean_err <= mean_err[i_min] + se[i_min])
    i_1se = int(within.min())  # grid is descending: smallest index = largest lambda
    prov = {"folds": folds, "grid_size": grid_size, "lambda_max": lmax, "used_folds": E.shape[0]}
    return (
        RegularizationChoice("cv_min", float(grid[i_min]), w, provenance={**prov, "cv_error": float(mean_err[i_min])}),
        RegularizationChoice("cv_1se", float(grid[i_1se]), w, provenance={**prov, "cv_error": float(mean_err[i_1se])}),
    )


def scale_choice(choice: RegularizationChoice, multiplier: float) -> RegularizationChoice:
    """Multiply lambda by ``multiplier``; multipliers compose."""
    if not multiplier > 0:
        raise ValueError(f"multiplier must be positive, got {multiplier}")
    return replace(choice, lam=choice.lam * multiplier, multiplier=choice.multiplier * multiplier)


# ---------------------------------------------------------------------
# Rule strings: "bcch", "bcch×1.5", "cv_1se*0.5"
# ---------------------------------------------------------------------

_RULE_RE = re.compile(r"^\s*([a-z_0-9]+?)\s*(?:[×x*]\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?))?\s*$")


@dataclass(frozen=True)
class RuleSpec:
    name: str
    multiplier: float = 1.0
    tau: float = DEFAULT_TAU
    phi: float = 1.0
    c: float = BCCH_C
    n_iter: int = BCCH_ITER
    folds: int = CV_FOLDS
    grid_size: int = CV_GRID

    def __post_init__(self) -> None:
        if self.name not in RULES:
            raise ValueError(f"unknown rule {self.name!r}; expected one of {', '.join(RULES)}")
        if not self.multiplier > 0:
            raise ValueError("rule multiplier must be positive")

    @property
    def label(self) -> str:
        return self.name if self.multiplier == 1.0 else f"{self.name}x{self.multiplier:g}"


def parse_rule(text: str, **params) -> RuleSpec:
    """Parse ``"bcch"``, ``"bcch×1.5"``, ``"bcchx0.5"`` or ``"cv_min*2"``."""
    m = _RULE_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"malformed rule string {text!r}")
    name, mult = m.group(1), m.group(2)
    return RuleSpec(name=name, multiplier=float(mult) if mult else 1.0, **params)


def resolve_rule(
    spec: RuleSpec,
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    sigma: Optional[float] = None,
    stream: Optional[RngStream] = None,
) -> RegularizationChoice:
    """Evaluate a rule on demeaned data ``(X, y)`` and apply its multiplier.

    ``sigma`` is the known noise level required by the theoretical rules.
    """
    if spec.name in ("bickel", "lemma1"):
        if sigma is None:
            raise ValueError(f"rule {spec.name!r} needs a known noise level sigma")
        if spec.name == "bickel":
            choice = bickel_for_data(X, sigma, spec.tau)
        else:
            choice = lemma1_for_data(X, sigma, spec.phi, spec.tau)
    elif spec.name == "bcch":
        choice = lambda_bcch(X, y, spec.c, spec.n_iter)
    else:
        cv_min, cv_1se = cv_lambda(X, y, spec.folds, spec.grid_size, stream)
        choice = cv_min if spec.name == "cv_min" else cv_1se
    return choice if spec.multiplier == 1.0 else scale_choice(choice, spec.multiplier)
