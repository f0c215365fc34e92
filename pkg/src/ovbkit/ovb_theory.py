"""Finite-sample theory for Lasso under-selection and the resulting OVB.

Everything here is a pure function of scalar inputs (or a design matrix for
``incoherence_phi``). Logarithms are natural.

Coefficient magnitudes enter the bound through multipliers ``a`` and ``b``::

    beta*_j  sqrt(s/n) = a * sigma_eta / phi * sqrt(2 (1 + tau) log p / n)
    gamma*_j sqrt(s/n) = b * sigma_v   / phi * sqrt(2 (1 + tau) log p / n)

so ``|a|, |b| <= 1`` means both Lasso steps sit below their selection
thresholds. Rescaling the covariates leaves ``(a, b)`` unchanged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import minimize_scalar

from .model_core import DomainError
from .reg_rules import lambda_lemma1

ENVELOPE_CASES = ("lower_I", "lower_II", "upper_I", "upper_II_i", "upper_II_ii")
ENVELOPE_LABEL = "envelope up to unspecified universal constants"
ABSENCE_THRESHOLD = 3.0


@dataclass(frozen=True)
class OvbInputs:
    n: int
    p: int
    k: int
    tau: float = 0.5
    phi: float = 1.0
    sigma_eta: float = 1.0
    sigma_v: float = 1.0
    a: float = 1.0
    b: float = 1.0
    s_over_n: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 1 or self.p < 2 or self.k < 1:
            raise DomainError(f"need n >= 1, p >= 2, k >= 1; got n={self.n}, p={self.p}, k={self.k}")
        if not 0 < self.phi <= 1:
            raise DomainError(f"phi must lie in (0, 1], got {self.phi}")
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")
        if not (self.sigma_eta > 0 and self.sigma_v > 0 and self.s_over_n > 0):
            raise DomainError("sigma_eta, sigma_v and s_over_n must be positive")
        if not (0 < abs(self.a) <= 1 and 0 < abs(self.b) <= 1):
            raise DomainError(f"need 0 < |a|, |b| <= 1, got a={self.a}, b={self.b}")

    @property
    def klogp_over_n(self) -> float:
        return self.k * math.log(self.p) / self.n


@dataclass(frozen=True)
class OvbBound:
    value: float
    r_star: float
    T1_at_r: float
    T2_at_r: float
    sigma_alpha_tilde: float
    ratio: float
    event_prob_lower: float
    vacuous: bool = False


@dataclass(frozen=True)
class Certificate:
    lam: float
    thresholds: NDArray[np.float64]
    all_below: bool
    prob_lower_bound: float
    joint_prob_lower_bound: float


def under_selection_certificate(
    theta_star: NDArray[np.float64],
    s_over_n: float,
    sigma: float,
    phi: float,
    tau: float,
    n: int,
    p: int,
) -> Certificate:
    """Check whether every true coefficient lies below the Lasso's selection threshold.

    With the noise-level rule ``lam = (2 sigma / phi) sqrt(s/n) sqrt(2 (1+tau) log p / n)``
    the Lasso returns the zero vector with probability at least ``1 - p^-tau``
    whenever ``|theta*_l| <= lam n / (2 s)`` for all ``l``. Requiring this for
    both the outcome and treatment equations gives ``1 - 2 p^-tau``.
    """
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=np.float64))
    lam = lambda_lemma1(sigma, phi, s_over_n, tau, n, p).lam
    threshold = lam / (2.0 * s_over_n)
    thresholds = np.full(theta_star.shape, threshold)
    tail = p ** (-tau)
    return Certificate(
        lam=lam,
        thresholds=thresholds,
        all_below=bool(np.all(np.abs(theta_star) <= thresholds)),
        prob_lower_bound=1.0 - tail,
        joint_prob_lower_bound=1.0 - 2.0 * tail,
    )


def _t1(inp: OvbInputs, r):
    x = inp.klogp_over_n
    phi2 = inp.phi**2
    num = (1 + inp.tau) * abs(inp.a * inp.b) / phi2 * inp.sigma_eta * x
    den = 4 * (1 + inp.tau) / phi2 * inp.b**2 * inp.sigma_v * x + (1 + r) * inp.sigma_v
    return num / den


def _selection_tail(inp: OvbInputs) -> float:
    return inp.k * math.exp(-(inp.b**2) * (1 + inp.tau) * math.log(inp.p) / (4 * inp.phi**2))


def _t2(inp: OvbInputs, r):
    return 1.0 - _selection_tail(inp) - inp.p ** (-inp.tau) - np.exp(-inp.n * np.square(r) / 8.0)


def asymptotic_sd(n: int, sigma_eta: float, sigma_v: float) -> float:
    """Asymptotic standard deviation ``sigma_eta / (sigma_v sqrt(n))`` of the treatment estimate."""
    if not (n > 0 and sigma_eta > 0 and sigma_v > 0):
        raise DomainError("n, sigma_eta and sigma_v must be positive")
    return sigma_eta / (sigma_v * math.sqrt(n))


def ovb_lower_bound(inputs: OvbInputs, r_grid_size: int = 1024) -> OvbBound:
    """Lower bound on the conditional OVB of post double Lasso, maximized over r in (0, 1]."""
    if r_grid_size < 2:
        raise ValueError("r_grid_size must be at least 2")
    inp = inputs
    grid = np.arange(1, r_grid_size + 1, dtype=np.float64) / r_grid_size
    t2 = _t2(inp, grid)
    prod = _t1(inp, grid) * t2
    event = 1.0 - _selection_tail(inp) - 2.0 * inp.p ** (-inp.tau)
    sd = asymptotic_sd(inp.n, inp.sigma_eta, inp.sigma_v)
    if np.all(t2 < 0):
        return OvbBound(0.0, 1.0, float(_t1(inp, 1.0)), float(_t2(inp, 1.0)), sd, 0.0, event, vacuous=True)
    i = int(np.argmax(prod))
    lo = grid[i - 1] if i > 0 else grid[0] * 1e-6
    hi = grid[min(i + 1, r_grid_size - 1)]
    res = minimize_scalar(
        lambda r: -float(_t1(inp, r) * _t2(inp, r)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12},
    )
    r_star, best = float(grid[i]), float(prod[i])
    if -res.fun > best:
        r_star, best = float(res.x), float(-res.fun)
    best = max(best, 0.0)
    return OvbBound(
        value=best,
        r_star=r_star,
        T1_at_r=float(_t1(inp, r_star)),
        T2_at_r=float(_t2(inp, r_star)),
        sigma_alpha_tilde=sd,
        ratio=best / sd,
        event_prob_lower=event,
    )


def absence_of_ovb_check(a: float, b: float) -> bool:
    """True when either coefficient multiplier is large enough for perfect selection.

    If ``|a| > 3`` or ``|b| > 3`` for every relevant control, one of the two
    Lasso steps selects the relevant set with probability at least
    ``1 - p^-tau`` and the final OLS step contains no omitted variables.
    """
    return abs(a) > ABSENCE_THRESHOLD or abs(b) > ABSENCE_THRESHOLD


def sparsity_diagnostics(n: int, p: int, k: int) -> dict[str, float]:
    if n < 1 or p < 1 or k < 0:
        raise DomainError("need n, p >= 1 and k >= 0")
    klogp = k * math.log(p)
    return {"klogp_over_n": klogp / n, "klogp_over_sqrtn": klogp / math.sqrt(n)}


def incoherence_phi(X: NDArray[np.float64], K) -> float:
    """``1 - ||X_Kc^T X_K (X_K^T X_K)^-1||_inf`` (max absolute row sum).

    Values at or below zero mean the incoherence condition fails; a warning
    is issued in that case.
    """
    X = np.asarray(X, dtype=np.float64)
    K = np.unique(np.asarray(K, dtype=np.intp))
    if K.size == 0:
        raise DomainError("relevant set K must be nonempty")
    Kc = np.setdiff1d(np.arange(X.shape[1]), K)
    XK = X[:, K]
    G = XK.T @ XK
    if np.linalg.matrix_rank(G) < K.size:
        raise DomainError("X_K^T X_K is singular")
    if Kc.size == 0:
        return 1.0
    # (X_Kc^T X_K) G^-1 = (G^-1 X_K^T X_Kc)^T since G is symmetric
    M = np.linalg.solve(G, XK.T @ X[:, Kc]).T
    phi = 1.0 - float(np.max(np.sum(np.abs(M), axis=1)))
    if phi <= 0:
        warnings.warn(f"incoherence condition fails: phi = {phi:.4g}", stacklevel=2)
    return phi


def scaling_envelopes(
    n: int,
    p: int,
    k: int,
    sigma_eta: float,
    sigma_v: float,
    alpha_star: float,
    case: str,
    r: float = 1.0,
    user_constant: float = 1.0,
) -> dict:
    """Rate envelopes for the OVB lower and upper bounds.

    The true bounds hold only up to universal constants that are not
    available in closed form. The returned value is ``user_constant`` times
    the rate expression.
    """
    if case not in ENVELOPE_CASES:
        raise ValueError(f"unknown envelope case {case!r}; expected one of {', '.join(ENVELOPE_CASES)}")
    if not 0 < r <= 1:
        raise DomainError("r must lie in (0, 1]")
    if not user_constant > 0:
        raise DomainError("user_constant must be positive")
    if not (sigma_eta > 0 and sigma_v > 0):
        raise DomainError("sigma_eta and sigma_v must be positive")
    x = sparsity_diagnostics(n, p, k)["klogp_over_n"]
    ratio = sigma_eta / sigma_v
    leading = {
        "lower_I": ratio,
        "lower_II": abs(alpha_star),
        "upper_I": ratio,
        "upper_II_i": abs(alpha_star),
        "upper_II_ii": max(abs(alpha_star), ratio),
    }[case]
    rate = leading * min(x, 1.0)
    if case.startswith("upper"):
        rate = max(rate, sigma_v * sigma_eta * max(r, x) / (max(x, 1.0) * sigma_v**2))
    return {
        "case": case,
        "klogp_over_n": x,
        "value": user_constant * rate,
        "user_constant": user_constant,
        "label": ENVELOPE_LABEL,
    }
