"""Data-generating processes, counter-based random streams and demeaning.

Every simulated dataset follows the partially linear model

    D = X gamma + sigma_d(X) v
    Y = D alpha + X beta + sigma_y(D, X) eta

with the nonzero coefficients stored in the first ``k`` positions of
``beta`` and ``gamma``.
"""

from __future__ import annotations

import hashlib
import math
import re
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

X_LAWS = ("gaussian_iid", "bernoulli")
ERROR_LAWS = ("std_normal", "t5_scaled")
SIGMA_MAPS = ("constant", "multiplicative")

T5_SCALE = math.sqrt(5.0 / 3.0)


class RegistryError(KeyError):
    """Unknown DGP name or malformed DGP string."""


class DomainError(ValueError):
    """Parameter outside the domain of a distribution or formula."""


@dataclass(frozen=True)
class DgpSpec:
    name: str
    n: int
    p: int
    k: int
    alpha_star: float
    beta_star: NDArray[np.float64]
    gamma_star: NDArray[np.float64]
    x_law: str = "gaussian_iid"
    sigma_x: float = 1.0
    eta_law: str = "std_normal"
    v_law: str = "std_normal"
    sigma_y_map: str = "constant"
    sigma_d_map: str = "constant"

    def __post_init__(self) -> None:
        if self.n < 1 or self.p < 1:
            raise DomainError(f"n and p must be positive, got n={self.n}, p={self.p}")
        if not 0 <= self.k <= min(self.n, self.p):
            raise DomainError(f"k={self.k} must lie in [0, min(n, p)]")
        beta = np.asarray(self.beta_star, dtype=np.float64)
        gamma = np.asarray(self.gamma_star, dtype=np.float64)
        if beta.shape != (self.p,) or gamma.shape != (self.p,):
            raise DomainError("beta_star and gamma_star must have length p")
        beta.setflags(write=False)
        gamma.setflags(write=False)
        object.__setattr__(self, "beta_star", beta)
        object.__setattr__(self, "gamma_star", gamma)
        supp_b = np.flatnonzero(beta)
        supp_g = np.flatnonzero(gamma)
        if len(supp_b) != self.k or not np.array_equal(supp_b, supp_g):
            raise DomainError("beta_star and gamma_star must share the same k-element support")
        if self.x_law not in X_LAWS:
            raise DomainError(f"unknown covariate law {self.x_law!r}")
        if self.eta_law not in ERROR_LAWS or self.v_law not in ERROR_LAWS:
            raise DomainError("error laws must be one of " + ", ".join(ERROR_LAWS))
        if self.sigma_y_map not in SIGMA_MAPS or self.sigma_d_map not in SIGMA_MAPS:
            raise DomainError("heteroscedasticity maps must be one of " + ", ".join(SIGMA_MAPS))
        if self.sigma_x <= 0:
            raise DomainError(f"sigma_x must be positive, got {self.sigma_x}")
        if self.x_law == "bernoulli" and self.sigma_x > 0.5:
            raise DomainError(
                f"bernoulli covariates need sigma_x <= 0.5 (1 - 4 sigma_x^2 = "
                f"{1 - 4 * self.sigma_x**2:.4g} < 0)"
            )

    @property
    def support(self) -> NDArray[np.intp]:
        return np.flatnonzero(self.beta_star)

    @property
    def pi_star(self) -> NDArray[np.float64]:
        """Reduced-form coefficients gamma * alpha + beta."""
        return self.gamma_star * self.alpha_star + self.beta_star

    @property
    def bernoulli_prob(self) -> float:
        return (1.0 - math.sqrt(1.0 - 4.0 * self.sigma_x**2)) / 2.0

    def with_sigma_x(self, sigma_x: float) -> DgpSpec:
        return replace(self, sigma_x=float(sigma_x))

    def describe(self) -> dict:
        return {
            "dgp": self.name,
            "n": self.n,
            "p": self.p,
            "k": self.k,
            "sigma_x": self.sigma_x,
            "alpha_star": self.alpha_star,
        }


@dataclass(frozen=True)
class Truth:
    spec: DgpSpec
    eta: NDArray[np.float64]
    v: NDArray[np.float64]
    sigma_y: NDArray[np.float64]
    sigma_d: NDArray[np.float64]


@dataclass(frozen=True)
class Dataset:
    Y: NDArray[np.float64]
    D: NDArray[np.float64]
    X: NDArray[np.float64]
    demeaned: bool = False
    truth: Optional[Truth] = None

    def __post_init__(self) -> None:
        Y = np.asarray(self.Y, dtype=np.float64)
        D = np.asarray(self.D, dtype=np.float64)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 1 or D.ndim != 1:
            raise ValueError("Y and D must be vectors and X a matrix")
        if not (len(Y) == len(D) == X.shape[0]):
            raise ValueError(
                f"inconsistent dimensions: len(Y)={len(Y)}, len(D)={len(D)}, X rows={X.shape[0]}"
            )
        for a in (Y, D, X):
            a.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: NDArray[np.intp]) -> Dataset:
        """Rows ``rows`` of the raw data (demeaning state is reset)."""
        return Dataset(self.Y[rows], self.D[rows], self.X[rows], demeaned=False)


@dataclass(frozen=True)
class RngStream:
    """Key for a reproducible random stream.

    The draws depend only on ``(base_seed, rep_index, substream_label)``;
    the key is hashed into a Philox counter-based generator, so streams can
    be created in any order and on any thread.
    """

    base_seed: int
    rep_index: int = 0
    substream_label: str = "data"

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16, person=b"ovbkit-rng")
        h.update(int(self.base_seed).to_bytes(8, "little", signed=True))
        h.update(int(self.rep_index).to_bytes(8, "little", signed=False))
        h.update(self.substream_label.encode("utf-8"))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def child(self, label: str) -> RngStream:
        return RngStream(self.base_seed, self.rep_index, f"{self.substream_label}/{label}")


# ---------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------


def _sparse_ones(p: int, k: int) -> NDArray[np.float64]:
    v = np.zeros(p)
    v[:k] = 1.0
    return v


def _base(name: str, n: int, p: int, k: int, sigma_x: float, **kw) -> DgpSpec:
    return DgpSpec(
        name=name,
        n=n,
        p=p,
        k=k,
        alpha_star=kw.pop("alpha_star", 0.0),
        beta_star=_sparse_ones(p, k),
        gamma_star=_sparse_ones(p, k),
        sigma_x=sigma_x,
        **kw,
    )


_APPENDIX = {
    "A1": dict(x_law="bernoulli"),
    "A2": dict(eta_law="t5_scaled", v_law="t5_scaled"),
    "A3": dict(sigma_y_map="multiplicative", sigma_d_map="multiplicative"),
    "A4": dict(k=10),
    "A5": dict(alpha_star=1.0),
    "A6": dict(alpha_star=-1.0),
}

_NAME_RE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")

REGISTRY_NAMES = ("main", "large", *_APPENDIX)


def dgp_registry_lookup(
    name: str, sigma_x: float = 0.3, n: Optional[int] = None
) -> DgpSpec:
    """Build a registered DGP.

    ``name`` is ``main``, ``large`` or ``A1`` ... ``A6``. ``main`` takes a
    sample size (default 500) with p=200 and k=5; ``large`` is
    (n, p, k) = (10000, 4000, 5); the appendix designs modify ``main(500)``.
    """
    key = name.strip()
    if key == "main":
        n_ = 500 if n is None else int(n)
        return _base("main", n_, 200, 5, sigma_x)
    if key == "large":
        if n is not None and int(n) != 10000:
            raise RegistryError("the 'large' design has fixed n=10000")
        return _base("large", 10000, 4000, 5, sigma_x)
    if key in _APPENDIX:
        kw = dict(_APPENDIX[key])
        k = kw.pop("k", 5)
        n_ = 500 if n is None else int(n)
        return _base(key, n_, 200, k, sigma_x, **kw)
    raise RegistryError(f"unknown DGP {name!r}; expected one of {', '.join(REGISTRY_NAMES)}")


def parse_dgp_name(text: str) -> tuple[str, dict]:
    """Split ``"main(500)"``, ``"main(500, 0.3)"`` or ``"A1(0.2)"`` into name and kwargs.

    Positional arguments are ``(n, sigma_x)`` for ``main`` and ``(sigma_x,)``
    for every other design.
    """
    m = _NAME_RE.match(text)
    if not m:
        raise RegistryError(f"malformed DGP string {text!r}")
    name, args = m.group(1), m.group(2)
    if name not in REGISTRY_NAMES:
        raise RegistryError(f"unknown DGP {name!r}; expected one of {', '.join(REGISTRY_NAMES)}")
    positional = ("n", "sigma_x") if name == "main" else ("sigma_x",)
    kwargs: dict = {}
    tokens = [a.strip() for a in (args or "").split(",") if a.strip()]
    for i, tok in enumerate(tokens):
        if "=" in tok:
            key, val = (s.strip() for s in tok.split("=", 1))
        elif i < len(positional):
            key, val = positional[i], tok
        else:
            raise RegistryError(f"too many arguments in {text!r}")
        try:
            if key == "n":
                kwargs["n"] = int(val)
            elif key == "sigma_x":
                kwargs["sigma_x"] = float(val)
            else:
                raise RegistryError(f"unknown DGP argument {tok!r} in {text!r}")
        except ValueError as exc:
            raise RegistryError(f"bad value {val!r} for {key} in {text!r}") from exc
    return name, kwargs


# ---------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------


def _draw_errors(rng: np.random.Generator, law: str, n: int) -> NDArray[np.float64]:
    if law == "std_normal":
        return rng.standard_normal(n)
    return rng.standard_t(5, size=n) / T5_SCALE


def _multiplicative(index: NDArray[np.float64]) -> NDArray[np.float64]:
    sq = (1.0 + index) ** 2
    return np.sqrt(sq / sq.mean())


def generate_dataset(spec: DgpSpec, stream: RngStream) -> Dataset:
    """Draw one dataset. Draw order is X, then v, then eta."""
    rng = stream.generator()
    n, p = spec.n, spec.p
    if spec.x_law == "gaussian_iid":
        X = spec.sigma_x * rng.standard_normal((n, p))
    else:
        X = (rng.random((n, p)) < spec.bernoulli_prob).astype(np.float64)
    v = _draw_errors(rng, spec.v_law, n)
    eta = _draw_errors(rng, spec.eta_law, n)

    xg = X @ spec.gamma_star
    sigma_d = _multiplicative(xg) if spec.sigma_d_map == "multiplicative" else np.ones(n)
    D = xg + sigma_d * v
    mean_y = D * spec.alpha_star + X @ spec.beta_star
    sigma_y = _multiplicative(mean_y) if spec.sigma_y_map == "multiplicative" else np.ones(n)
    Y = mean_y + sigma_y * eta
    return Dataset(Y, D, X, demeaned=False, truth=Truth(spec, eta, v, sigma_y, sigma_d))


def _center(a: NDArray[np.float64]) -> NDArray[np.float64]:
    if a.size and a.max() == a.min():
        return np.zeros_like(a)
    return a - a.mean()


def demean(data: Dataset) -> Dataset:
    """Subtract column means from Y, D and every column of X."""
    if data.demeaned:
        warnings.warn("dataset is already demeaned; returning it unchanged", stacklevel=2)
        return data
    X = data.X - data.X.mean(axis=0)
    # constant columns: the mean of n copies of c need not round back to c
    X[:, data.X.max(axis=0) == data.X.min(axis=0)] = 0.0
    return Dataset(
        _center(data.Y),
        _center(data.D),
        X,
        demeaned=True,
        truth=data.truth,
    )


def ensure_demeaned(data: Dataset) -> Dataset:
    return data if data.demeaned else demean(data)
