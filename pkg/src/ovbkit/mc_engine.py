"""Deterministic Monte Carlo studies over DGP x estimator x rule grids.

Repetition ``r`` of a cell draws its dataset from ``RngStream(seed, r, "data")``
and every estimator in the cell sees that same dataset. Cross-validation
folds use the ``"cv_folds"`` substream and subsample draws the
``"subsample"`` substream, so adding an estimator never perturbs the data.
Reps run on a thread pool; results are gathered by rep index and summed
with ``math.fsum``, and BLAS is pinned to one thread, so output does not
depend on the number of workers.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from threadpoolctl import threadpool_limits

from .estimators import (
    DegenerateTreatmentError,
    InfeasibleError,
    confidence_interval,
    debiased_lasso,
    ols_fit,
    oracle_with_se,
    post_double_lasso,
    post_lasso,
)
from .lasso import IllPosedError
from .model_core import Dataset, DgpSpec, RngStream, demean, generate_dataset
from .reg_rules import DegenerateInputError, RuleSpec, resolve_rule

ESTIMATORS = ("pdl", "post_lasso", "debiased", "ols", "oracle")
DEFAULT_REPS = 1000
DEFAULT_SUBSAMPLE_REPS = 2000

# per-rep failures that are recorded rather than raised
_REP_ERRORS = (InfeasibleError, DegenerateTreatmentError, DegenerateInputError, IllPosedError)


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    rule: Optional[RuleSpec] = None
    variance_kind: Optional[str] = None

    def __post_init__(self) -> None:
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; expected one of {', '.join(ESTIMATORS)}")
        if self.name in ("pdl", "post_lasso", "debiased") and self.rule is None:
            raise ValueError(f"estimator {self.name!r} needs a regularization rule")
        if self.variance_kind is None:
            object.__setattr__(self, "variance_kind", "HCK" if self.name == "ols" else "HC0")

    @property
    def uses_selection(self) -> bool:
        return self.name in ("pdl", "post_lasso", "debiased")

    @property
    def rule_label(self) -> str:
        return self.rule.name if self.rule is not None else "none"

    @property
    def multiplier(self) -> float:
        return self.rule.multiplier if self.rule is not None else 1.0


@dataclass(frozen=True)
class DgpGrid:
    spec: DgpSpec
    sigma_x: tuple[float, ...]


@dataclass(frozen=True)
class StudyConfig:
    dgps: tuple[DgpGrid, ...]
    estimators: tuple[EstimatorSpec, ...]
    reps: int = DEFAULT_REPS
    ci_level: float = 0.90
    base_seed: int = 0
    amelioration: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError(f"reps must be at least 1, got {self.reps}")
        if not 0 < self.ci_level < 1:
            raise ValueError(f"ci_level must lie in (0, 1), got {self.ci_level}")


@dataclass(frozen=True)
class RepRecord:
    rep: int
    estimate: float = math.nan
    se: float = math.nan
    ci: tuple[float, float] = (math.nan, math.nan)
    selected: Optional[NDArray[np.intp]] = None
    status: str = "ok"
    collinear_dropped: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class Metrics:
    bias: float
    std: float
    bias_over_std: float
    coverage: float
    mean_ci_length: float
    mean_n_selected: Optional[float]
    mean_n_selected_relevant: Optional[float]
    prob_nothing_selected: Optional[float]
    conditional_ovb: Optional[float]
    rep_count: int
    mc_se_of_bias: float
    bias_over_std_infinite: bool = False


@dataclass
class CellResult:
    dgp: str
    n: int
    p: int
    k: int
    sigma_x: float
    estimator: str
    rule: str
    multiplier: float
    status: str
    metrics: Optional[Metrics] = None
    failed_reps: int = 0
    runtime_s: float = 0.0
    records: list[RepRecord] = field(default_factory=list, repr=False)


@dataclass
class StudyResult:
    config: StudyConfig
    cells: list[CellResult]
    x_axis: str = "sigma_x"


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def compute_metrics(
    records: Sequence[RepRecord], alpha_star: float, relevant_set: Sequence[int] = ()
) -> Metrics:
    """Aggregate successful rep records into summary metrics.

    Selection metrics are None when the records carry no selection sets.
    """
    recs = sorted((r for r in records if r.ok), key=lambda r: r.rep)
    R = len(recs)
    if R == 0:
        raise ValueError("no successful repetitions to aggregate")
    est = [r.estimate for r in recs]
    mean = _mean(est)
    bias = mean - alpha_star
    std = math.sqrt(math.fsum((e - mean) ** 2 for e in est) / (R - 1)) if R > 1 else math.nan
    infinite = False
    if std == 0:
        infinite = bias != 0
        bias_over_std = math.copysign(math.inf, bias) if infinite else math.nan
    else:
        bias_over_std = bias / std
    covered = [1.0 if r.ci[0] <= alpha_star <= r.ci[1] else 0.0 for r in recs]
    lengths = [r.ci[1] - r.ci[0] for r in recs]

    n_sel = n_rel = p_empty = cond = None
    if all(r.selected is not None for r in recs):
        relevant = np.asarray(list(relevant_set), dtype=np.intp)
        sizes = [float(r.selected.size) for r in recs]
        n_sel = _mean(sizes)
        n_rel = _mean([float(np.intersect1d(r.selected, relevant).size) for r in recs])
        empty = [r.selected.size == 0 for r in recs]
        p_empty = sum(empty) / R
        if any(empty):
            cond = math.fsum(e - alpha_star for e, s in zip(est, empty) if s) / sum(empty)

    return Metrics(
        bias=bias,
        std=std,
        bias_over_std=bias_over_std,
        coverage=math.fsum(covered) / R,
        mean_ci_length=_mean(lengths),
        mean_n_selected=n_sel,
        mean_n_selected_relevant=n_rel,
        prob_nothing_selected=p_empty,
        conditional_ovb=cond,
        rep_count=R,
        mc_se_of_bias=std / math.sqrt(R) if R > 1 else math.nan,
        bias_over_std_infinite=infinite,
    )


def known_sigmas(data: Dataset) -> dict[str, float]:
    """Noise levels of the three Lasso regressions implied by the true DGP.

    ``"y"`` is the reduced-form error sd of Y on X, ``"d"`` that of D on X
    and ``"joint"`` that of Y on (D, X).
    """
    if data.truth is None:
        return {}
    t = data.truth
    sy2 = float(np.mean(t.sigma_y**2))
    sd2 = float(np.mean(t.sigma_d**2))
    alpha = t.spec.alpha_star
    return {"y": math.sqrt(sy2 + alpha**2 * sd2), "d": math.sqrt(sd2), "joint": math.sqrt(sy2)}


def run_estimator(
    data: Dataset,
    est: EstimatorSpec,
    stream: RngStream,
    ci_level: float = 0.90,
    amelioration: Sequence[int] = (),
    sigmas: Optional[dict[str, float]] = None,
    rep: int = 0,
) -> RepRecord:
    """Fit one estimator on demeaned ``data`` and package the result.

    ``sigmas`` holds known noise levels (keys ``y``, ``d``, ``joint``) for
    the theoretical rules; CV rules draw folds from ``stream``.
    """
    sigmas = sigmas if sigmas is not None else known_sigmas(data)
    try:
        selected = None
        dropped = 0
        if est.name == "oracle":
            a, se = oracle_with_se(data)
        elif est.name == "ols":
            fit = ols_fit(data, est.variance_kind)
            a, se = fit.alpha, fit.alpha_se
            dropped = data.p + 1 - fit.kept_columns.size
        elif est.name in ("pdl", "post_lasso"):
            c1 = resolve_rule(est.rule, data.X, data.Y, sigmas.get("y"), stream.child("y"))
            if est.name == "pdl":
                c2 = resolve_rule(est.rule, data.X, data.D, sigmas.get("d"), stream.child("d"))
                fit = post_double_lasso(data, c1, c2, amelioration, est.variance_kind)
                selected = np.union1d(fit.I1, fit.I2)
            else:
                fit = post_lasso(data, c1, est.variance_kind)
                selected = fit.I1
            a, se = fit.alpha_tilde, fit.se
            dropped = fit.dropped_collinear.size
        else:
            Z = np.column_stack([data.D, data.X])
            c1 = resolve_rule(est.rule, Z, data.Y, sigmas.get("joint"), stream.child("joint"))
            c2 = resolve_rule(est.rule, data.X, data.D, sigmas.get("d"), stream.child("d"))
            fit = debiased_lasso(data, c1, c2)
            a, se = fit.alpha_tilde, fit.se
            selected = np.union1d(np.flatnonzero(fit.beta_hat), np.flatnonzero(fit.gamma_hat))
    except _REP_ERRORS as exc:
        return RepRecord(rep=rep, status=type(exc).__name__)
    return RepRecord(
        rep=rep,
        estimate=float(a),
        se=float(se),
        ci=confidence_interval(float(a), float(se), ci_level),
        selected=None if selected is None else np.asarray(selected, dtype=np.intp),
        collinear_dropped=int(dropped),
    )


def _run_pool(fn: Callable[[int], object], count: int, threads: int) -> list:
    with threadpool_limits(limits=1):
        if threads <= 1:
            return [fn(i) for i in range(count)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(count)))


def _cell_feasible(est: EstimatorSpec, spec: DgpSpec) -> bool:
    return not (est.name == "ols" and spec.p + 1 > spec.n)


def run_study(
    config: StudyConfig,
    threads: int = 1,
    keep_records: bool = False,
    progress: Optional[Callable[[str], None]] = None,
) -> StudyResult:
    """Run every (DGP, sigma_x) cell of ``config`` for every estimator."""
    cells: list[CellResult] = []
    for grid in config.dgps:
        for sx in grid.sigma_x:
            spec = grid.spec.with_sigma_x(sx)
            active = [e for e in config.estimators if _cell_feasible(e, spec)]

            def one_rep(r: int, spec=spec, active=active):
                data = demean(generate_dataset(spec, RngStream(config.base_seed, r, "data")))
                cv = RngStream(config.base_seed, r, "cv_folds")
                sig = known_sigmas(data)
                out = []
                for e in active:
                    t0 = time.perf_counter()
                    rec = run_estimator(data, e, cv, config.ci_level, config.amelioration, sig, rep=r)
                    out.append((rec, time.perf_counter() - t0))
                return out

            per_rep = _run_pool(one_rep, config.reps, threads)
            base = dict(dgp=spec.name, n=spec.n, p=spec.p, k=spec.k, sigma_x=float(sx))
            j = 0
            for e in config.estimators:
                ident = dict(base, estimator=e.name, rule=e.rule_label, multiplier=e.multiplier)
                if e not in active:
                    cells.append(CellResult(**ident, status="infeasible"))
                    continue
                recs = [per_rep[r][j][0] for r in range(config.reps)]
                runtime = math.fsum(per_rep[r][j][1] for r in range(config.reps))
                j += 1
                failed = sum(not rec.ok for rec in recs)
                if failed == len(recs):
                    cell = CellResult(**ident, status="infeasible", failed_reps=failed)
                else:
                    metrics = compute_metrics(recs, spec.alpha_star, spec.support.tolist())
                    cell = CellResult(**ident, status="ok", metrics=metrics, failed_reps=failed)
                cell.runtime_s = runtime
                if keep_records:
                    cell.records = recs
                cells.append(cell)
                if progress is not None:
                    progress(f"{spec.name} sigma_x={sx:g} {e.name}/{e.rule_label}: {cell.status}")
    return StudyResult(config=config, cells=cells)


@dataclass
class SubsampleRow:
    estimator: str
    rule: str
    multiplier: float
    size: int
    full_estimate: float
    mean_estimate: float
    bias: float
    std: float
    bias_over_std: float
    rep_count: int
    flagged_reps: int
    failed_reps: int
    std_undefined: bool


@dataclass
class SubsampleResult:
    rows: list[SubsampleRow]
    x_axis: str = "n_s"


def subsample_bias_study(
    data: Dataset,
    sizes: Sequence[int],
    reps: int,
    estimators: Sequence[EstimatorSpec],
    base_seed: int = 0,
    sigmas: Optional[dict[str, float]] = None,
    ci_level: float = 0.90,
    threads: int = 1,
) -> SubsampleResult:
    """Bias of each estimator on with-replacement subsamples of ``data``.

    The bias is the mean subsample estimate minus the estimate on the full
    data, with the regularization rule re-evaluated on each sample.
    Reps whose design needed collinearity pruning are counted in
    ``flagged_reps``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if any(s > data.n or s < 2 for s in sizes):
        raise ValueError(f"subsample sizes must lie in [2, {data.n}]")
    raw = data
    if data.demeaned:
        raise ValueError("pass the raw (non-demeaned) dataset; subsamples are demeaned individually")
    full = demean(raw)
    rows: list[SubsampleRow] = []
    for est in estimators:
        full_rec = run_estimator(
            full, est, RngStream(base_seed, 0, "cv_folds/full"), ci_level, sigmas=sigmas
        )
        if not full_rec.ok:
            raise InfeasibleError(f"{est.name} failed on the full sample: {full_rec.status}")
        for size in sizes:

            def one(r: int, size=size, est=est):
                rows_idx = RngStream(base_seed, r, f"subsample/{size}").generator().integers(0, raw.n, size)
                sub = demean(raw.subset(rows_idx))
                cv = RngStream(base_seed, r, f"cv_folds/{size}")
                return run_estimator(sub, est, cv, ci_level, sigmas=sigmas, rep=r)

            recs = _run_pool(one, reps, threads)
            ok = [rec for rec in recs if rec.ok]
            est_vals = [rec.estimate for rec in ok]
            R = len(est_vals)
            mean = _mean(est_vals) if R else math.nan
            std = math.sqrt(math.fsum((e - mean) ** 2 for e in est_vals) / (R - 1)) if R > 1 else math.nan
            bias = mean - full_rec.estimate
            rows.append(
                SubsampleRow(
                    estimator=est.name,
                    rule=est.rule_label,
                    multiplier=est.multiplier,
                    size=int(size),
                    full_estimate=full_rec.estimate,
                    mean_estimate=mean,
                    bias=bias,
                    std=std,
                    bias_over_std=bias / std if R > 1 and std > 0 else math.nan,
                    rep_count=R,
                    flagged_reps=sum(rec.collinear_dropped > 0 for rec in ok),
                    failed_reps=reps - R,
                    std_undefined=R < 2,
                )
            )
    return SubsampleResult(rows)
