"""Study configuration, dataset ingestion and result writers.

Config files are YAML documents. A study config looks like::

    schema_version: 1
    base_seed: 20240101
    reps: 1000
    ci_level: 0.9
    dgps:
      - name: main(500)
        sigma_x: [0.05, 0.1, 0.15]
    estimators:
      - name: pdl
        rules: [bcch, bcch×0.5, bcch×1.5]
        variance: HC0
      - name: oracle
    rule_options: {tau: 0.5}
    amelioration: []

The flat shorthand ``{dgp: main(500), sigma_x: [...], estimator: pdl,
rule: bcch}`` is also accepted. Unknown keys are rejected with their key
path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import yaml

from . import __version__
from .mc_engine import (
    DEFAULT_REPS,
    DEFAULT_SUBSAMPLE_REPS,
    ESTIMATORS,
    DgpGrid,
    EstimatorSpec,
    StudyConfig,
    StudyResult,
    SubsampleResult,
)
from .model_core import Dataset, DomainError, RegistryError, dgp_registry_lookup, parse_dgp_name
from .reg_rules import RuleSpec, parse_rule

SCHEMA_VERSION = 1
PLOT_KINDS = ("selection_vs_sigma", "bias_over_std", "coverage", "ci_length", "prob_nothing_selected")
NA = "NA"

STUDY_COLUMNS = (
    "dgp", "n", "p", "k", "sigma_x", "estimator", "rule", "multiplier", "status",
    "rep_count", "failed_reps", "bias", "std", "bias_over_std", "coverage",
    "mean_ci_length", "mean_n_selected", "mean_n_selected_relevant",
    "prob_nothing_selected", "conditional_ovb", "mc_se_of_bias",
)
SUBSAMPLE_COLUMNS = (
    "estimator", "rule", "multiplier", "size", "full_estimate", "mean_estimate",
    "bias", "std", "bias_over_std", "rep_count", "flagged_reps", "failed_reps", "status",
)
_METRIC_FIELDS = STUDY_COLUMNS[11:]

_TOP_KEYS = {
    "schema_version", "base_seed", "reps", "ci_level", "dgps", "estimators",
    "rule_options", "amelioration", "dgp", "sigma_x", "estimator", "rule", "rules",
}
_DGP_KEYS = {"name", "n", "sigma_x"}
_EST_KEYS = {"name", "rule", "rules", "variance"}
_RULE_OPTION_KEYS = {"tau", "phi", "c", "n_iter", "folds", "grid_size"}
_SUBSAMPLE_KEYS = {
    "schema_version", "base_seed", "reps", "ci_level", "sizes", "outcome",
    "treatment", "controls", "estimators", "rule_options", "sigma",
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.key_path = path


# ---------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------


def _check_keys(obj: Any, allowed: set, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(path, f"expected a mapping, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    return obj


def _as_list(value: Any) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _number(value: Any, path: str, kind=float) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return kind(value)


def _parse_rules(raw: Any, options: dict, path: str) -> list[RuleSpec]:
    out = []
    for i, text in enumerate(_as_list(raw)):
        try:
            out.append(parse_rule(str(text), **options))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}[{i}]", str(exc)) from None
    return out


def _parse_estimators(doc: dict, options: dict) -> tuple[EstimatorSpec, ...]:
    if "estimators" in doc:
        if "estimator" in doc:
            raise ConfigError("estimator", "give either 'estimator' or 'estimators', not both")
        entries = []
        for i, e in enumerate(_as_list(doc["estimators"])):
            path = f"estimators[{i}]"
            if isinstance(e, str):
                e = {"name": e}
            entries.append((path, _check_keys(e, _EST_KEYS, path)))
    elif "estimator" in doc:
        entry = {"name": doc["estimator"]}
        for key in ("rule", "rules"):
            if key in doc:
                entry[key] = doc[key]
        entries = [("estimator", entry)]
    else:
        raise ConfigError("estimators", "missing")
    specs = []
    for path, e in entries:
        name = e.get("name")
        if name not in ESTIMATORS:
            raise ConfigError(f"{path}.name", f"unknown estimator {name!r}; expected one of {', '.join(ESTIMATORS)}")
        variance = e.get("variance")
        rules_raw = e.get("rules", e.get("rule"))
        if name in ("pdl", "post_lasso", "debiased"):
            if rules_raw is None:
                raise ConfigError(f"{path}.rule", f"estimator {name!r} needs a rule")
            for rule in _parse_rules(rules_raw, options, f"{path}.rules"):
                specs.append(EstimatorSpec(name, rule, variance))
        else:
            if rules_raw is not None:
                raise ConfigError(f"{path}.rule", f"estimator {name!r} takes no rule")
            try:
                specs.append(EstimatorSpec(name, None, variance))
            except ValueError as exc:
                raise ConfigError(path, str(exc)) from None
    return tuple(specs)


def _parse_rule_options(doc: dict) -> dict:
    opts = _check_keys(doc.get("rule_options", {}) or {}, _RULE_OPTION_KEYS, "rule_options")
    out = {}
    for key, value in opts.items():
        kind = int if key in ("n_iter", "folds", "grid_size") else float
        out[key] = _number(value, f"rule_options.{key}", kind)
    return out


def _parse_dgps(doc: dict) -> tuple[DgpGrid, ...]:
    if "dgps" in doc:
        if "dgp" in doc:
            raise ConfigError("dgp", "give either 'dgp' or 'dgps', not both")
        entries = [(f"dgps[{i}]", _check_keys(d, _DGP_KEYS, f"dgps[{i}]")) for i, d in enumerate(_as_list(doc["dgps"]))]
    elif "dgp" in doc:
        entries = [("dgp", {"name": doc["dgp"], "sigma_x": doc.get("sigma_x")})]
    else:
        raise ConfigError("dgps", "missing")
    grids = []
    for path, d in entries:
        try:
            name, kwargs = parse_dgp_name(str(d.get("name")))
        except (RegistryError, ValueError) as exc:
            raise ConfigError(f"{path}.name", str(exc)) from None
        if "n" in d:
            kwargs["n"] = _number(d["n"], f"{path}.n", int)
        sx_raw = d.get("sigma_x")
        if sx_raw is None:
            if "sigma_x" not in kwargs:
                raise ConfigError(f"{path}.sigma_x", "missing")
            sx_raw = [kwargs["sigma_x"]]
        sigma_x = tuple(_number(s, f"{path}.sigma_x[{i}]") for i, s in enumerate(_as_list(sx_raw)))
        if not sigma_x:
            raise ConfigError(f"{path}.sigma_x", "empty list")
        kwargs.pop("sigma_x", None)
        try:
            base = dgp_registry_lookup(name, sigma_x[0], **kwargs)
            for s in sigma_x:
                base.with_sigma_x(s)
        except DomainError as exc:
            raise ConfigError(f"{path}.sigma_x", str(exc)) from None
        except (RegistryError, TypeError) as exc:
            raise ConfigError(f"{path}.name", str(exc)) from None
        grids.append(DgpGrid(base, sigma_x))
    return tuple(grids)


def _check_schema(doc: dict) -> None:
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")


def _common(doc: dict, default_reps: int) -> dict:
    reps = _number(doc.get("reps", default_reps), "reps", int)
    if reps < 1:
        raise ConfigError("reps", f"must be at least 1, got {reps}")
    ci = _number(doc.get("ci_level", 0.90), "ci_level")
    if not 0 < ci < 1:
        raise ConfigError("ci_level", f"must lie in (0, 1), got {ci}")
    seed = _number(doc.get("base_seed", 0), "base_seed", int)
    return {"reps": reps, "ci_level": ci, "base_seed": seed}


def _load_yaml(path: Union[str, Path]) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a mapping at the top level")
    return doc


def config_from_dict(doc: dict) -> StudyConfig:
    _check_keys(doc, _TOP_KEYS, "")
    _check_schema(doc)
    options = _parse_rule_options(doc)
    common = _common(doc, DEFAULT_REPS)
    amel = tuple(_number(a, f"amelioration[{i}]", int) for i, a in enumerate(_as_list(doc.get("amelioration", []))))
    return StudyConfig(
        dgps=_parse_dgps(doc),
        estimators=_parse_estimators(doc, options),
        amelioration=amel,
        **common,
    )


def parse_config(path: Union[str, Path]) -> StudyConfig:
    """Read and validate a study config file."""
    return config_from_dict(_load_yaml(path))


def _rule_dict(rule: Optional[RuleSpec]) -> Optional[dict]:
    if rule is None:
        return None
    return {
        "name": rule.name, "multiplier": rule.multiplier, "tau": rule.tau, "phi": rule.phi,
        "c": rule.c, "n_iter": rule.n_iter, "folds": rule.folds, "grid_size": rule.grid_size,
    }


def config_to_dict(config: StudyConfig) -> dict:
    """Fully expanded config with every default filled in."""
    return {
        "schema_version": SCHEMA_VERSION,
        "base_seed": config.base_seed,
        "reps": config.reps,
        "ci_level": config.ci_level,
        "amelioration": list(config.amelioration),
        "dgps": [
            {**g.spec.describe(), "sigma_x": list(g.sigma_x), "x_law": g.spec.x_law,
             "eta_law": g.spec.eta_law, "v_law": g.spec.v_law,
             "sigma_y_map": g.spec.sigma_y_map, "sigma_d_map": g.spec.sigma_d_map}
            for g in config.dgps
        ],
        "estimators": [
            {"name": e.name, "variance": e.variance_kind, "rule": _rule_dict(e.rule)}
            for e in config.estimators
        ],
    }


def config_digest(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


@dataclass(frozen=True)
class SubsampleConfig:
    sizes: tuple[int, ...]
    reps: int
    ci_level: float
    base_seed: int
    outcome: str
    treatment: str
    controls: Optional[tuple[str, ...]]
    estimators: tuple[EstimatorSpec, ...]
    sigma: Optional[float] = None


def parse_subsample_config(path: Union[str, Path]) -> SubsampleConfig:
    doc = _load_yaml(path)
    _check_keys(doc, _SUBSAMPLE_KEYS, "")
    _check_schema(doc)
    options = _parse_rule_options(doc)
    common = _common(doc, DEFAULT_SUBSAMPLE_REPS)
    sizes = tuple(_number(s, f"sizes[{i}]", int) for i, s in enumerate(_as_list(doc.get("sizes", []))))
    if not sizes:
        raise ConfigError("sizes", "missing")
    for key in ("outcome", "treatment"):
        if not isinstance(doc.get(key), str):
            raise ConfigError(key, "missing column name")
    controls = doc.get("controls")
    sigma = doc.get("sigma")
    return SubsampleConfig(
        sizes=sizes,
        outcome=doc["outcome"],
        treatment=doc["treatment"],
        controls=None if controls is None else tuple(str(c) for c in _as_list(controls)),
        estimators=_parse_estimators(doc, options),
        sigma=None if sigma is None else _number(sigma, "sigma"),
        **common,
    )


# ---------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------


def load_csv_dataset(
    path: Union[str, Path],
    outcome_col: str,
    treatment_col: str,
    control_cols: Optional[Sequence[str]] = None,
) -> Dataset:
    """Read a numeric CSV with a header row into a raw Dataset.

    ``control_cols=None`` uses every column other than outcome and
    treatment. Collinear columns are kept; estimators prune them.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicated column names in header")
    pos = {h: i for i, h in enumerate(header)}
    if control_cols is None:
        control_cols = [h for h in header if h not in (outcome_col, treatment_col)]
    for role, name in [("outcome", outcome_col), ("treatment", treatment_col)] + [("control", c) for c in control_cols]:
        if name not in pos:
            raise KeyError(f"{role} column {name!r} not found in {path}")
    values = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                x = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric value {cell!r} at row {r}, column {header[c]!r}") from None
            if not math.isfinite(x):
                raise ValueError(f"{path}: non-finite value {cell!r} at row {r}, column {header[c]!r}")
            values[r - 2, c] = x
    if values.shape[0] == 0:
        raise ValueError(f"{path}: no data rows")
    X = values[:, [pos[c] for c in control_cols]] if control_cols else np.empty((values.shape[0], 0))
    return Dataset(values[:, pos[outcome_col]], values[:, pos[treatment_col]], X, demeaned=False)


# ---------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------


def format_value(x: Any) -> str:
    """Fixed textual form: 10 significant digits, ``NA`` for absent values."""
    if x is None:
        return NA
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def _study_rows(result: StudyResult) -> list[list[Any]]:
    rows = []
    for c in result.cells:
        row = [c.dgp, c.n, c.p, c.k, c.sigma_x, c.estimator, c.rule, c.multiplier, c.status]
        if c.metrics is None:
            row += [0, c.failed_reps] + [None] * len(_METRIC_FIELDS)
        else:
            m = c.metrics
            row += [m.rep_count, c.failed_reps] + [getattr(m, f) for f in _METRIC_FIELDS]
        rows.append(row)
    return rows


def _subsample_rows(result: SubsampleResult) -> list[list[Any]]:
    rows = []
    for r in result.rows:
        status = "std_undefined" if r.std_undefined else "ok"
        rows.append([
            r.estimator, r.rule, r.multiplier, r.size, r.full_estimate, r.mean_estimate,
            r.bias, None if r.std_undefined else r.std,
            None if r.std_undefined else r.bias_over_std,
            r.rep_count, r.flagged_reps, r.failed_reps, status,
        ])
    return rows


def write_csv(result: Union[StudyResult, SubsampleResult], path: Union[str, Path]) -> None:
    """Write one row per cell (or per subsample configuration) with a fixed column order."""
    if isinstance(result, SubsampleResult):
        header, rows = SUBSAMPLE_COLUMNS, _subsample_rows(result)
    else:
        header, rows = STUDY_COLUMNS, _study_rows(result)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path: Union[str, Path]) -> list[dict[str, Any]]:
    """Parse a results CSV back; numeric fields become floats, ``NA`` becomes None."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, text in row.items():
                if text == NA:
                    parsed[key] = None
                    continue
                try:
                    parsed[key] = float(text)
                except ValueError:
                    parsed[key] = text
            out.append(parsed)
    return out


_KIND_FIELD = {
    "selection_vs_sigma": ("mean_n_selected", "Average number of selected controls"),
    "bias_over_std": ("bias_over_std", "Bias / standard deviation"),
    "coverage": ("coverage", "Coverage"),
    "ci_length": ("mean_ci_length", "Average CI length"),
    "prob_nothing_selected": ("prob_nothing_selected", "P(nothing selected)"),
}


def _series(estimator: str, rule: str, multiplier: float) -> str:
    label = estimator if rule == "none" else f"{estimator}/{rule}"
    return label if multiplier == 1.0 else f"{label}×{multiplier:g}"


def plot_spec(result: Union[StudyResult, SubsampleResult], kind: str, ci_level: Optional[float] = None) -> dict:
    """Vega-Lite document with the data inlined."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
    field_name, title = _KIND_FIELD[kind]
    values = []
    if isinstance(result, SubsampleResult):
        if kind != "bias_over_std":
            raise ValueError("subsample results support only the bias_over_std plot")
        x_field, x_title = "n_s", "Subsample size"
        for r in result.rows:
            if not r.std_undefined and math.isfinite(r.bias_over_std):
                values.append({"n_s": r.size, "series": _series(r.estimator, r.rule, r.multiplier),
                               "dgp": "data", "value": r.bias_over_std})
    else:
        x_field, x_title = "sigma_x", "σx"
        if ci_level is None:
            ci_level = result.config.ci_level
        for c in result.cells:
            y = getattr(c.metrics, field_name) if c.metrics is not None else None
            if y is None or not math.isfinite(y):
                continue
            values.append({"sigma_x": c.sigma_x, "series": _series(c.estimator, c.rule, c.multiplier),
                           "dgp": f"{c.dgp}(n={c.n})", "value": y})
    line = {
        "mark": {"type": "line", "point": True},
        "encoding": {
            "x": {"field": x_field, "type": "quantitative", "title": x_title},
            "y": {"field": "value", "type": "quantitative", "title": title},
            "color": {"field": "series", "type": "nominal", "title": "Estimator"},
            "strokeDash": {"field": "dgp", "type": "nominal", "title": "DGP"},
        },
    }
    layers = [line]
    if kind == "coverage":
        level = 0.90 if ci_level is None else ci_level
        layers.append({
            "data": {"values": [{"nominal": level}]},
            "mark": {"type": "rule", "strokeDash": [4, 4], "color": "black"},
            "encoding": {"y": {"field": "nominal", "type": "quantitative"}},
        })
    return {
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "title": title,
        "data": {"values": values},
        "layer": layers,
    }


def write_plot_spec(
    result: Union[StudyResult, SubsampleResult], kind: str, path: Union[str, Path]
) -> None:
    spec = plot_spec(result, kind)
    Path(path).write_text(json.dumps(spec, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class RunManifest:
    config_digest: str
    tool_version: str
    base_seed: int
    wall_clock_s: float
    cell_runtimes: list[dict] = field(default_factory=list)
    command: str = ""
    threads: int = 1
    started_at: str = ""
    config: dict = field(default_factory=dict)
    platform: str = field(default_factory=platform.platform)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def study_manifest(
    config: StudyConfig, result: StudyResult, started: float, started_at: str, threads: int
) -> RunManifest:
    doc = config_to_dict(config)
    return RunManifest(
        config_digest=config_digest(doc),
        tool_version=__version__,
        base_seed=config.base_seed,
        wall_clock_s=time.perf_counter() - started,
        cell_runtimes=[
            {"dgp": c.dgp, "n": c.n, "sigma_x": c.sigma_x, "estimator": c.estimator,
             "rule": c.rule, "multiplier": c.multiplier, "runtime_s": c.runtime_s}
            for c in result.cells
        ],
        command="simulate",
        threads=threads,
        started_at=started_at,
        config=doc,
    )
