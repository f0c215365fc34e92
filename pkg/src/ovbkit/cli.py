"""Command-line entry point (``ovbkit``)."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .cli_io import (
    PLOT_KINDS,
    ConfigError,
    RunManifest,
    config_digest,
    format_value,
    load_csv_dataset,
    now_iso,
    parse_config,
    parse_subsample_config,
    study_manifest,
    write_csv,
    write_plot_spec,
)
from .mc_engine import EstimatorSpec, run_estimator, run_study, subsample_bias_study
from .model_core import RngStream, demean
from .ovb_theory import OvbInputs, ovb_lower_bound, under_selection_certificate
from .reg_rules import parse_rule


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="override base_seed")
    p.add_argument("--reps", type=int, default=None, help="override reps")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")


def _overrides(args, config):
    changes = {}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.reps is not None:
        if args.reps < 1:
            raise ConfigError("reps", f"must be at least 1, got {args.reps}")
        changes["reps"] = args.reps
    return dataclasses.replace(config, **changes) if changes else config


def cmd_simulate(args) -> int:
    config = _overrides(args, parse_config(args.config))
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    started, started_at = time.perf_counter(), now_iso()
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = run_study(config, threads=args.threads, progress=progress)
    write_csv(result, out / "results.csv")
    for kind in args.plots or PLOT_KINDS:
        write_plot_spec(result, kind, out / f"{kind}.vl.json")
    study_manifest(config, result, started, started_at, args.threads).write(out / "manifest.json")
    print(f"wrote {len(result.cells)} cells to {out / 'results.csv'}")
    return 0


def cmd_subsample(args) -> int:
    cfg = parse_subsample_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, base_seed=args.seed)
    if args.reps is not None:
        cfg = dataclasses.replace(cfg, reps=args.reps)
    data = load_csv_dataset(args.csv, cfg.outcome, cfg.treatment, cfg.controls)
    sigmas = None if cfg.sigma is None else {"y": cfg.sigma, "d": cfg.sigma, "joint": cfg.sigma}
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    started, started_at = time.perf_counter(), now_iso()
    result = subsample_bias_study(
        data, cfg.sizes, cfg.reps, cfg.estimators, cfg.base_seed, sigmas, cfg.ci_level, args.threads
    )
    write_csv(result, out / "subsample.csv")
    write_plot_spec(result, "bias_over_std", out / "bias_over_std.vl.json")
    doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items() if k != "estimators"}
    doc["estimators"] = [
        {"name": e.name, "variance": e.variance_kind, "rule": None if e.rule is None else dataclasses.asdict(e.rule)}
        for e in cfg.estimators
    ]
    doc["data_file"] = Path(args.csv).name
    RunManifest(
        config_digest=config_digest(doc),
        tool_version=__version__,
        base_seed=cfg.base_seed,
        wall_clock_s=time.perf_counter() - started,
        command="subsample",
        threads=args.threads,
        started_at=started_at,
        config=doc,
    ).write(out / "manifest.json")
    print(f"wrote {len(result.rows)} rows to {out / 'subsample.csv'}")
    return 0


def cmd_fit(args) -> int:
    controls = None if args.controls is None else [c for c in args.controls.split(",") if c]
    data = demean(load_csv_dataset(args.csv, args.outcome, args.treatment, controls))
    rule = None if args.estimator in ("ols", "oracle") else parse_rule(args.rule)
    est = EstimatorSpec(args.estimator, rule, args.variance)
    sigmas = None if args.sigma is None else {"y": args.sigma, "d": args.sigma, "joint": args.sigma}
    seed = 0 if args.seed is None else args.seed
    rec = run_estimator(data, est, RngStream(seed, 0, "cv_folds"), args.ci_level, sigmas=sigmas or {})
    if not rec.ok:
        print(f"estimation failed: {rec.status}", file=sys.stderr)
        return 1
    print("estimate,se,ci_low,ci_high,n_selected")
    n_sel = None if rec.selected is None else rec.selected.size
    print(",".join(format_value(v) for v in (rec.estimate, rec.se, rec.ci[0], rec.ci[1], n_sel)))
    return 0


def cmd_ovb(args) -> int:
    inp = OvbInputs(
        n=args.n, p=args.p, k=args.k, tau=args.tau, phi=args.phi,
        sigma_eta=args.sigma_eta, sigma_v=args.sigma_v, a=args.a, b=args.b,
    )
    b = ovb_lower_bound(inp, args.grid)
    fields = ("value", "r_star", "T1_at_r", "T2_at_r", "sigma_alpha_tilde", "ratio", "event_prob_lower", "vacuous")
    print(",".join(fields))
    print(",".join(format_value(getattr(b, f)) for f in fields))
    print()
    if b.vacuous:
        print("bound vacuous at these dimensions (T2 < 0 for every r)")
    else:
        print(f"OVB lower bound {b.value:.4g} at r = {b.r_star:.4g}")
        print(f"asymptotic sd {b.sigma_alpha_tilde:.4g}; OVB / sd = {b.ratio:.4g}")
        print(f"holds on an event of probability at least {b.event_prob_lower:.4g}")
    return 0


def cmd_certify(args) -> int:
    theta = np.array([float(t) for t in args.theta.split(",") if t.strip()])
    c = under_selection_certificate(theta, args.s_over_n, args.sigma, args.phi, args.tau, args.n, args.p)
    print("lambda,threshold,all_below,prob_lower_bound,joint_prob_lower_bound")
    thr = float(c.thresholds[0]) if c.thresholds.size else None
    print(",".join(format_value(v) for v in (c.lam, thr, c.all_below, c.prob_lower_bound, c.joint_prob_lower_bound)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovbkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a Monte Carlo study from a YAML config")
    p.add_argument("config", type=Path)
    _add_common(p)
    p.add_argument("--plots", nargs="*", choices=PLOT_KINDS, help="plot specs to write (default: all)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("subsample", help="subsample-bias study on a CSV dataset")
    p.add_argument("config", type=Path)
    p.add_argument("csv", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("fit", help="estimate the treatment effect on a CSV dataset")
    p.add_argument("csv", type=Path)
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--controls", default=None, help="comma-separated (default: all other columns)")
    p.add_argument("--estimator", default="pdl", choices=("pdl", "post_lasso", "debiased", "ols"))
    p.add_argument("--rule", default="bcch")
    p.add_argument("--variance", default=None, choices=("HC0", "HC3", "HCK"))
    p.add_argument("--sigma", type=float, default=None, help="known noise sd for bickel/lemma1 rules")
    p.add_argument("--ci-level", type=float, default=0.90)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ovb", help="OVB lower bound for post double Lasso")
    for name, kind, default in [
        ("n", int, 10000), ("p", int, 4000), ("k", int, 5), ("tau", float, 0.5),
        ("phi", float, 1.0), ("sigma-eta", float, 1.0), ("sigma-v", float, 1.0),
        ("a", float, 1.0), ("b", float, 1.0), ("grid", int, 1024),
    ]:
        p.add_argument(f"--{name}", type=kind, default=default)
    p.set_defaults(func=cmd_ovb)

    p = sub.add_parser("certify", help="under-selection certificate for given coefficients")
    p.add_argument("--theta", required=True, help="comma-separated true coefficients")
    for name, kind, default in [
        ("s-over-n", float, 1.0), ("sigma", float, 1.0), ("phi", float, 1.0),
        ("tau", float, 0.5), ("n", int, 10000), ("p", int, 4000),
    ]:
        p.add_argument(f"--{name}", type=kind, default=default)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
