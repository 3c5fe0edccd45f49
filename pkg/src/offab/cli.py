"""Command-line entry point: ``offab <command> --seed N ...``.

Exit codes: 0 success, 1 degenerate estimation, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capping import CappingRule
from .errors import (DegenerateOverlapError, DegeneratePolicyError, LogFormatError, UndefinedEstimateError,
                     UndefinedScoreError, ValidationError)
from .estimators import (DEFAULT_BOOTSTRAP, DEFAULT_N_MC, PieceNCIS, build_value_partition, capping_sweep,
                         evaluate, fit_value_model, make_estimator, weight_quantiles, write_reports)
from .logs import read_log, write_log
from .policy import load_policy, save_policy
from .simbench import (SuiteSpec, load_scenario, make_suite, run_benchmark, simulate_log, table1_checks,
                       table1_report)
from .streams import RandomStream

EXIT_OK, EXIT_DEGENERATE, EXIT_USAGE = 0, 1, 2

SWEEP_HEADER = ["c", "estimate", "variance", "ci_half_width", "bias_bound", "capped_fraction"]
QUANTILE_HEADER = ["quantile", "weight"]
SUMMARY_HEADER = ["estimator", "correlation", "correlation_q10", "correlation_q90", "precision", "precision_q10",
                  "precision_q90", "fnr", "fnr_q10", "fnr_q90", "ci_size_ratio"]
CAPPED = {"cis", "ncis", "piece-ncis", "point-ncis"}
KNOWN = {"is", "nis"} | CAPPED


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    log: Path | None = None
    target_policy: Path | None = None
    logging_policy: Path | None = None
    env: Path | None = None
    suite: Path | None = None
    out: Path | None = None
    estimators: tuple = ()
    cap_mode: str = "max"
    cap: float | None = None
    n_mc: int = DEFAULT_N_MC
    bootstrap: int = DEFAULT_BOOTSTRAP
    threads: int = 1
    n: int = 10_000
    uplift: bool = False
    c_grid: tuple = ()
    quantiles: tuple = (0.1, 0.5, 0.9)
    draws: int = 1
    policies_dir: Path | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Check paths and parameters before any work starts."""
        for name in ("log", "target_policy", "logging_policy", "env", "suite"):
            path = getattr(self, name)
            if path is not None and not path.is_file():
                raise UsageError(f"--{name.replace('_', '-')}: no such file {path}")
        if self.policies_dir is not None and not self.policies_dir.is_dir():
            raise UsageError(f"--policies-dir: no such directory {self.policies_dir}")
        if self.out is not None and not self.out.parent.exists():
            raise UsageError(f"--out: directory {self.out.parent} does not exist")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")
        if self.bootstrap < 0 or self.n_mc < 1 or self.n < 1 or self.draws < 1:
            raise UsageError("--bootstrap must be >= 0; --n-mc, --n and --draws must be >= 1")
        if self.cap_mode not in ("max", "zero"):
            raise UsageError("--cap-mode must be 'max' or 'zero'")
        if self.cap is not None and not self.cap > 0:
            raise UsageError("--cap must be positive")


def _csv_list(text, kind=str):
    try:
        return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None


def _floats(text):
    return _csv_list(text, float)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offab", description="Offline A/B testing of ranking policies.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", type=Path)

    def capping(sp, need_cap=False):
        sp.add_argument("--cap-mode", default="max")
        sp.add_argument("--cap", type=float, required=need_cap)

    sp = sub.add_parser("gen-log", help="simulate a logged dataset")
    common(sp)
    sp.add_argument("--env", type=Path, required=True, help="environment spec (JSON)")
    sp.add_argument("--logging-policy", type=Path)
    sp.add_argument("--n", type=int, default=10_000)
    sp.add_argument("--policies-dir", type=Path, help="also write the scenario's logging.json and target.json here")

    sp = sub.add_parser("estimate", help="run estimators over a log")
    common(sp)
    capping(sp)
    sp.add_argument("--log", type=Path, required=True)
    sp.add_argument("--target-policy", type=Path, required=True)
    sp.add_argument("--logging-policy", type=Path)
    sp.add_argument("--estimators", type=_csv_list, default=("is", "nis"))
    sp.add_argument("--n-mc", type=int, default=DEFAULT_N_MC)
    sp.add_argument("--bootstrap", type=int, default=DEFAULT_BOOTSTRAP)
    sp.add_argument("--uplift", action="store_true")

    sp = sub.add_parser("sweep", help="CIS variance and bias bound over a capping grid")
    common(sp)
    sp.add_argument("--cap-mode", default="max")
    sp.add_argument("--log", type=Path, required=True)
    sp.add_argument("--target-policy", type=Path, required=True)
    sp.add_argument("--logging-policy", type=Path)
    sp.add_argument("--c-grid", type=_floats, required=True)

    sp = sub.add_parser("quantiles", help="quantiles of W under the target policy")
    common(sp)
    sp.add_argument("--log", type=Path, required=True, help="contexts are taken from this log")
    sp.add_argument("--target-policy", type=Path, required=True)
    sp.add_argument("--logging-policy", type=Path, required=True)
    sp.add_argument("--quantiles", type=_floats, default=(0.1, 0.5, 0.9))
    sp.add_argument("--draws", type=int, default=1)

    sp = sub.add_parser("bench", help="synthetic online/offline benchmark")
    common(sp)
    sp.add_argument("--suite", type=Path)
    sp.add_argument("--estimators", type=_csv_list, default=("cis", "ncis", "piece-ncis", "point-ncis"))
    sp.add_argument("--bootstrap", type=int, default=DEFAULT_BOOTSTRAP)

    sp = sub.add_parser("table1", help="two-segment NCIS vs PointNCIS example")
    common(sp)
    sp.add_argument("--n", type=int, default=1_000_000)
    sp.add_argument("--n-mc", type=int, default=DEFAULT_N_MC)
    sp.add_argument("--bootstrap", type=int, default=DEFAULT_BOOTSTRAP)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    keys = {f for f in RunConfig.__dataclass_fields__}
    kw = {k: v for k, v in vars(ns).items() if k in keys and v is not None}
    return RunConfig(**kw)


# --------------------------------------------------------------------------
# commands


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(rows, header, path, stream=sys.stdout) -> None:
    fh = open(path, "w", newline="") if path is not None else stream
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])
    finally:
        if path is not None:
            fh.close()


def cmd_gen_log(cfg: RunConfig) -> int:
    if cfg.env is None:
        raise UsageError("gen-log needs --env")
    try:
        spec = json.loads(cfg.env.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--env: not valid JSON ({exc})") from None
    if cfg.out is None:
        raise UsageError("gen-log needs --out")
    env, pi_p, pi_t = load_scenario(spec)
    if cfg.logging_policy is not None:
        pi_p = load_policy(cfg.logging_policy)
    if cfg.policies_dir is not None:
        save_policy(pi_p, cfg.policies_dir / "logging.json")
        save_policy(pi_t, cfg.policies_dir / "target.json")
    log = simulate_log(env, pi_p, cfg.n, RandomStream(cfg.seed))
    write_log(log, cfg.out)
    print(f"n={len(log)} r_max={_fmt(log.r_max)} K={log.k}")
    return EXIT_OK


def _capping(cfg: RunConfig, names) -> CappingRule | None:
    if not set(names) & CAPPED:
        return None
    if cfg.cap is None:
        raise UsageError(f"estimators {sorted(set(names) & CAPPED)} need --cap")
    return CappingRule(cfg.cap_mode, cfg.cap)


def cmd_estimate(cfg: RunConfig) -> int:
    names = list(cfg.estimators)
    unknown = [n for n in names if n not in KNOWN]
    if unknown or not names:
        raise UsageError(f"unknown estimators {unknown}; choose from {sorted(KNOWN)}")
    capping = _capping(cfg, names)
    data = read_log(cfg.log)
    target = load_policy(cfg.target_policy)
    logging = load_policy(cfg.logging_policy) if cfg.logging_policy is not None else None
    if "point-ncis" in names and logging is None:
        raise UsageError("point-ncis samples from the logging policy; pass --logging-policy")
    root = RandomStream(cfg.seed)
    boot_seed = root.derive(0).key
    ests = [make_estimator(n, capping=capping, n_mc=cfg.n_mc, stream=root.derive(1), logging=logging)
            for n in names if n != "piece-ncis"]
    kw = dict(logging=logging, n_bootstrap=cfg.bootstrap, seed=boot_seed, uplift=cfg.uplift, threads=cfg.threads)
    reports = {r.estimator_name: r for r in evaluate(data, target, ests, **kw)}
    if "piece-ncis" in names:
        # value model fitted on one half, estimator run on the other
        model, held_out = fit_value_model(data, seed=root.derive(2).key)
        part = build_value_partition(model, held_out.contexts)
        (reports["piece-ncis"],) = evaluate(held_out, target, [PieceNCIS(capping, part)], **kw)
    ordered = [reports[n] for n in names]
    for r in ordered:
        print(f"[{r.estimator_name}]")
        for k, v in r.to_dict().items():
            if k != "estimator_name":
                print(f"  {k} = {_fmt(v)}")
    if cfg.out is not None:
        write_reports(ordered, cfg.out)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.c_grid or any(not c > 0 for c in cfg.c_grid):
        raise UsageError("--c-grid needs positive values")
    data = read_log(cfg.log)
    target = load_policy(cfg.target_policy)
    logging = load_policy(cfg.logging_policy) if cfg.logging_policy is not None else None
    rows = capping_sweep(data, target, cfg.c_grid, cfg.cap_mode, logging)
    _write_csv(rows, SWEEP_HEADER, cfg.out)
    return EXIT_OK


def cmd_quantiles(cfg: RunConfig) -> int:
    data = read_log(cfg.log)
    rows = weight_quantiles(load_policy(cfg.logging_policy), load_policy(cfg.target_policy), data.contexts,
                            cfg.quantiles, RandomStream(cfg.seed), cfg.draws)
    _write_csv(rows, QUANTILE_HEADER, cfg.out)
    return EXIT_OK


def records_table(records, estimators) -> tuple[list[dict], list[str]]:
    """Per-test rows: online CI (box height) and offline CIs (box widths)."""
    header = ["test_id", "label", "online_uplift", "online_ci_low", "online_ci_high", "online_decision"]
    for e in estimators:
        header += [f"{e}_estimate", f"{e}_ci_low", f"{e}_ci_high", f"{e}_decision"]
    rows = []
    for r in records:
        row = {"test_id": r.test_id, "label": r.label, "online_uplift": r.online.uplift,
               "online_ci_low": r.online.ci_low, "online_ci_high": r.online.ci_high,
               "online_decision": r.online_decision}
        for e in estimators:
            rep = r.offline_uplifts[e]
            row.update({f"{e}_estimate": rep.estimate, f"{e}_ci_low": rep.ci_low,
                        f"{e}_ci_high": rep.ci_high, f"{e}_decision": r.decisions[e]})
        rows.append(row)
    return rows, header


def _pm(value, band) -> str:
    if band is None or any(math.isnan(b) for b in band) or math.isnan(value):
        return f"{value:8.3f}" + " " * 16
    return f"{value:8.3f} [{band[0]:6.3f},{band[1]:6.3f}]"


def cmd_bench(cfg: RunConfig) -> int:
    names = list(cfg.estimators)
    bad = [n for n in names if n not in CAPPED]
    if bad or not names:
        raise UsageError(f"bench supports {sorted(CAPPED)}; got {bad or names}")
    spec = SuiteSpec.load(cfg.suite) if cfg.suite is not None else SuiteSpec()
    suite = make_suite(spec)
    records, summaries = run_benchmark(suite, names, spec.config(cfg.bootstrap, cfg.threads), RandomStream(cfg.seed))
    print(f"{len(suite)} tests, bands are 10%/90% quantiles over {cfg.bootstrap} resamples of tests")
    print(f"{'estimator':<12}{'correlation':>32}{'precision':>32}{'fnr':>32}{'ci size':>10}")
    for name in names:
        s = summaries[name]
        print(f"{name:<12}{_pm(s.correlation, s.bands.get('correlation')):>32}"
              f"{_pm(s.precision, s.bands.get('precision')):>32}{_pm(s.fnr, s.bands.get('fnr')):>32}"
              f"{s.ci_size_ratio:10.3f}")
    if cfg.out is not None:
        rows, header = records_table(records, names)
        _write_csv(rows, header, cfg.out)
        summary_rows = []
        for name in names:
            row = summaries[name].row()
            summary_rows.append({h: row.get(h, math.nan) for h in SUMMARY_HEADER})
        _write_csv(summary_rows, SUMMARY_HEADER, cfg.out.with_name(cfg.out.stem + "_summary.csv"))
    return EXIT_OK


def cmd_table1(cfg: RunConfig) -> int:
    result = table1_report(cfg.n, cfg.seed, cfg.n_mc, cfg.bootstrap, cfg.threads)
    for key in ("true_target", "true_logging", "logged_mean", "ncis", "ncis_limit", "point_ncis"):
        print(f"{key:<14} {result[key]:.4f}")
    print(f"{'ncis_decision':<14} {result['ncis_decision']}")
    print(f"{'point_decision':<14} {result['point_ncis_decision']}")
    for name, ok in table1_checks(result).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if cfg.out is not None:
        write_reports(result["reports"], cfg.out)
    return EXIT_OK


COMMANDS = {"gen-log": cmd_gen_log, "estimate": cmd_estimate, "sweep": cmd_sweep,
            "quantiles": cmd_quantiles, "bench": cmd_bench, "table1": cmd_table1}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = config_from_args(ns)
        cfg.validate()
        return COMMANDS[cfg.command](cfg)
    except (UsageError, ValidationError, LogFormatError, UndefinedScoreError) as exc:
        print(f"offab {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateOverlapError, UndefinedEstimateError, DegeneratePolicyError) as exc:
        print(f"offab {ns.command}: degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
