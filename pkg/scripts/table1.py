"""Two-segment example where NCIS flips the sign of a positive uplift."""
import argparse
from dataclasses import dataclass, fields

from offab.simbench import table1_checks, table1_report


@dataclass
class Config:
    n: int = 1_000_000
    seed: int = 1
    n_mc: int = 100
    n_bootstrap: int = 1000
    threads: int = 1


def main(cfg: Config) -> None:
    res = table1_report(cfg.n, cfg.seed, cfg.n_mc, cfg.n_bootstrap, cfg.threads)
    for key in ("true_target", "true_logging", "logged_mean", "ncis", "ncis_limit", "point_ncis"):
        print(f"{key:<13}{res[key]:8.4f}")
    for r in res["reports"]:
        print(f"{r.estimator_name:<13}uplift {r.estimate:+.4f}  90% CI [{r.ci_low:+.4f}, {r.ci_high:+.4f}]")
    for name, ok in table1_checks(res).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for f in fields(Config):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    main(Config(**vars(p.parse_args())))
