"""Thirty simulated A/B tests: offline estimators against online ground truth."""
import argparse
from dataclasses import dataclass, fields

from offab.simbench import SuiteSpec, make_suite, run_benchmark
from offab.streams import RandomStream


@dataclass
class Config:
    suite: str = ""
    seed: int = 1
    n_bootstrap: int = 1000
    threads: int = 1


def main(cfg: Config) -> None:
    spec = SuiteSpec.load(cfg.suite) if cfg.suite else SuiteSpec()
    names = ["cis", "ncis", "piece-ncis", "point-ncis"]
    records, summaries = run_benchmark(make_suite(spec), names, spec.config(cfg.n_bootstrap, cfg.threads),
                                       RandomStream(cfg.seed))
    print(f"{'estimator':<12}{'corr':>7}{'q10':>7}{'q90':>7}{'prec':>7}{'fnr':>7}{'q10':>7}{'q90':>7}{'ci':>7}")
    for name in names:
        s = summaries[name]
        c, f = s.bands["correlation"], s.bands["fnr"]
        print(f"{name:<12}{s.correlation:7.3f}{c[0]:7.3f}{c[1]:7.3f}{s.precision:7.3f}{s.fnr:7.3f}"
              f"{f[0]:7.3f}{f[1]:7.3f}{s.ci_size_ratio:7.2f}")
    print("\nonline vs offline decisions (rows online, columns point-ncis)")
    for a in ("positive", "neutral", "negative"):
        print(f"{a:<10}" + "".join(f"{summaries['point-ncis'].counts[f'{a}/{b}']:>10}"
                                   for b in ("positive", "neutral", "negative")))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for f in fields(Config):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    main(Config(**vars(p.parse_args())))
