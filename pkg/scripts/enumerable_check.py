"""Replicated estimates on the small enumerable instance against exact oracles.

Also shows how the PointNCIS spread changes with the Monte-Carlo budget.
"""
import argparse
import math
from dataclasses import dataclass, fields

import numpy as np

from offab.estimators import CIS, IS, NCIS, PointNCIS, evaluate
from offab.oracle import cis_value, ncis_asymptotic_value, point_ncis_target, policy_value
from offab.simbench import SMALL_CAPPING, simulate_log, small_enumerable_scenario
from offab.streams import RandomStream


@dataclass
class Config:
    reps: int = 200
    n: int = 10_000
    seed: int = 2024
    n_mc_grid: str = "1,10,100"


def main(cfg: Config) -> None:
    env, pi_p, pi_t = small_enumerable_scenario()
    inst = env.instance(pi_p)
    cap = SMALL_CAPPING
    grid = [int(x) for x in cfg.n_mc_grid.split(",")]
    names = ["is", "cis", "ncis"] + [f"point(n_mc={m})" for m in grid]
    point = point_ncis_target(inst, pi_t, cap)
    oracle = [policy_value(inst, pi_t), cis_value(inst, pi_t, cap), ncis_asymptotic_value(inst, pi_t, cap)]
    oracle += [point] * len(grid)
    root = RandomStream(cfg.seed)
    vals = []
    for r in range(cfg.reps):
        log = simulate_log(env, pi_p, cfg.n, root.derive(0).derive(r))
        ests = [IS(), CIS(cap), NCIS(cap)] + [PointNCIS(cap, m, root.derive(1).derive(m).derive(r), logging=pi_p)
                                              for m in grid]
        vals.append([x.estimate for x in evaluate(log, pi_t, ests, n_bootstrap=0)])
    vals = np.array(vals)
    print(f"{'estimator':<16}{'oracle':>9}{'mean':>9}{'sd':>10}{'z':>7}")
    for j, name in enumerate(names):
        sem = vals[:, j].std(ddof=1) / math.sqrt(cfg.reps)
        print(f"{name:<16}{oracle[j]:9.5f}{vals[:, j].mean():9.5f}{vals[:, j].std(ddof=1):10.2e}"
              f"{(vals[:, j].mean() - oracle[j]) / sem:7.2f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for f in fields(Config):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    main(Config(**vars(p.parse_args())))
