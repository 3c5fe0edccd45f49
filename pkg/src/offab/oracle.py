"""Exact expectations on enumerable instances (finite contexts, small rankings).

These sums over every (context, ranking) pair are the independent reference
that estimator tests compare against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .capping import CappingRule, capped_ratio, is_capped
from .policy import ContextBatch, RankingPolicy, enumerate_log_probs

RewardMean = Callable[[ContextBatch, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class EnumerableInstance:
    """Finite context distribution plus an expected-reward function."""

    contexts: ContextBatch
    probs: np.ndarray
    reward_mean: RewardMean
    logging: RankingPolicy
    r_max: float = 1.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if len(probs) != len(self.contexts) or abs(probs.sum() - 1) > 1e-12 or (probs < 0).any():
            raise ValueError("probs must be a distribution over the contexts")
        object.__setattr__(self, "probs", probs)

    def table(self, target: RankingPolicy):
        """Yield ``(q_x, pi_t(a), pi_p(a), log_w(a), rbar(a))`` arrays per context."""
        for i in range(len(self.contexts)):
            ctx = self.contexts[i]
            items, lt = enumerate_log_probs(target, ctx)
            items_p, lp = enumerate_log_probs(self.logging, ctx)
            assert np.array_equal(items, items_p)
            rbar = self.reward_mean(self.contexts.take([i] * len(items)), items)
            yield self.probs[i], np.exp(lt), np.exp(lp), lt - lp, np.asarray(rbar, dtype=np.float64)


def policy_value(instance: EnumerableInstance, policy: RankingPolicy) -> float:
    """Exact ``E_pi[R]``."""
    return float(sum(q * (pt @ r) for q, pt, _, _, r in instance.table(policy)))


def cis_value(instance, target, capping: CappingRule) -> float:
    """Exact ``E_t[R capped(W)/W]``, the expectation of the CIS estimator."""
    return float(sum(q * (pt * capped_ratio(lw, capping.mode, capping.c) @ r)
                     for q, pt, _, lw, r in instance.table(target)))


def capped_mass(instance, target, capping: CappingRule) -> float:
    """Exact ``E_t[capped(W)/W]``."""
    return float(sum(q * (pt @ capped_ratio(lw, capping.mode, capping.c))
                     for q, pt, _, lw, r in instance.table(target)))


def capped_mass_logging(instance, target, capping: CappingRule) -> float:
    """Exact ``E_p[capped(W)]``; equals :func:`capped_mass`."""
    return float(sum(q * (pp @ capping.apply(np.exp(lw))) for q, _, pp, lw, _ in instance.table(target)))


def ncis_asymptotic_value(instance, target, capping: CappingRule) -> float:
    """Almost-sure limit of NCIS: ``E_t[R capped(W)/W] / E_t[capped(W)/W]``."""
    num = den = 0.0
    for q, pt, _, lw, r in instance.table(target):
        v = capped_ratio(lw, capping.mode, capping.c)
        num += q * (pt * v @ r)
        den += q * (pt @ v)
    return num / den


def point_ncis_target(instance, target, capping: CappingRule) -> float:
    """Expectation of PointNCIS: ``E_x[ E_t[R v | x] / E_t[v | x] ]``."""
    out = 0.0
    for q, pt, _, lw, r in instance.table(target):
        v = capped_ratio(lw, capping.mode, capping.c)
        out += q * (pt * v @ r) / (pt @ v)
    return float(out)


def inverse_mass(instance, target, capping: CappingRule) -> np.ndarray:
    """Per-context ``1 / E_t[capped(W)/W | x]``."""
    return np.array([1.0 / (pt @ capped_ratio(lw, capping.mode, capping.c))
                     for _, pt, _, lw, _ in instance.table(target)])


def piece_ncis_limit(instance, target, capping: CappingRule, labels) -> float:
    """Limit of PieceNCIS for a given per-context group labelling."""
    labels = np.asarray(labels)
    num, den, mass = {}, {}, {}
    for (q, pt, _, lw, r), g in zip(instance.table(target), labels):
        v = capped_ratio(lw, capping.mode, capping.c)
        num[g] = num.get(g, 0.0) + q * (pt * v @ r)
        den[g] = den.get(g, 0.0) + q * (pt @ v)
        mass[g] = mass.get(g, 0.0) + q
    return float(sum(mass[g] * num[g] / den[g] for g in mass))


def capped_probability(instance, target, capping: CappingRule) -> float:
    """Exact ``P_t(W is capped)``."""
    return float(sum(q * (pt @ is_capped(np.exp(lw), capping.mode, capping.c))
                     for q, pt, _, lw, _ in instance.table(target)))


def expected_weight(instance, target) -> float:
    """Exact ``E_p[W]`` (equals 1 for full-support logging)."""
    return float(sum(q * (pp @ np.exp(lw)) for q, _, pp, lw, _ in instance.table(target)))
