"""Synthetic online/offline A/B benchmark.

An :class:`Environment` draws contexts and rewards. ``simulate_online`` plays
both policies on fresh populations (the ground truth), ``simulate_log``
produces a logged dataset under the logging policy, and ``run_benchmark``
compares offline uplift estimates with the online ones over a suite.

All randomness is keyed per row: row ``i`` of a simulation with stream ``s``
uses ``derive(s, i)``, so chunking and threading never change the output.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .capping import CappingRule
from .errors import ValidationError
from .estimators import (CIS, NCIS, PieceNCIS, PointNCIS, build_value_partition,
                         evaluate, fit_value_model)
from .logs import LogDataset
from .oracle import EnumerableInstance, ncis_asymptotic_value, policy_value
from .policy import ContextBatch, RankingPolicy, log_prob_batch, sample_batch
from .streams import RandomStream, child_keys, counter_uniform

SIM_CHUNK = 1 << 16
DECISIONS = ("positive", "neutral", "negative")

# child-key purposes inside one simulated row
_SEGMENT, _FEATURES, _ELIGIBLE, _ACTION, _REWARD, _CONTEXT = range(6)


# --------------------------------------------------------------------------
# context samplers


@dataclass(frozen=True, eq=False)
class FiniteContexts:
    """A finite context distribution (enumerable)."""

    contexts: ContextBatch
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if len(probs) != len(self.contexts) or (probs < 0).any() or abs(probs.sum() - 1) > 1e-12:
            raise ValidationError("probs must be a distribution over the contexts")
        object.__setattr__(self, "probs", probs)

    def sample(self, keys: np.ndarray, ids: np.ndarray) -> ContextBatch:
        u = counter_uniform(child_keys(keys, _CONTEXT), 0)
        cdf = np.cumsum(self.probs)
        idx = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1)
        return self.contexts.take(idx)


@dataclass(frozen=True, eq=False)
class GaussianContexts:
    """Segments drawn categorically, features ``mean[seg] + std * scale[seg] * N(0, 1)``.

    ``feature_scale`` (segments x features, default all ones) lets a feature
    exist in one segment only.

    ``m`` eligible items are drawn uniformly without replacement from
    ``n_items`` and listed in increasing id order (``m=None`` keeps all).
    """

    segment_probs: np.ndarray
    feature_means: np.ndarray
    feature_std: float = 1.0
    n_items: int = 8
    m: int | None = None
    feature_scale: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.segment_probs, dtype=np.float64)
        means = np.array(self.feature_means, dtype=np.float64, ndmin=2)
        scale = np.ones_like(means) if self.feature_scale is None else np.array(self.feature_scale, dtype=np.float64, ndmin=2)
        if scale.shape != means.shape:
            raise ValidationError("feature_scale must match feature_means")
        object.__setattr__(self, "feature_scale", scale)
        if abs(probs.sum() - 1) > 1e-12 or (probs < 0).any():
            raise ValidationError("segment_probs must be a distribution")
        if means.shape[0] != len(probs):
            raise ValidationError("feature_means needs one row per segment")
        object.__setattr__(self, "segment_probs", probs)
        object.__setattr__(self, "feature_means", means)

    def sample(self, keys: np.ndarray, ids: np.ndarray) -> ContextBatch:
        n = len(keys)
        u = counter_uniform(child_keys(keys, _SEGMENT), 0)
        cdf = np.cumsum(self.segment_probs)
        seg = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1)
        d = self.feature_means.shape[1]
        normals = ndtri(counter_uniform(child_keys(keys, _FEATURES)[:, None], np.arange(d)))
        feats = self.feature_means[seg] + self.feature_std * self.feature_scale[seg] * normals
        items = np.arange(self.n_items)
        if self.m is None or self.m >= self.n_items:
            eligible = np.broadcast_to(items, (n, self.n_items)).copy()
        else:
            g = counter_uniform(child_keys(keys, _ELIGIBLE)[:, None], items)
            eligible = np.sort(np.argsort(g, axis=1)[:, : self.m], axis=1)
        return ContextBatch(ids, seg, feats.reshape(n, d), eligible)


# --------------------------------------------------------------------------
# reward structure


@dataclass(frozen=True, eq=False)
class ItemRewards:
    """Expected reward of a ranking.

    ``mean(x, a) = min(r_max, exp(feature_gain[seg] @ x.features)
    * sum_j position_weights[j] * table[seg, a_j])``.
    """

    table: np.ndarray
    position_weights: np.ndarray
    feature_gain: np.ndarray | None = None
    r_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "table", np.array(self.table, dtype=np.float64, ndmin=2))
        object.__setattr__(self, "position_weights", np.array(self.position_weights, dtype=np.float64, ndmin=1))
        if self.feature_gain is not None:
            object.__setattr__(self, "feature_gain", np.array(self.feature_gain, dtype=np.float64, ndmin=2))
        if (self.table < 0).any():
            raise ValidationError("reward table must be nonnegative")

    def predict(self, contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions)
        seg = contexts.segments
        base = (self.table[seg[:, None], actions] * self.position_weights[: actions.shape[1]]).sum(axis=1)
        if self.feature_gain is not None:
            base = base * np.exp((contexts.features * self.feature_gain[seg]).sum(axis=1))
        return np.minimum(base, self.r_max)


@dataclass(frozen=True, eq=False)
class ContextItemRewards:
    """Expected reward ``table[context id, a_0]`` for finite single-slot instances."""

    table: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "table", np.array(self.table, dtype=np.float64, ndmin=2))
        if (self.table < 0).any() or (self.table > self.r_max).any():
            raise ValidationError("reward table must lie in [0, r_max]")

    def predict(self, contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
        return self.table[contexts.ids, np.asarray(actions)[:, 0]]


@dataclass(frozen=True, eq=False)
class Environment:
    """Context distribution plus reward model.

    ``reward_kind="bernoulli"`` draws ``r_max * Bernoulli(mean / r_max)``;
    ``"deterministic"`` returns the mean itself.
    """

    context_sampler: object
    reward_model: ItemRewards
    r_max: float
    reward_kind: str = "bernoulli"

    def __post_init__(self):
        if self.reward_kind not in ("bernoulli", "deterministic"):
            raise ValidationError(f"unknown reward kind {self.reward_kind!r}")
        if not self.r_max > 0:
            raise ValidationError("r_max must be positive")

    def predict(self, contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
        """Expected reward; also serves as a perfect reward model."""
        return self.reward_model.predict(contexts, actions)

    def sample_contexts(self, keys: np.ndarray, ids: np.ndarray) -> ContextBatch:
        return self.context_sampler.sample(keys, ids)

    def draw_rewards(self, contexts, actions, keys) -> np.ndarray:
        mean = self.predict(contexts, actions)
        if self.reward_kind == "deterministic":
            return mean
        u = counter_uniform(child_keys(keys, _REWARD), 0)
        return np.where(u * self.r_max < mean, self.r_max, 0.0)

    @property
    def enumerable(self) -> bool:
        return isinstance(self.context_sampler, FiniteContexts)

    def instance(self, logging: RankingPolicy) -> EnumerableInstance:
        if not self.enumerable:
            raise ValidationError("environment has a continuous context distribution")
        s = self.context_sampler
        return EnumerableInstance(s.contexts, s.probs, self.predict, logging, self.r_max)


# --------------------------------------------------------------------------
# simulation


def _rows(env: Environment, policy: RankingPolicy, n: int, stream: RandomStream, start: int):
    idx = np.arange(start, start + n)
    keys = stream.row_keys(idx)
    contexts = env.sample_contexts(keys, idx)
    actions = sample_batch(policy, contexts, child_keys(keys, _ACTION))
    rewards = env.draw_rewards(contexts, actions, keys)
    return contexts, actions, rewards


def simulate_log(env: Environment, pi_p: RankingPolicy, n: int, rng: RandomStream,
                 chunk_size: int = SIM_CHUNK) -> LogDataset:
    """``n`` logged samples with propensities recorded from ``pi_p``."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    parts = []
    for start in range(0, n, chunk_size):
        ctx, act, rew = _rows(env, pi_p, min(chunk_size, n - start), rng, start)
        parts.append((ctx, act, rew, log_prob_batch(pi_p, ctx, act)))
    return LogDataset(ContextBatch.concat([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                      np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]),
                      env.r_max, pi_p.k)


@dataclass(frozen=True)
class OnlineResult:
    uplift: float
    ci_low: float
    ci_high: float
    mean_logging: float
    mean_target: float
    n_per_arm: int


def _arm_moments(env, policy, n, stream, chunk_size):
    total = sq = 0.0
    for start in range(0, n, chunk_size):
        _, _, r = _rows(env, policy, min(chunk_size, n - start), stream, start)
        total += r.sum()
        sq += (r * r).sum()
    mean = total / n
    return mean, max(sq / n - mean * mean, 0.0) * n / max(n - 1, 1)


def simulate_online(env: Environment, pi_p: RankingPolicy, pi_t: RankingPolicy, n_per_arm: int,
                    rng: RandomStream, confidence: float = 0.90, chunk_size: int = SIM_CHUNK) -> OnlineResult:
    """Randomized A/B test: mean reward difference with a normal-approximation CI."""
    if n_per_arm < 2:
        raise ValidationError("n_per_arm must be at least 2")
    mp, vp = _arm_moments(env, pi_p, n_per_arm, rng.derive(0), chunk_size)
    mt, vt = _arm_moments(env, pi_t, n_per_arm, rng.derive(1), chunk_size)
    half = norm.ppf(0.5 + confidence / 2) * math.sqrt((vp + vt) / n_per_arm)
    d = mt - mp
    return OnlineResult(d, d - half, d + half, mp, mt, n_per_arm)


def decide(result) -> str:
    """``positive`` if the CI is above 0, ``negative`` if below, else ``neutral``."""
    if result.ci_low > 0:
        return "positive"
    if result.ci_high < 0:
        return "negative"
    return "neutral"


# --------------------------------------------------------------------------
# scenarios

TABLE1_CAPPING = CappingRule("max", 2.0)


def table1_scenario() -> tuple[Environment, RankingPolicy, RankingPolicy]:
    """Two segments (registered 10%, unknown 90%), three single-slot actions.

    Registered users: item 0 is a good deal the target policy pushes from 10%
    to 50% of displays; items 1 and 2 have rewards 16 and 8. Segment values
    are 10 (logging) and 12 (target), with ``E_t[capped(W)/W] = 0.7`` under
    max capping at 2. Unknown users get reward 1 under both policies.
    Rewards are deterministic given (segment, item); ``r_max = 20``.
    """
    contexts = ContextBatch(ids=[0, 1], segments=[0, 1], features=[[0.0], [0.0]], eligible=[[0, 1, 2], [0, 1, 2]])
    sampler = FiniteContexts(contexts, [0.1, 0.9])
    rewards = ItemRewards(table=[[12.0, 16.0, 8.0], [1.0, 1.0, 1.0]], position_weights=[1.0], r_max=20.0)
    env = Environment(sampler, rewards, r_max=20.0, reward_kind="deterministic")
    unknown = np.log([0.3, 0.3, 0.4])
    pi_p = RankingPolicy(np.zeros((3, 1)), [np.log([0.1, 0.2, 0.7]), unknown], 1.0, 1)
    pi_t = RankingPolicy(np.zeros((3, 1)), [np.log([0.5, 0.25, 0.25]), unknown], 1.0, 1)
    return env, pi_p, pi_t


def _per_context_policy(rows) -> RankingPolicy:
    # contexts (A, B) in segment 0 and (C, D) in segment 1; B and D switch on one feature each
    logp = np.log(np.asarray(rows, dtype=np.float64))
    offsets = np.stack([logp[0], logp[2]])
    weights = np.stack([logp[1] - logp[0], logp[3] - logp[2]], axis=1)
    return RankingPolicy(weights, offsets, 1.0, 1)


def hetero_segments_scenario() -> tuple[Environment, RankingPolicy, RankingPolicy]:
    """Enumerable two-segment instance whose segments each hold two contexts.

    Capping binds unevenly across contexts and segments, so the estimators'
    limits are strictly ordered by how finely they renormalize:
    PointNCIS (per context) beats PieceNCIS on segments, which beats NCIS,
    which beats CIS.
    """
    contexts = ContextBatch(ids=[0, 1, 2, 3], segments=[0, 0, 1, 1],
                            features=[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
                            eligible=[[0, 1, 2]] * 4)
    sampler = FiniteContexts(contexts, [0.05, 0.05, 0.45, 0.45])
    rewards = ContextItemRewards([[12, 16, 8], [4, 4, 4], [1, 1, 1], [3, 1, 1]], r_max=20.0)
    env = Environment(sampler, rewards, r_max=20.0, reward_kind="deterministic")
    pi_p = _per_context_policy([[.1, .2, .7], [.3, .3, .4], [.3, .3, .4], [.2, .4, .4]])
    pi_t = _per_context_policy([[.5, .25, .25], [.3, .3, .4], [.3, .3, .4], [.5, .25, .25]])
    return env, pi_p, pi_t


SMALL_CAPPING = CappingRule("max", 2.0)


def small_enumerable_scenario(seed: int = 0, divergence: float = 1.0) -> tuple[Environment, RankingPolicy, RankingPolicy]:
    """Three contexts with 5, 4 and 3 eligible items out of 6, top-2 rankings,
    Bernoulli rewards; small enough for exact enumeration."""
    g = np.random.default_rng(seed)
    contexts = ContextBatch(ids=[0, 1, 2], segments=[0, 1, 1], features=[[0.5], [-1.0], [1.5]],
                            eligible=[[0, 1, 2, 3, 4], [1, 3, 4, 5, -1], [0, 2, 5, -1, -1]])
    sampler = FiniteContexts(contexts, [0.5, 0.3, 0.2])
    rewards = ItemRewards(g.uniform(0.05, 0.35, size=(2, 6)), [1.0, 0.6], r_max=1.0)
    env = Environment(sampler, rewards, 1.0, "bernoulli")
    pi_p = RankingPolicy(g.normal(0, 0.5, size=(6, 1)), g.normal(0, 0.5, size=(2, 6)), 1.0, 2)
    pi_t = pi_p.replace(item_weights=pi_p.item_weights + g.normal(0, divergence, size=(6, 1)),
                        segment_offsets=pi_p.segment_offsets + g.normal(0, divergence, size=(2, 6)))
    return env, pi_p, pi_t


HETERO_CAPPING = CappingRule("max", 2.0)

# relative item attractiveness for registered / unknown users in the suite environment
_REGISTERED_ITEMS = np.array([2.0, 1.8, 1.0, 1.5, 0.8, 0.8, 0.6, 0.6])
_UNKNOWN_ITEMS = np.array([1.0, 1.0, 1.2, 1.5, 0.9, 1.0, 0.7, 0.7])


def hetero_environment(registered_share: float = 0.1, base_registered: float = 0.04,
                       base_unknown: float = 0.004, gain_registered: float = 0.6,
                       gain_unknown: float = 0.3) -> Environment:
    """Eight items, top-2 rankings, a small high-value registered segment.

    Each segment has one private Gaussian feature that scales its rewards.
    Rewards are Bernoulli with ``r_max = 1``.
    """
    sampler = GaussianContexts([registered_share, 1 - registered_share], [[0.0, 0.0], [0.0, 0.0]], 1.0, 8,
                               feature_scale=[[1.0, 0.0], [0.0, 1.0]])
    rewards = ItemRewards([base_registered * _REGISTERED_ITEMS, base_unknown * _UNKNOWN_ITEMS], [1.0, 0.5],
                          feature_gain=[[gain_registered, 0.0], [0.0, gain_unknown]], r_max=1.0)
    return Environment(sampler, rewards, 1.0, "bernoulli")


def hetero_logging_policy(seed: int = 0) -> RankingPolicy:
    g = np.random.default_rng(seed)
    return RankingPolicy(np.zeros((8, 2)), g.normal(0.0, 0.5, size=(2, 8)), 1.0, 2)


PERTURBATIONS = ("reg-deal", "reg-bad", "mild", "strong-pos", "strong-neg")


def perturb_policy(policy: RankingPolicy, kind: str, rng: np.random.Generator) -> RankingPolicy:
    """A candidate policy derived from ``policy`` (suite environment item layout).

    * ``reg-deal``: push the registered segment's best items, more so for
      engaged users (segment-targeted, positive).
    * ``reg-bad``: the same push on its worst items (negative).
    * ``mild``: small global shifts on three random items (mostly neutral).
    * ``strong-pos`` / ``strong-neg``: large global push on a good or bad item.
    """
    w = policy.item_weights.copy()
    o = policy.segment_offsets.copy()
    if kind == "reg-deal":
        o[0, [0, 1]] += rng.uniform(0.5, 3.0)
        w[[0, 1], 0] += rng.uniform(0.0, 1.5)
    elif kind == "reg-bad":
        o[0, [6, 7]] += rng.uniform(0.5, 3.0)
        w[[6, 7], 0] += rng.uniform(0.0, 1.5)
    elif kind == "mild":
        items = rng.choice(w.shape[0], size=3, replace=False)
        o[:, items] += rng.uniform(-1.0, 1.0)
    elif kind == "strong-pos":
        o[:, 3] += rng.uniform(2.5, 4.0)
    elif kind == "strong-neg":
        o[:, [6, 7]] += rng.uniform(0.5, 1.5)
    else:
        raise ValidationError(f"unknown perturbation {kind!r}")
    return policy.replace(item_weights=w, segment_offsets=o)


def heavy_tail_scenario(n_items: int = 20, n_features: int = 4, shift: float = 1.0,
                        seed: int = 0) -> tuple[Environment, RankingPolicy, RankingPolicy]:
    """Single segment, top-2 rankings, target scorer far from the logging one.

    Log-weights are roughly Gaussian across contexts, so ``W`` is close to
    log-normal: most weights are tiny while a few exceed 10^3.
    """
    g = np.random.default_rng(seed)
    sampler = GaussianContexts([1.0], [np.zeros(n_features)], 1.0, n_items)
    rewards = ItemRewards(g.uniform(0.02, 0.1, size=(1, n_items)), [1.0, 0.5], r_max=1.0)
    env = Environment(sampler, rewards, 1.0, "bernoulli")
    w = g.normal(0.0, 0.5, size=(n_items, n_features))
    pi_p = RankingPolicy(w, np.zeros((1, n_items)), 1.0, 2)
    pi_t = RankingPolicy(w + g.normal(0.0, shift, size=w.shape), np.zeros((1, n_items)), 1.0, 2)
    return env, pi_p, pi_t


def expected_value(env: Environment, policy: RankingPolicy, n: int, rng: RandomStream,
                   chunk_size: int = SIM_CHUNK) -> float:
    """Monte-Carlo ``E_pi[R]`` using expected rewards (no reward noise)."""
    total = 0.0
    for start in range(0, n, chunk_size):
        idx = np.arange(start, min(start + chunk_size, n))
        keys = rng.row_keys(idx)
        ctx = env.sample_contexts(keys, idx)
        total += env.predict(ctx, sample_batch(policy, ctx, child_keys(keys, _ACTION))).sum()
    return total / n


SCENARIOS = {
    "table1": table1_scenario,
    "small": small_enumerable_scenario,
    "hetero-segments": hetero_segments_scenario,
    "heavy-tail": heavy_tail_scenario,
}


def load_scenario(spec: dict) -> tuple[Environment, RankingPolicy, RankingPolicy]:
    """Build ``(env, pi_p, pi_t)`` from ``{"scenario": name, "params": {...}}``.

    ``hetero`` is the benchmark environment; its target is one ``reg-deal``
    perturbation drawn with ``params["perturbation_seed"]``.
    """
    if not isinstance(spec, dict) or "scenario" not in spec:
        raise ValidationError("environment spec needs a 'scenario' field")
    name = spec["scenario"]
    params = dict(spec.get("params", {}))
    if name != "hetero" and name not in SCENARIOS:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS) + ['hetero']}")
    try:
        if name == "hetero":
            pseed = params.pop("perturbation_seed", 0)
            lseed = params.pop("logging_seed", 0)
            env = hetero_environment(**params)
            pi_p = hetero_logging_policy(lseed)
            return env, pi_p, perturb_policy(pi_p, "reg-deal", np.random.default_rng(pseed))
        return SCENARIOS[name](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for scenario {name!r}: {exc}") from None


def table1_report(n: int = 1_000_000, seed: int = 1, n_mc: int = 100, n_bootstrap: int = 1000,
                  threads: int = 1) -> dict:
    """Simulate the two-segment example and compare NCIS and PointNCIS.

    Decisions use offline uplifts against the logged mean reward.
    """
    env, pi_p, pi_t = table1_scenario()
    inst = env.instance(pi_p)
    stream = RandomStream(seed)
    log = simulate_log(env, pi_p, n, stream.derive(0))
    ests = [NCIS(TABLE1_CAPPING), PointNCIS(TABLE1_CAPPING, n_mc, stream.derive(1), logging=pi_p)]
    ncis_up, point_up = evaluate(log, pi_t, ests, n_bootstrap=n_bootstrap, seed=stream.derive(2).key,
                                 uplift=True, threads=threads)
    mean = float(log.rewards.mean())
    return {
        "true_target": policy_value(inst, pi_t),
        "true_logging": policy_value(inst, pi_p),
        "logged_mean": mean,
        "ncis": ncis_up.estimate + mean,
        "ncis_limit": float(ncis_asymptotic_value(inst, pi_t, TABLE1_CAPPING)),
        "point_ncis": point_up.estimate + mean,
        "ncis_decision": decide(ncis_up),
        "point_ncis_decision": decide(point_up),
        "reports": [ncis_up, point_up],
    }


def table1_checks(result: dict) -> dict:
    """Named pass/fail flags for a :func:`table1_report` result."""
    return {
        "true_target == 2.1": abs(result["true_target"] - 2.1) < 1e-12,
        "logged mean in 1.9 +- 0.01": abs(result["logged_mean"] - 1.9) <= 0.01,
        "NCIS in [1.76, 1.84]": 1.76 <= result["ncis"] <= 1.84,
        "PointNCIS in [2.05, 2.15]": 2.05 <= result["point_ncis"] <= 2.15,
        "NCIS decision negative": result["ncis_decision"] == "negative",
        "PointNCIS decision positive": result["point_ncis_decision"] == "positive",
    }


# --------------------------------------------------------------------------
# benchmark


@dataclass
class AbTestRecord:
    test_id: int
    online: OnlineResult
    offline_uplifts: dict
    decisions: dict
    online_decision: str
    label: str = ""


@dataclass
class BenchmarkSummary:
    estimator: str
    correlation: float
    precision: float
    fnr: float
    ci_size_ratio: float
    counts: dict
    bands: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"estimator": self.estimator, "correlation": self.correlation, "precision": self.precision,
               "fnr": self.fnr, "ci_size_ratio": self.ci_size_ratio}
        for metric, (lo, hi) in self.bands.items():
            out[f"{metric}_q10"] = lo
            out[f"{metric}_q90"] = hi
        return out


@dataclass(frozen=True, eq=False)
class AbTest:
    env: Environment
    pi_p: RankingPolicy
    pi_t: RankingPolicy
    label: str = ""


def _pearson(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


def _metrics(online, offline, on_dec, off_dec, widths, cis_widths):
    on_dec, off_dec = np.asarray(on_dec), np.asarray(off_dec)
    off_pos = off_dec == "positive"
    on_pos = on_dec == "positive"
    precision = float((off_pos & on_pos).sum() / off_pos.sum()) if off_pos.any() else math.nan
    fnr = float((on_pos & (off_dec == "negative")).sum() / on_pos.sum()) if on_pos.any() else math.nan
    ratio = np.asarray(widths) / np.asarray(cis_widths) if cis_widths is not None else None
    ci_ratio = float(np.nanmean(ratio)) if ratio is not None and np.isfinite(ratio).any() else math.nan
    return _pearson(offline, online), precision, fnr, ci_ratio


def summarize(records: Sequence[AbTestRecord], estimator: str, n_bootstrap: int = 1000,
              stream: RandomStream | None = None, reference: str = "cis") -> BenchmarkSummary:
    """Correlation, precision, FNR and CI-size ratio for one estimator.

    ``bands`` hold 10%/90% quantiles over ``n_bootstrap`` resamples of tests.
    Precision and FNR are NaN when their denominator is empty.
    """
    online = np.array([r.online.uplift for r in records])
    offline = np.array([r.offline_uplifts[estimator].estimate for r in records])
    on_dec = np.array([r.online_decision for r in records])
    off_dec = np.array([r.decisions[estimator] for r in records])
    widths = np.array([r.offline_uplifts[estimator].ci_high - r.offline_uplifts[estimator].ci_low for r in records])
    ref = None
    if all(reference in r.offline_uplifts for r in records):
        ref = np.array([r.offline_uplifts[reference].ci_high - r.offline_uplifts[reference].ci_low for r in records])
        ref = np.where(ref > 0, ref, np.nan)
    corr, prec, fnr, ratio = _metrics(online, offline, on_dec, off_dec, widths, ref)
    counts = {f"{a}/{b}": int(((on_dec == a) & (off_dec == b)).sum()) for a in DECISIONS for b in DECISIONS}

    bands = {}
    if n_bootstrap > 0 and len(records) > 1:
        stream = stream or RandomStream(0)
        gen = stream.generator()
        n = len(records)
        boot = []
        for _ in range(n_bootstrap):
            i = gen.integers(0, n, size=n)
            boot.append(_metrics(online[i], offline[i], on_dec[i], off_dec[i], widths[i],
                                 None if ref is None else ref[i])[:3])
        boot = np.array(boot, dtype=float)
        for j, metric in enumerate(("correlation", "precision", "fnr")):
            col = boot[:, j]
            col = col[np.isfinite(col)]
            bands[metric] = (float(np.quantile(col, 0.1)), float(np.quantile(col, 0.9))) if len(col) else (math.nan, math.nan)
    return BenchmarkSummary(estimator, corr, prec, fnr, ratio, counts, bands)


@dataclass(frozen=True)
class BenchConfig:
    n_log: int = 200_000
    n_online: int = 1_000_000
    capping: CappingRule = CappingRule("max", 5.0)
    n_mc: int = 100
    n_bootstrap: int = 1000
    confidence: float = 0.90
    value_log_base: float = 10.0
    threads: int = 1


def run_test(test: AbTest, estimators: Sequence[str], config: BenchConfig, rng: RandomStream,
             test_id: int = 0) -> AbTestRecord:
    """One simulated A/B test: online ground truth plus offline uplifts on the control log."""
    online = simulate_online(test.env, test.pi_p, test.pi_t, config.n_online, rng.derive(0), config.confidence)
    log = simulate_log(test.env, test.pi_p, config.n_log, rng.derive(1))
    seed = rng.derive(2).key
    stream = rng.derive(3)
    plain, reports = [], {}
    for name in estimators:
        if name == "cis":
            plain.append(CIS(config.capping))
        elif name == "ncis":
            plain.append(NCIS(config.capping))
        elif name == "point-ncis":
            plain.append(PointNCIS(config.capping, config.n_mc, stream, logging=test.pi_p))
        elif name != "piece-ncis":
            raise ValidationError(f"estimator {name!r} is not part of the benchmark")
    for rep in evaluate(log, test.pi_t, plain, n_bootstrap=config.n_bootstrap, seed=seed,
                        confidence=config.confidence, uplift=True, threads=config.threads):
        reports[rep.estimator_name] = rep
    if "piece-ncis" in estimators:
        model, held_out = fit_value_model(log, seed=rng.derive(4).key, log_base=config.value_log_base)
        partition = build_value_partition(model, held_out.contexts)
        (rep,) = evaluate(held_out, test.pi_t, [PieceNCIS(config.capping, partition)],
                          n_bootstrap=config.n_bootstrap, seed=seed, confidence=config.confidence,
                          uplift=True, threads=config.threads)
        reports["piece-ncis"] = rep
    reports = {name: reports[name] for name in estimators}
    return AbTestRecord(test_id, online, reports, {k: decide(v) for k, v in reports.items()},
                        decide(online), test.label)


def run_benchmark(suite: Sequence[AbTest], estimators: Sequence[str], config: BenchConfig,
                  rng: RandomStream) -> tuple[list[AbTestRecord], dict[str, BenchmarkSummary]]:
    """Run every test of ``suite`` (test ``i`` uses ``derive(rng, i)``) and summarize."""
    def one(i):
        return run_test(suite[i], estimators, config, rng.derive(i), test_id=i)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            records = list(pool.map(one, range(len(suite))))
    else:
        records = [one(i) for i in range(len(suite))]
    summary_stream = rng.derive(len(suite) + 1)
    summaries = {name: summarize(records, name, config.n_bootstrap, summary_stream)
                 for name in estimators}
    return records, summaries


DEFAULT_SUITE_TESTS = {"reg-deal": 8, "reg-bad": 4, "mild": 8, "strong-pos": 6, "strong-neg": 4}


@dataclass(frozen=True)
class SuiteSpec:
    """Benchmark suite description, stored as JSON.

    Tests are generated in the order of ``tests`` (kind -> count), each a
    perturbation of the logging policy drawn from ``perturbation_seed``.
    """

    tests: dict = field(default_factory=lambda: dict(DEFAULT_SUITE_TESTS))
    environment: dict = field(default_factory=dict)
    logging_seed: int = 0
    perturbation_seed: int = 1
    n_log: int = 200_000
    n_online: int = 1_000_000
    cap_mode: str = "max"
    cap: float = 5.0
    n_mc: int = 100

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SuiteSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"suite spec is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError("suite spec must be a JSON object")
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown suite spec fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "SuiteSpec":
        return cls.from_json(Path(path).read_text())

    def config(self, n_bootstrap: int = 1000, threads: int = 1) -> BenchConfig:
        return BenchConfig(n_log=self.n_log, n_online=self.n_online, capping=CappingRule(self.cap_mode, self.cap),
                           n_mc=self.n_mc, n_bootstrap=n_bootstrap, threads=threads)


def make_suite(spec: SuiteSpec) -> list[AbTest]:
    env = hetero_environment(**spec.environment)
    pi_p = hetero_logging_policy(spec.logging_seed)
    g = np.random.default_rng(spec.perturbation_seed)
    return [AbTest(env, pi_p, perturb_policy(pi_p, kind, g), kind)
            for kind, count in spec.tests.items() for _ in range(int(count))]
