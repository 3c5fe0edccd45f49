"""Counterfactual estimators over logged ranking feedback.

Every estimator is written as a set of per-sample columns whose sums are
turned into a value by ``finalize``. That makes each one an associative fold
(partial sums over disjoint chunks merge by addition) and lets all
estimators on a dataset share the same bootstrap resamples.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .capping import CappingRule, capped_ratio, capped_weights, is_capped
from .errors import DegenerateOverlapError, DegeneratePolicyError, UndefinedEstimateError, ValidationError
from .logs import LogDataset
from .montecarlo import ACCEPT_BUDGET, inverse_mass_batch
from .oracle import ncis_asymptotic_value
from .policy import (ContextBatch, RankingPolicy, action_columns, as_batch, gumbel_topk,
                     n_rankings, plackett_luce_logprob, ranking_columns, sample_batch)
from .streams import RandomStream, child_keys

__all__ = [
    "EstimatorReport", "Partition", "ValueModel", "SegmentMeanValueModel", "RewardModel",
    "WeightedLog", "Aggregate",
    "IS", "NIS", "DR", "CIS", "NCIS", "PieceNCIS", "PointNCIS", "OnPolicyMean",
    "evaluate", "fold", "make_estimator",
    "estimate_is", "estimate_nis", "estimate_dr", "estimate_cis", "estimate_ncis",
    "estimate_piece_ncis", "estimate_point_ncis", "cis_bias_upper_bound", "ncis_asymptotic_value",
    "build_value_partition", "fit_value_model", "shrink_capping", "shrink_capping_batch",
    "capping_sweep", "weight_quantiles", "CappingRule",
]

CHUNK_SIZE = 1 << 16
ENUMERATION_CAP = 10_000
DEFAULT_N_MC = 100
DEFAULT_BOOTSTRAP = 1000
DEFAULT_CONFIDENCE = 0.90


@dataclass(frozen=True)
class EstimatorReport:
    estimate: float
    ci_low: float
    ci_high: float
    n_used: int
    capped_fraction: float
    sum_weights: float
    estimator_name: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorReport":
        return cls(**d)


def write_reports(reports: Sequence[EstimatorReport], path) -> None:
    """One JSON object per line, same conventions as the log format."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_reports(path) -> list[EstimatorReport]:
    with open(path, encoding="utf-8") as fh:
        return [EstimatorReport.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# models used by estimators


class RewardModel(Protocol):
    def predict(self, contexts: ContextBatch, actions: np.ndarray) -> np.ndarray: ...


class ValueModel(Protocol):
    log_base: float

    def predict(self, contexts: ContextBatch) -> np.ndarray: ...


@dataclass(frozen=True)
class SegmentMeanValueModel:
    """Expected reward per segment, clipped below so log-bucketing is defined."""

    means: dict
    fallback: float
    log_base: float = 10.0
    floor: float = 1e-6

    def predict(self, contexts: ContextBatch) -> np.ndarray:
        out = np.array([self.means.get(int(s), self.fallback) for s in contexts.segments], dtype=np.float64)
        return np.maximum(out, self.floor)

    @classmethod
    def fit(cls, data: LogDataset, log_base: float = 10.0, floor: float = 1e-6) -> "SegmentMeanValueModel":
        segs = data.contexts.segments
        means = {int(s): float(data.rewards[segs == s].mean()) for s in np.unique(segs)}
        return cls(means, float(data.rewards.mean()), log_base, floor)


def fit_value_model(data: LogDataset, seed: int, fraction: float = 0.5,
                    log_base: float = 10.0) -> tuple[SegmentMeanValueModel, LogDataset]:
    """Fit a segment-mean value model on a random split; return it with the held-out part."""
    train, held_out = data.split(fraction, seed)
    return SegmentMeanValueModel.fit(train, log_base), held_out


@dataclass(frozen=True, eq=False)
class Partition:
    """Context grouping for PieceNCIS. ``group_of`` maps a batch to labels."""

    group_of: Callable[[ContextBatch], np.ndarray]
    groups: tuple

    def labels(self, contexts) -> np.ndarray:
        return np.asarray(self.group_of(as_batch(contexts)))

    def index(self, contexts: ContextBatch) -> np.ndarray:
        """Position of each context's group in ``groups``."""
        labels = self.labels(contexts)
        lookup = {g: i for i, g in enumerate(self.groups)}
        idx = np.fromiter((lookup.get(g.item() if hasattr(g, "item") else g, -1) for g in labels),
                          dtype=np.int64, count=len(labels))
        if (idx < 0).any():
            bad = contexts.ids[idx < 0][:10].tolist()
            raise ValidationError(f"partition maps contexts {bad} to no group")
        return idx

    @classmethod
    def single(cls) -> "Partition":
        return cls(lambda b: np.zeros(len(b), dtype=np.int64), (0,))

    @classmethod
    def by_segment(cls, segments) -> "Partition":
        return cls(lambda b: b.segments, tuple(int(s) for s in segments))


def _log_bucket(values: np.ndarray, base: float) -> np.ndarray:
    k = np.floor(np.log(values) / np.log(base))
    # correct rounding at exact powers of the base
    k = np.where(base ** (k + 1) <= values, k + 1, k)
    k = np.where(base**k > values, k - 1, k)
    return k.astype(np.int64)


def build_value_partition(value_model, contexts: ContextBatch | None = None) -> Partition:
    """Partition by ``floor(log_b V(x))``; groups are the labels seen on ``contexts``."""
    base = float(value_model.log_base)
    if not base > 1:
        raise ValidationError("log base must exceed 1")

    def group_of(batch):
        pred = np.asarray(value_model.predict(batch), dtype=np.float64)
        if not (pred > 0).all():
            raise ValidationError("value model predictions must be positive")
        return _log_bucket(pred, base)

    groups = tuple(sorted(int(g) for g in np.unique(group_of(contexts)))) if contexts is not None else ()
    return Partition(group_of, groups)


# --------------------------------------------------------------------------
# per-sample quantities


@dataclass(frozen=True, eq=False)
class WeightedLog:
    """A slice of a log together with its importance log-weights."""

    data: LogDataset
    target: RankingPolicy
    logging: RankingPolicy | None
    log_w: np.ndarray
    indices: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def rewards(self) -> np.ndarray:
        return self.data.rewards

    @classmethod
    def build(cls, data: LogDataset, target: RankingPolicy, logging: RankingPolicy | None = None,
              offset: int = 0) -> "WeightedLog":
        if target.k != data.k:
            raise ValidationError(f"target k={target.k} does not match log k={data.k}")
        cols = action_columns(data.contexts, data.actions)
        lt = plackett_luce_logprob(target.logits(data.contexts), cols)
        lp = data.logging_logprob if logging is None else plackett_luce_logprob(logging.logits(data.contexts), cols)
        log_w = lt - lp
        if not np.isfinite(log_w).all():
            raise DegeneratePolicyError("non-finite importance log-weight")
        return cls(data, target, logging, log_w, np.arange(offset, offset + len(data)))


@dataclass(frozen=True)
class Aggregate:
    """Partial sums of an estimator's columns; merging is addition."""

    n: int
    sums: np.ndarray

    def merge(self, other: "Aggregate") -> "Aggregate":
        return Aggregate(self.n + other.n, self.sums + other.sums)


class Estimator:
    name: str = ""
    capping: CappingRule | None = None

    def columns(self, wl: WeightedLog) -> np.ndarray:
        raise NotImplementedError

    def finalize(self, sums: np.ndarray, n: float) -> float:
        raise NotImplementedError


def _ratio(num, den):
    if den == 0:
        raise UndefinedEstimateError("normalizer is zero")
    return num / den


@dataclass(frozen=True)
class IS(Estimator):
    name: str = "is"

    def columns(self, wl):
        return (wl.w * wl.rewards)[:, None]

    def finalize(self, sums, n):
        return sums[0] / n


@dataclass(frozen=True)
class NIS(Estimator):
    name: str = "nis"

    def columns(self, wl):
        w = wl.w
        return np.column_stack([w * wl.rewards, w])

    def finalize(self, sums, n):
        return _ratio(sums[0], sums[1])


@dataclass(frozen=True)
class CIS(Estimator):
    capping: CappingRule = None
    name: str = "cis"

    def columns(self, wl):
        return (self.capping.apply(wl.w) * wl.rewards)[:, None]

    def finalize(self, sums, n):
        return sums[0] / n


@dataclass(frozen=True)
class NCIS(Estimator):
    capping: CappingRule = None
    name: str = "ncis"

    def columns(self, wl):
        wbar = self.capping.apply(wl.w)
        return np.column_stack([wbar * wl.rewards, wbar])

    def finalize(self, sums, n):
        return _ratio(sums[0], sums[1])


@dataclass(frozen=True, eq=False)
class PieceNCIS(Estimator):
    """Per-group NCIS weighted by group frequencies.

    A group with samples but zero capped-weight mass takes the global NCIS
    value instead of being dropped.
    """

    capping: CappingRule = None
    partition: Partition = None
    name: str = "piece-ncis"

    def columns(self, wl):
        g = self.partition.index(wl.data.contexts)
        G = len(self.partition.groups)
        wbar = self.capping.apply(wl.w)
        onehot = np.zeros((len(g), G))
        onehot[np.arange(len(g)), g] = 1.0
        num = onehot * (wbar * wl.rewards)[:, None]
        den = onehot * wbar[:, None]
        return np.column_stack([onehot, num, den, wbar * wl.rewards, wbar])

    def finalize(self, sums, n):
        G = len(self.partition.groups)
        count, num, den = sums[:G], sums[G:2 * G], sums[2 * G:3 * G]
        total = 0.0
        global_value = None
        for c, a, b in zip(count, num, den):
            if c == 0:
                continue
            if b > 0:
                total += c / n * (a / b)
            else:
                if global_value is None:
                    global_value = _ratio(sums[3 * G], sums[3 * G + 1])
                total += c / n * global_value
        return total


@dataclass(frozen=True, eq=False)
class PointNCIS(Estimator):
    """CIS with a per-context Midzuno-Sen normalizer.

    Only rows with nonzero reward and nonzero capped weight need the
    Monte-Carlo step. Row ``i`` of the log uses stream ``derive(stream, i)``.
    With ``adaptive``, each such row's capping value is first lowered by
    :func:`shrink_capping_batch` (max mode only).
    """

    capping: CappingRule = None
    n_mc: int = DEFAULT_N_MC
    stream: RandomStream = field(default_factory=lambda: RandomStream(0))
    adaptive: bool = False
    probe_samples: int = 1000
    budget: int = ACCEPT_BUDGET
    logging: RankingPolicy | None = None
    name: str = "point-ncis"

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValidationError(f"n_mc must be >= 1, got {self.n_mc}")
        if self.adaptive and self.capping.mode != "max":
            raise ValidationError("adaptive capping requires max capping")

    def columns(self, wl):
        logging = self.logging or wl.logging
        if logging is None:
            raise ValidationError("PointNCIS needs the logging policy to evaluate sampled rankings")
        out = np.zeros(len(wl.rewards))
        rows = np.flatnonzero(wl.rewards != 0)
        if self.adaptive:
            c = np.full(len(rows), self.capping.c)
            if len(rows):
                keys = child_keys(self.stream.row_keys(wl.indices[rows]), 3)
                c = shrink_capping_batch(wl.target, logging, wl.data.contexts.take(rows),
                                         self.capping.c, self.probe_samples, keys)
        else:
            c = self.capping.c
        wbar = capped_weights(wl.w[rows], self.capping.mode, c)
        keep = wbar != 0
        rows, wbar = rows[keep], wbar[keep]
        c = c[keep] if np.ndim(c) else c
        if len(rows):
            ip, _ = inverse_mass_batch(wl.target, logging, wl.data.contexts.take(rows),
                                       self.capping.mode, c, self.n_mc,
                                       self.stream.row_keys(wl.indices[rows]), self.budget)
            out[rows] = ip * wbar * wl.rewards[rows]
        return out[:, None]

    def finalize(self, sums, n):
        return sums[0] / n


@dataclass(frozen=True, eq=False)
class DR(Estimator):
    """Doubly robust: mean of ``(r - rbar(a,x)) w + E_t[rbar(A,x) | x]``.

    The inner expectation is exact when a context has at most
    ``enumeration_cap`` rankings and a ``mc_samples`` Monte-Carlo average
    (row stream ``derive(stream, i)``) otherwise.
    """

    reward_model: RewardModel = None
    mc_samples: int = 100
    stream: RandomStream = field(default_factory=lambda: RandomStream(0))
    enumeration_cap: int = ENUMERATION_CAP
    name: str = "dr"

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValidationError(f"mc_samples must be >= 1, got {self.mc_samples}")

    def columns(self, wl):
        data = wl.data
        rbar = np.asarray(self.reward_model.predict(data.contexts, data.actions), dtype=np.float64)
        q = _expected_model_reward(wl.target, data.contexts, self.reward_model, self.mc_samples,
                                   self.stream.row_keys(wl.indices), self.enumeration_cap)
        return ((wl.rewards - rbar) * wl.w + q)[:, None]

    def finalize(self, sums, n):
        return sums[0] / n


@dataclass(frozen=True)
class OnPolicyMean(Estimator):
    """Empirical mean reward of the log (the logging policy's value)."""

    name: str = "on-policy"

    def columns(self, wl):
        return wl.rewards[:, None]

    def finalize(self, sums, n):
        return sums[0] / n


def _expected_model_reward(policy, contexts, model, mc_samples, keys, cap):
    n = len(contexts)
    out = np.empty(n)
    m_all = contexts.n_eligible
    z_all = policy.logits(contexts)
    for m in np.unique(m_all):
        rows = np.flatnonzero(m_all == m)
        if n_rankings(int(m), policy.k) <= cap:
            cols = ranking_columns(int(m), policy.k)
            P = len(cols)
            step = max(1, 2_000_000 // (P * max(contexts.width, 1)))
            for s in range(0, len(rows), step):
                r = rows[s:s + step]
                z = np.repeat(z_all[r], P, axis=0)
                tiled = np.tile(cols, (len(r), 1))
                p = np.exp(plackett_luce_logprob(z, tiled))
                items = np.take_along_axis(np.repeat(contexts.eligible[r], P, axis=0), tiled, axis=1)
                pred = model.predict(contexts.take(np.repeat(r, P)), items)
                out[r] = (p * pred).reshape(len(r), P).sum(axis=1)
        else:
            for s in range(0, len(rows), 4096):
                r = rows[s:s + 4096]
                ctx = contexts.take(np.repeat(r, mc_samples))
                draws = np.tile(np.arange(mc_samples), len(r))
                items = sample_batch(policy, ctx, np.repeat(keys[r], mc_samples), draws)
                out[r] = np.asarray(model.predict(ctx, items)).reshape(len(r), mc_samples).mean(axis=1)
    return out


# --------------------------------------------------------------------------
# evaluation driver


def _chunk_columns(estimators, data, target, logging, chunk_size, threads):
    def work(item):
        start, chunk = item
        wl = WeightedLog.build(chunk, target, logging, offset=start)
        return wl, [np.asarray(e.columns(wl), dtype=np.float64) for e in estimators]

    chunks = list(data.chunks(chunk_size))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    return results


def fold(estimator: Estimator, data: LogDataset, target: RankingPolicy,
         logging: RankingPolicy | None = None, chunk_size: int = CHUNK_SIZE) -> Aggregate:
    """Fold an estimator over ``data`` in chunks and merge the partial sums."""
    agg = None
    for start, chunk in data.chunks(chunk_size):
        wl = WeightedLog.build(chunk, target, logging, offset=start)
        part = Aggregate(len(chunk), np.asarray(estimator.columns(wl), dtype=np.float64).sum(axis=0))
        agg = part if agg is None else agg.merge(part)
    return agg


def _bootstrap_sums(columns: np.ndarray, n_bootstrap: int, stream: RandomStream, threads: int):
    """Resampled column sums; ``columns`` holds one estimator column per row."""
    n = columns.shape[1]

    def one(b):
        idx = stream.derive(b).generator().integers(0, n, size=n)
        counts = np.bincount(idx, minlength=n).astype(np.float64)
        return np.array([np.dot(row, counts) for row in columns])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, range(n_bootstrap))))
    return np.array([one(b) for b in range(n_bootstrap)])


def _safe_finalize(est, sums, n):
    try:
        return est.finalize(sums, n)
    except UndefinedEstimateError:
        return np.nan


def evaluate(data: LogDataset, target: RankingPolicy, estimators: Sequence[Estimator], *,
             logging: RankingPolicy | None = None, n_bootstrap: int = DEFAULT_BOOTSTRAP,
             seed: int = 0, confidence: float = DEFAULT_CONFIDENCE, uplift: bool = False,
             chunk_size: int = CHUNK_SIZE, threads: int = 1) -> list[EstimatorReport]:
    """Run several estimators over one log with shared bootstrap resamples.

    With ``uplift=True`` every report is for ``estimate - mean(reward)``, the
    offline uplift against the logging policy, bootstrapped jointly.
    ``logging=None`` uses the logged propensities for the weights.
    Results are identical for any ``threads``.
    """
    if len(data) == 0:
        raise ValidationError("cannot estimate on an empty dataset")
    estimators = list(estimators)
    baseline = OnPolicyMean()
    everyone = estimators + [baseline]
    results = _chunk_columns(everyone, data, target, logging, chunk_size, threads)

    widths = [r.shape[1] for r in results[0][1]]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    # one contiguous row per column: sums depend neither on chunking nor on column position
    columns = np.ascontiguousarray(np.concatenate([np.concatenate(cols, axis=1) for _, cols in results]).T)
    sums = np.array([row.sum() for row in columns])
    n = len(data)
    log_w = np.concatenate([wl.log_w for wl, _ in results])
    w = np.exp(log_w)

    def values(s):
        base = s[offsets[-2]:offsets[-1]][0] / n if uplift else 0.0
        return np.array([_safe_finalize(e, s[offsets[i]:offsets[i + 1]], n) - base
                         for i, e in enumerate(estimators)])

    point = np.array([e.finalize(sums[offsets[i]:offsets[i + 1]], n) for i, e in enumerate(estimators)])
    if uplift:
        point = point - sums[offsets[-2]] / n

    if n_bootstrap > 0:
        boot_stream = RandomStream(seed).derive(0)
        boot = np.array([values(s) for s in _bootstrap_sums(columns, n_bootstrap, boot_stream, threads)])
        alpha = 1.0 - confidence
        with np.errstate(all="ignore"):
            lo = np.nanquantile(boot, alpha / 2, axis=0) if np.isfinite(boot).any() else point
            hi = np.nanquantile(boot, 1 - alpha / 2, axis=0) if np.isfinite(boot).any() else point
        lo = np.where(np.isnan(lo), point, lo)
        hi = np.where(np.isnan(hi), point, hi)
    else:
        lo = hi = point

    reports = []
    for i, e in enumerate(estimators):
        wts = w if e.capping is None else e.capping.apply(w)
        frac = float(np.mean(is_capped(w, e.capping.mode, e.capping.c))) if e.capping is not None else 0.0
        reports.append(EstimatorReport(
            estimate=float(point[i]), ci_low=float(min(lo[i], point[i])), ci_high=float(max(hi[i], point[i])),
            n_used=n, capped_fraction=frac, sum_weights=float(np.sum(wts)), estimator_name=e.name))
    return reports


# --------------------------------------------------------------------------
# one-estimator entry points


def _single(estimator, data, target, logging=None, **kw) -> EstimatorReport:
    return evaluate(data, target, [estimator], logging=logging, **kw)[0]


def estimate_is(data, target, logging=None, **kw) -> EstimatorReport:
    """Importance sampling; ``logging=None`` uses the logged propensities."""
    return _single(IS(), data, target, logging, **kw)


def estimate_nis(data, target, logging=None, **kw) -> EstimatorReport:
    return _single(NIS(), data, target, logging, **kw)


def estimate_dr(data, target, reward_model, mc_samples: int = 100, logging=None,
                stream: RandomStream | None = None, **kw) -> EstimatorReport:
    est = DR(reward_model, mc_samples, stream or RandomStream(kw.get("seed", 0)).derive(1))
    return _single(est, data, target, logging, **kw)


def estimate_cis(data, target, capping: CappingRule, logging=None, **kw) -> EstimatorReport:
    return _single(CIS(capping), data, target, logging, **kw)


def estimate_ncis(data, target, capping: CappingRule, logging=None, **kw) -> EstimatorReport:
    return _single(NCIS(capping), data, target, logging, **kw)


def estimate_piece_ncis(data, target, capping: CappingRule, partition: Partition,
                        logging=None, **kw) -> EstimatorReport:
    return _single(PieceNCIS(capping, partition), data, target, logging, **kw)


def estimate_point_ncis(data, target, capping: CappingRule, logging: RankingPolicy,
                        n_mc: int = DEFAULT_N_MC, adaptive: bool = False,
                        stream: RandomStream | None = None, logged_weights: bool = True,
                        **kw) -> EstimatorReport:
    """PointNCIS. The logging policy is needed for the Monte-Carlo step;
    with ``logged_weights`` the sample weights still come from the log.
    """
    est = PointNCIS(capping, n_mc, stream or RandomStream(kw.get("seed", 0)).derive(2), adaptive,
                    logging=logging)
    return _single(est, data, target, None if logged_weights else logging, **kw)


def make_estimator(name: str, *, capping: CappingRule | None = None, partition: Partition | None = None,
                   n_mc: int = DEFAULT_N_MC, stream: RandomStream | None = None,
                   adaptive: bool = False, reward_model=None, mc_samples: int = 100,
                   logging: RankingPolicy | None = None) -> Estimator:
    stream = stream or RandomStream(0)
    if name == "is":
        return IS()
    if name == "nis":
        return NIS()
    if name == "dr":
        if reward_model is None:
            raise ValidationError("dr needs a reward model")
        return DR(reward_model, mc_samples, stream.derive(1))
    if capping is None:
        raise ValidationError(f"{name} needs a capping rule")
    if name == "cis":
        return CIS(capping)
    if name == "ncis":
        return NCIS(capping)
    if name == "piece-ncis":
        if partition is None:
            raise ValidationError("piece-ncis needs a partition")
        return PieceNCIS(capping, partition)
    if name == "point-ncis":
        return PointNCIS(capping, n_mc, stream.derive(2), adaptive, logging=logging)
    raise ValidationError(f"unknown estimator {name!r}")


# --------------------------------------------------------------------------
# capping diagnostics


def cis_bias_upper_bound(data: LogDataset, target: RankingPolicy, capping: CappingRule,
                         logging: RankingPolicy | None = None) -> float:
    """``r_max`` times the importance-sampling estimate of ``P_t(W capped)``."""
    w = WeightedLog.build(data, target, logging).w
    return float(data.r_max * np.mean(w * is_capped(w, capping.mode, capping.c)))


def capping_sweep(data: LogDataset, target: RankingPolicy, c_grid, mode: str = "max",
                  logging: RankingPolicy | None = None, confidence: float = DEFAULT_CONFIDENCE) -> list[dict]:
    """Variance, bias bound and capped fraction of CIS for each capping value.

    ``variance`` is the plug-in variance of ``capped(w) r`` divided by ``n``;
    ``ci_half_width`` is the matching normal-approximation half-width.
    """
    from scipy.stats import norm

    w = WeightedLog.build(data, target, logging).w
    r = data.rewards
    n = len(r)
    z = norm.ppf(0.5 + confidence / 2)
    rows = []
    for c in c_grid:
        rule = CappingRule(mode, c)
        x = rule.apply(w) * r
        capped = is_capped(w, mode, c)
        var = float(np.var(x) / n)
        rows.append({
            "c": float(c),
            "estimate": float(x.mean()),
            "variance": var,
            "ci_half_width": float(z * math.sqrt(var)),
            "bias_bound": float(data.r_max * np.mean(w * capped)),
            "capped_fraction": float(capped.mean()),
        })
    return rows


def weight_quantiles(logging: RankingPolicy, target: RankingPolicy, contexts: ContextBatch,
                     quantiles=(0.1, 0.5, 0.9), stream: RandomStream | None = None,
                     draws_per_context: int = 1) -> list[dict]:
    """Quantiles of ``W`` when actions are drawn from the target policy."""
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or not len(q) or (np.diff(q) <= 0).any():
        raise ValidationError("quantiles must be a nonempty strictly increasing list")
    if (q < 0).any() or (q > 1).any():
        raise ValidationError("quantiles must lie in [0, 1]")
    stream = stream or RandomStream(0)
    ctx = contexts.repeat(draws_per_context)
    keys = stream.row_keys(np.arange(len(contexts))).repeat(draws_per_context)
    draws = np.tile(np.arange(draws_per_context), len(contexts))
    cols = gumbel_topk(target.logits(ctx), ctx.eligible, target.k, keys, draws)
    log_w = plackett_luce_logprob(target.logits(ctx), cols) - plackett_luce_logprob(logging.logits(ctx), cols)
    values = np.quantile(np.exp(log_w), q, method="inverted_cdf")
    return [{"quantile": float(a), "weight": float(b)} for a, b in zip(q, values)]


def shrink_capping_batch(target: RankingPolicy, logging: RankingPolicy, contexts: ContextBatch,
                         c: float, probe_samples: int, keys: np.ndarray, max_halvings: int = 64) -> np.ndarray:
    """Per-context max-capping values from the grid ``c, c/2, c/4, ...``.

    For each context, returns the largest grid value ``ct`` whose probe
    estimate of ``ct / E_p[min(W, ct) | x]`` is at most ``c``; the probe
    draws ``probe_samples`` rankings from the logging policy.
    """
    if probe_samples < 1:
        raise ValidationError("probe_samples must be >= 1")
    n = len(contexts)
    ctx = contexts.repeat(probe_samples)
    zp, zt = logging.logits(ctx), target.logits(ctx)
    cols = gumbel_topk(zp, ctx.eligible, logging.k, np.repeat(np.asarray(keys, np.uint64), probe_samples),
                       np.tile(np.arange(probe_samples), n))
    w = np.exp(plackett_luce_logprob(zt, cols) - plackett_luce_logprob(zp, cols)).reshape(n, probe_samples)
    out = np.full(n, np.nan)
    todo = np.arange(n)
    for j in range(max_halvings + 1):
        ct = c * 0.5**j
        mean = np.minimum(w[todo], ct).mean(axis=1)
        ok = ct / mean <= c
        out[todo[ok]] = ct
        todo = todo[~ok]
        if not len(todo):
            return out
    raise DegenerateOverlapError(f"probe budget exhausted after {max_halvings} halvings",
                                 context_id=int(contexts.ids[todo[0]]))


def shrink_capping(context, target: RankingPolicy, logging: RankingPolicy, capping: CappingRule,
                   probe_samples: int = 1000, rng: RandomStream | None = None) -> CappingRule:
    """Lower a max-capping value until effective weights stay below it (one context)."""
    if capping.mode != "max":
        raise ValidationError("shrink_capping only applies to max capping")
    rng = rng or RandomStream(0)
    ct = shrink_capping_batch(target, logging, as_batch(context), capping.c, probe_samples,
                              np.array([rng.key], dtype=np.uint64))
    return CappingRule("max", float(ct[0]))
