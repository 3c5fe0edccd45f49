"""Midzuno-Sen estimate of the inverse capped mass ``1 / E_t[capped(W)/W | x]``.

For one context, with ``v(a) = capped(w(a)) / w(a)``:

1. draw ``a ~ pi_t`` and ``u ~ U(0, 1)`` jointly until ``u <= v(a)``; keep ``v_1 = v(a)``
   (a size-biased draw);
2. draw ``a_2 .. a_n`` i.i.d. from ``pi_t``;
3. return ``n / (v_1 + ... + v_n)``.

The returned value is an unbiased estimate of ``1 / E_t[v(A) | x]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capping import CappingRule, capped_ratio
from .errors import DegenerateOverlapError, ValidationError
from .policy import Context, ContextBatch, RankingPolicy, as_batch, gumbel_topk, plackett_luce_logprob
from .streams import RandomStream, child_keys, counter_uniform, derive

__all__ = ["InverseMassEstimate", "RandomStream", "combine_ratios", "derive", "inverse_mass_batch",
           "midzuno_sen_inverse", "size_biased_first"]

ACCEPT_BUDGET = 10_000
_ROW_CHUNK = 4096


@dataclass(frozen=True)
class InverseMassEstimate:
    value: float
    n_mc: int
    acceptance_trials: int


def _log_weights(zt, zp, cols):
    return plackett_luce_logprob(zt, cols) - plackett_luce_logprob(zp, cols)


def _size_biased_first(zt, zp, tiebreak, k, mode, c, keys, budget, ids):
    n = len(zt)
    action_keys = child_keys(keys, 0)
    accept_keys = child_keys(keys, 1)
    v1 = np.zeros(n)
    first = np.zeros((n, k), dtype=np.int64)
    trials = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for attempt in range(budget):
        if not len(active):
            break
        cols = gumbel_topk(zt[active], tiebreak[active], k, action_keys[active], attempt)
        v = capped_ratio(_log_weights(zt[active], zp[active], cols), mode, c[active])
        u = counter_uniform(accept_keys[active], attempt)
        ok = u <= v
        trials[active] += 1
        v1[active[ok]] = v[ok]
        first[active[ok]] = cols[ok]
        active = active[~ok]
    if len(active):
        raise DegenerateOverlapError(
            f"acceptance loop exceeded {budget} iterations", context_id=int(ids[active[0]]))
    return v1, trials, first


def _iid_ratios(zt, zp, tiebreak, k, mode, c, keys, n_draws):
    n, width = zt.shape
    if n_draws == 0:
        return np.zeros((n, 0))
    draw_keys = np.repeat(child_keys(keys, 2), n_draws)
    draws = np.tile(np.arange(n_draws), n)
    zt_rep = np.repeat(zt, n_draws, axis=0)
    zp_rep = np.repeat(zp, n_draws, axis=0)
    cols = gumbel_topk(zt_rep, np.repeat(tiebreak, n_draws, axis=0), k, draw_keys, draws)
    v = capped_ratio(_log_weights(zt_rep, zp_rep, cols), mode, np.repeat(c, n_draws))
    return v.reshape(n, n_draws)


def combine_ratios(v1: np.ndarray, rest: np.ndarray) -> np.ndarray:
    """``n / (v_1 + sum(rest))`` per row; the sum runs over sorted ``rest``
    so the result does not depend on the order of the i.i.d. draws."""
    rest = np.asarray(rest, dtype=np.float64)
    return (rest.shape[1] + 1) / (np.asarray(v1, dtype=np.float64) + np.sort(rest, axis=1).sum(axis=1))


def size_biased_first(target: RankingPolicy, logging: RankingPolicy, contexts: ContextBatch, mode: str, c,
                      keys: np.ndarray, budget: int = ACCEPT_BUDGET) -> tuple[np.ndarray, np.ndarray]:
    """Accepted first rankings (item ids) and their ratios ``v_1``."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(len(contexts))
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (len(contexts),))
    v1, _, cols = _size_biased_first(target.logits(contexts), logging.logits(contexts), contexts.eligible,
                                     target.k, mode, c, keys, budget, contexts.ids)
    return np.take_along_axis(contexts.eligible, cols, axis=1), v1


def inverse_mass_batch(target: RankingPolicy, logging: RankingPolicy, contexts: ContextBatch,
                       mode: str, c, n_mc: int, keys: np.ndarray, budget: int = ACCEPT_BUDGET):
    """Midzuno-Sen estimates for many contexts at once.

    ``keys[i]`` is the stream key of row ``i``; ``c`` is a scalar or a
    per-row array of capping values. Returns ``(values, acceptance_trials)``.
    """
    if n_mc < 1:
        raise ValidationError(f"n_mc must be >= 1, got {n_mc}")
    n = len(contexts)
    keys = np.asarray(keys, dtype=np.uint64).reshape(n)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n,))
    values = np.empty(n)
    trials = np.empty(n, dtype=np.int64)
    chunk = max(1, _ROW_CHUNK * 64 // (n_mc * max(contexts.width, 1)))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        ctx = contexts.take(sl)
        zt, zp = target.logits(ctx), logging.logits(ctx)
        v1, tr, _ = _size_biased_first(zt, zp, ctx.eligible, target.k, mode, c[sl], keys[sl], budget, ctx.ids)
        rest = _iid_ratios(zt, zp, ctx.eligible, target.k, mode, c[sl], keys[sl], n_mc - 1)
        values[sl] = combine_ratios(v1, rest)
        trials[sl] = tr
    return values, trials


def midzuno_sen_inverse(target: RankingPolicy, logging: RankingPolicy, context: Context,
                        capping: CappingRule, n_mc: int, rng: RandomStream,
                        budget: int = ACCEPT_BUDGET) -> InverseMassEstimate:
    """Unbiased estimate of ``1 / E_t[capped(W)/W | context]``."""
    batch = as_batch(context)
    values, trials = inverse_mass_batch(target, logging, batch, capping.mode, capping.c, n_mc,
                                        np.array([rng.key], dtype=np.uint64), budget)
    return InverseMassEstimate(float(values[0]), int(n_mc), int(trials[0]))
