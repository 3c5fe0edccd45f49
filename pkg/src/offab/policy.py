"""Contexts, top-K ranking actions and Plackett-Luce ranking policies.

Everything is computed in the log domain. Batched entry points
(``*_batch``) work on :class:`ContextBatch`, a columnar view in which each
row's eligible items are stored in a ``-1``-padded integer matrix.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegeneratePolicyError, UndefinedScoreError, ValidationError
from .streams import ITEM_STRIDE, RandomStream, counter_uniform

PAD = -1


@dataclass(frozen=True)
class Context:
    id: int
    segment: int
    features: tuple[float, ...]
    eligible_items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(f) for f in self.features))
        object.__setattr__(self, "eligible_items", tuple(int(i) for i in self.eligible_items))
        if not self.eligible_items:
            raise ValidationError(f"context {self.id} has no eligible items")
        if len(set(self.eligible_items)) != len(self.eligible_items):
            raise ValidationError(f"context {self.id} has duplicate eligible items")
        if min(self.eligible_items) < 0:
            raise ValidationError(f"context {self.id}: item ids must be nonnegative")


@dataclass(frozen=True)
class RankedAction:
    items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True, eq=False)
class ContextBatch:
    """Columnar storage for many contexts."""

    ids: np.ndarray
    segments: np.ndarray
    features: np.ndarray
    eligible: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = len(ids)
        segments = np.asarray(self.segments, dtype=np.int64).reshape(n)
        features = np.asarray(self.features, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, 0))
        eligible = np.asarray(self.eligible, dtype=np.int64).reshape(n, -1) if n else np.zeros((0, 1), np.int64)
        for name, value in [("ids", ids), ("segments", segments), ("features", features), ("eligible", eligible)]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.ids)

    @property
    def width(self) -> int:
        return self.eligible.shape[1]

    @property
    def n_eligible(self) -> np.ndarray:
        return (self.eligible != PAD).sum(axis=1)

    def __getitem__(self, i: int) -> Context:
        row = self.eligible[i]
        return Context(int(self.ids[i]), int(self.segments[i]), tuple(self.features[i]), tuple(row[row != PAD]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, index) -> "ContextBatch":
        return ContextBatch(self.ids[index], self.segments[index], self.features[index], self.eligible[index])

    def repeat(self, times: int) -> "ContextBatch":
        return self.take(np.repeat(np.arange(len(self)), times))

    def validate(self) -> None:
        if len(self) == 0:
            return
        valid = self.eligible != PAD
        if not valid.any(axis=1).all():
            bad = self.ids[~valid.any(axis=1)]
            raise ValidationError(f"contexts without eligible items: {bad[:10].tolist()}")
        if (self.eligible < PAD).any():
            raise ValidationError("item ids must be nonnegative")
        srt = np.sort(self.eligible, axis=1)
        dup = ((srt[:, 1:] == srt[:, :-1]) & (srt[:, 1:] != PAD)).any(axis=1)
        if dup.any():
            raise ValidationError(f"duplicate eligible items in contexts {self.ids[dup][:10].tolist()}")

    @classmethod
    def from_contexts(cls, contexts: Sequence[Context]) -> "ContextBatch":
        contexts = list(contexts)
        n = len(contexts)
        width = max((len(c.eligible_items) for c in contexts), default=1)
        d = len(contexts[0].features) if contexts else 0
        eligible = np.full((n, width), PAD, dtype=np.int64)
        for r, c in enumerate(contexts):
            if len(c.features) != d:
                raise ValidationError("feature length must be constant within a batch")
            eligible[r, : len(c.eligible_items)] = c.eligible_items
        features = np.array([c.features for c in contexts], dtype=np.float64).reshape(n, d)
        return cls(
            np.array([c.id for c in contexts], dtype=np.int64),
            np.array([c.segment for c in contexts], dtype=np.int64),
            features,
            eligible,
        )

    @classmethod
    def concat(cls, batches: Iterable["ContextBatch"]) -> "ContextBatch":
        batches = list(batches)
        width = max(b.width for b in batches)
        eligible = [np.pad(b.eligible, ((0, 0), (0, width - b.width)), constant_values=PAD) for b in batches]
        return cls(
            np.concatenate([b.ids for b in batches]),
            np.concatenate([b.segments for b in batches]),
            np.concatenate([b.features for b in batches]),
            np.concatenate(eligible),
        )


def as_batch(context: Context | ContextBatch) -> ContextBatch:
    return context if isinstance(context, ContextBatch) else ContextBatch.from_contexts([context])


@dataclass(frozen=True, eq=False)
class RankingPolicy:
    """Plackett-Luce distribution over top-``k`` rankings.

    The score of item ``i`` in context ``x`` is
    ``item_weights[i] @ x.features + segment_offsets[x.segment, i]``;
    rankings are drawn by sequential softmax over ``score / temperature``.
    """

    item_weights: np.ndarray
    segment_offsets: np.ndarray
    temperature: float = 1.0
    k: int = 1

    def __post_init__(self):
        weights = np.array(self.item_weights, dtype=np.float64, ndmin=2)
        offsets = np.array(self.segment_offsets, dtype=np.float64, ndmin=2)
        if offsets.shape[1] != weights.shape[0]:
            raise ValidationError("segment_offsets must have one column per item")
        if not (np.isfinite(weights).all() and np.isfinite(offsets).all()):
            raise ValidationError("policy parameters must be finite")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if int(self.k) < 1:
            raise ValidationError(f"k must be positive, got {self.k}")
        weights.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "item_weights", weights)
        object.__setattr__(self, "segment_offsets", offsets)
        object.__setattr__(self, "temperature", float(self.temperature))
        object.__setattr__(self, "k", int(self.k))

    @property
    def n_items(self) -> int:
        return self.item_weights.shape[0]

    @property
    def n_segments(self) -> int:
        return self.segment_offsets.shape[0]

    @property
    def n_features(self) -> int:
        return self.item_weights.shape[1]

    def replace(self, **changes) -> "RankingPolicy":
        params = dict(item_weights=self.item_weights, segment_offsets=self.segment_offsets,
                      temperature=self.temperature, k=self.k)
        params.update(changes)
        return RankingPolicy(**params)

    def scores(self, contexts: ContextBatch) -> np.ndarray:
        """Raw scores, shape ``(n, width)``; padding slots are ``-inf``."""
        valid = contexts.eligible != PAD
        bad = (contexts.segments < 0) | (contexts.segments >= self.n_segments)
        bad |= ((contexts.eligible >= self.n_items) & valid).any(axis=1)
        if contexts.features.shape[1] != self.n_features and len(contexts):
            raise ValidationError(
                f"policy expects {self.n_features} features, contexts have {contexts.features.shape[1]}")
        if bad.any():
            raise UndefinedScoreError(contexts.ids[bad])
        items = np.where(valid, contexts.eligible, 0)
        base = contexts.features @ self.item_weights.T
        s = np.take_along_axis(base, items, axis=1) + self.segment_offsets[contexts.segments[:, None], items]
        return np.where(valid, s, -np.inf)

    def logits(self, contexts: ContextBatch) -> np.ndarray:
        return self.scores(contexts) / self.temperature

    def to_dict(self) -> dict:
        return {
            "family": "plackett-luce",
            "k": self.k,
            "temperature": self.temperature,
            "item_weights": self.item_weights.tolist(),
            "segment_offsets": self.segment_offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "RankingPolicy":
        family = spec.get("family", "plackett-luce")
        if family != "plackett-luce":
            raise ValidationError(f"unsupported policy family {family!r}")
        try:
            return cls(
                item_weights=spec["item_weights"],
                segment_offsets=spec["segment_offsets"],
                temperature=spec.get("temperature", 1.0),
                k=spec["k"],
            )
        except KeyError as exc:
            raise ValidationError(f"policy spec is missing field {exc.args[0]!r}") from None


def save_policy(policy: RankingPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=2) + "\n")


def load_policy(path) -> RankingPolicy:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return RankingPolicy.from_dict(spec)


@dataclass(frozen=True)
class ImportanceWeight:
    value: float
    log_p_target: float
    log_p_logging: float


# --------------------------------------------------------------------------
# batched kernels


def action_columns(contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
    """Column index of every action item in its context's eligible row.

    Raises :class:`ValidationError` for duplicate or ineligible items.
    """
    actions = np.asarray(actions, dtype=np.int64)
    if actions.ndim != 2 or len(actions) != len(contexts):
        raise ValidationError("actions must have shape (n, k) matching the contexts")
    if actions.shape[1] > 1:
        srt = np.sort(actions, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if dup.any():
            raise ValidationError(f"duplicate items in actions for contexts {contexts.ids[dup][:10].tolist()}")
    eq = (contexts.eligible[:, None, :] == actions[:, :, None]) & (actions[:, :, None] >= 0)
    found = eq.any(axis=2)
    if not found.all():
        bad = ~found.all(axis=1)
        raise ValidationError(f"ineligible items in actions for contexts {contexts.ids[bad][:10].tolist()}")
    return eq.argmax(axis=2)


def plackett_luce_logprob(z: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Log-probability of placing columns ``cols`` (n, k) in order, given logits ``z``."""
    z = np.array(z, dtype=np.float64, copy=True)
    rows = np.arange(len(z))
    out = np.zeros(len(z))
    for j in range(cols.shape[1]):
        m = z.max(axis=1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
        out += z[rows, cols[:, j]] - lse
        z[rows, cols[:, j]] = -np.inf
    return out


def gumbel_topk(z: np.ndarray, tiebreak: np.ndarray, k: int, keys: np.ndarray, draw) -> np.ndarray:
    """Columns of the ``k`` largest ``z + Gumbel`` per row.

    ``keys`` (n,) are per-row stream keys; ``draw`` (scalar or (n,)) selects
    which block of counters is used, so draw ``j`` of row ``i`` depends only
    on ``(keys[i], j)``. Exact ties fall back to ``tiebreak`` (item ids).
    """
    n, width = z.shape
    draw = np.broadcast_to(np.asarray(draw, dtype=np.int64), (n,))
    counters = draw[:, None].astype(np.uint64) * np.uint64(ITEM_STRIDE) + np.arange(width, dtype=np.uint64)
    u = counter_uniform(keys[:, None], counters)
    perturbed = z - np.log(-np.log(u))
    order = np.lexsort((tiebreak, -perturbed), axis=1)
    return order[:, :k]


def log_prob_batch(policy: RankingPolicy, contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
    cols = action_columns(contexts, actions)
    if cols.shape[1] != policy.k:
        raise ValidationError(f"actions have length {cols.shape[1]}, policy k={policy.k}")
    return plackett_luce_logprob(policy.logits(contexts), cols)


def sample_batch(policy: RankingPolicy, contexts: ContextBatch, keys: np.ndarray, draw=0) -> np.ndarray:
    """Draw one ranking per row; returns item ids, shape ``(n, k)``."""
    if (contexts.n_eligible < policy.k).any():
        raise ValidationError(f"some contexts have fewer than k={policy.k} eligible items")
    cols = gumbel_topk(policy.logits(contexts), contexts.eligible, policy.k, np.asarray(keys, np.uint64), draw)
    return np.take_along_axis(contexts.eligible, cols, axis=1)


def importance_log_weights(target: RankingPolicy, logging: RankingPolicy,
                           contexts: ContextBatch, actions: np.ndarray) -> np.ndarray:
    cols = action_columns(contexts, actions)
    lt = plackett_luce_logprob(target.logits(contexts), cols)
    lp = plackett_luce_logprob(logging.logits(contexts), cols)
    if not (np.isfinite(lt).all() and np.isfinite(lp).all()):
        raise DegeneratePolicyError("non-finite log-probability")
    return lt - lp


# --------------------------------------------------------------------------
# single-context API


def log_prob(policy: RankingPolicy, context: Context, action: RankedAction) -> float:
    return float(log_prob_batch(policy, as_batch(context), np.array([action.items]))[0])


def sample(policy: RankingPolicy, context: Context, rng: RandomStream) -> RankedAction:
    batch = as_batch(context)
    items = sample_batch(policy, batch, np.array([rng.key], dtype=np.uint64))
    return RankedAction(tuple(items[0]))


def importance_weight(target: RankingPolicy, logging: RankingPolicy,
                      context: Context, action: RankedAction) -> ImportanceWeight:
    batch = as_batch(context)
    cols = action_columns(batch, np.array([action.items]))
    lt = float(plackett_luce_logprob(target.logits(batch), cols)[0])
    lp = float(plackett_luce_logprob(logging.logits(batch), cols)[0])
    if not (np.isfinite(lt) and np.isfinite(lp)):
        raise DegeneratePolicyError(f"non-finite log-probability for context {context.id}")
    return ImportanceWeight(float(np.exp(lt - lp)), lt, lp)


# --------------------------------------------------------------------------
# enumeration


def ranking_columns(m: int, k: int) -> np.ndarray:
    """All ordered top-``k`` selections of ``m`` columns, shape ``(m!/(m-k)!, k)``."""
    return np.array(list(itertools.permutations(range(m), k)), dtype=np.int64).reshape(-1, k)


def n_rankings(m: int, k: int) -> int:
    return int(np.prod(np.arange(m - k + 1, m + 1))) if k <= m else 0


def enumerate_log_probs(policy: RankingPolicy, context: Context) -> tuple[np.ndarray, np.ndarray]:
    """Every top-k ranking of ``context`` with its log-probability.

    Returns ``(items, logp)`` with ``items`` of shape ``(P, k)``.
    """
    batch = as_batch(context)
    m = int(batch.n_eligible[0])
    cols = ranking_columns(m, policy.k)
    z = np.repeat(policy.logits(batch)[:, :m], len(cols), axis=0)
    return batch.eligible[0, :m][cols], plackett_luce_logprob(z, cols)
