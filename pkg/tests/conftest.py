import itertools
import math

import numpy as np
import pytest

from offab.policy import Context, ContextBatch, RankingPolicy


def context(m, segment=0, features=(0.0,), cid=0, items=None):
    return Context(cid, segment, tuple(features), tuple(range(m)) if items is None else tuple(items))


def random_policy(rng, n_items, k=1, n_features=1, n_segments=1, scale=1.0, temperature=1.0):
    return RankingPolicy(rng.normal(0, scale, size=(n_items, n_features)),
                         rng.normal(0, scale, size=(n_segments, n_items)), temperature, k)


def offsets_policy(probs, k=1):
    """Single-segment policy whose top-1 probabilities are ``probs``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    return RankingPolicy(np.zeros((probs.shape[1], 1)), np.log(probs), 1.0, k)


def two_action(p=0.6):
    """pi_p(a0) = p and pi_t(a0) = 1 - p over two single-slot actions."""
    return offsets_policy([p, 1 - p]), offsets_policy([1 - p, p]), context(2)


def brute_pl(scores, ranking):
    """Plackett-Luce probability by the textbook product, in plain Python."""
    remaining = list(range(len(scores)))
    prob = 1.0
    for item in ranking:
        prob *= math.exp(scores[item]) / sum(math.exp(scores[j]) for j in remaining)
        remaining.remove(item)
    return prob


def all_rankings(m, k):
    return list(itertools.permutations(range(m), k))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
