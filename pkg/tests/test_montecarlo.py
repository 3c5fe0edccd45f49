import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from conftest import context, random_policy, two_action
from offab.capping import CappingRule, capped_ratio
from offab.errors import DegenerateOverlapError, ValidationError
from offab.montecarlo import combine_ratios, inverse_mass_batch, midzuno_sen_inverse, size_biased_first
from offab.oracle import EnumerableInstance, inverse_mass
from offab.policy import ContextBatch, enumerate_log_probs
from offab.streams import RandomStream

# two-action chain: pi_t = (0.4, 0.6), max capping at 1 -> v = (1, 2/3), E[v] = 0.8
EXACT_TWO_ACTION = 1 / (0.4 * 1.0 + 0.6 * (2 / 3))


def batch_estimates(target, logging, x, capping, n_mc, reps, seed):
    batch = ContextBatch.from_contexts([x]).repeat(reps)
    values, _ = inverse_mass_batch(target, logging, batch, capping.mode, capping.c, n_mc,
                                   RandomStream(seed).row_keys(np.arange(reps)))
    return values


def test_exact_one_when_capping_never_binds(rng):
    t, p = random_policy(rng, 4, k=2), random_policy(rng, 4, k=2)
    est = midzuno_sen_inverse(t, p, context(4), CappingRule("max", 1e12), 7, RandomStream(1))
    assert est.value == 1.0 and est.acceptance_trials == 1 and est.n_mc == 7


def test_two_action_oracle_by_hand():
    logging, target, x = two_action(0.6)
    inst = EnumerableInstance(ContextBatch.from_contexts([x]), [1.0], lambda c, a: np.zeros(len(a)), logging)
    assert inverse_mass(inst, target, CappingRule("max", 1.0))[0] == pytest.approx(1.25, rel=1e-12)
    assert EXACT_TWO_ACTION == pytest.approx(1.25, rel=1e-15)


@pytest.mark.parametrize("n_mc,tol", [(10, 0.005), (1, 0.005)])
def test_two_action_mean(n_mc, tol):
    logging, target, x = two_action(0.6)
    v = batch_estimates(target, logging, x, CappingRule("max", 1.0), n_mc, 100_000, 31 + n_mc)
    assert abs(v.mean() / EXACT_TWO_ACTION - 1) < tol


def _instance(seed):
    g = np.random.default_rng(seed)
    t, p = random_policy(g, 4, k=2, scale=1.0), random_policy(g, 4, k=2, scale=1.0)
    x = context(4, features=(0.5,))
    return t, p, x, EnumerableInstance(ContextBatch.from_contexts([x]), [1.0], lambda c_, a: np.zeros(len(a)), p)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.2, 4.0), st.sampled_from([1, 5]))
def test_unbiased_on_enumerable_instances_max_mode(seed, c, n_mc):
    t, p, x, inst = _instance(seed)
    cap = CappingRule("max", c)
    exact = inverse_mass(inst, t, cap)[0]
    v = batch_estimates(t, p, x, cap, n_mc, 100_000, seed)
    sem = v.std(ddof=1) / np.sqrt(len(v))
    assert abs(v.mean() - exact) <= 3 * sem + 1e-12


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.2, 4.0), st.sampled_from([1, 5]))
def test_zero_mode_expectation_carries_all_zero_factor(seed, c, n_mc):
    # v is 0 on capped rankings; the size-biased draw then yields
    # E[n / sum v] = (1 - q^n) / E[v] with q = P_t(v = 0)
    t, p, x, inst = _instance(seed)
    cap = CappingRule("zero", c)
    items, lt = enumerate_log_probs(t, x)
    _, lp = enumerate_log_probs(p, x)
    v = capped_ratio(lt - lp, "zero", c)
    mass = np.exp(lt) @ v
    if mass < 0.05:
        return
    q = np.exp(lt) @ (v == 0)
    expected = (1 - q ** n_mc) / mass
    est = batch_estimates(t, p, x, cap, n_mc, 100_000, seed)
    sem = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - expected) <= 3 * sem + 1e-12


def test_accepted_first_action_is_size_biased():
    g = np.random.default_rng(4)
    t, p = random_policy(g, 4, k=2, scale=1.2), random_policy(g, 4, k=2, scale=1.2)
    x = context(4)
    cap = CappingRule("max", 1.5)
    items, lt = enumerate_log_probs(t, x)
    _, lp = enumerate_log_probs(p, x)
    target_mass = np.exp(lt) * capped_ratio(lt - lp, cap.mode, cap.c)
    n = 100_000
    batch = ContextBatch.from_contexts([x]).repeat(n)
    first, v1 = size_biased_first(t, p, batch, cap.mode, cap.c, RandomStream(77).row_keys(np.arange(n)))
    index = {tuple(r): j for j, r in enumerate(items.tolist())}
    counts = np.bincount([index[tuple(r)] for r in first.tolist()], minlength=len(items))
    assert chisquare(counts, n * target_mass / target_mass.sum()).pvalue > 1e-3
    assert (v1 > 0).all()


@given(st.floats(0.01, 1.0), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.randoms())
def test_combination_ignores_draw_order(v1, rest, rnd):
    shuffled = list(rest)
    rnd.shuffle(shuffled)
    a = combine_ratios(np.array([v1]), np.array([rest]))
    b = combine_ratios(np.array([v1]), np.array([shuffled]))
    assert a[0] == b[0]


def test_budget_exhaustion_names_context():
    # zero capping below every weight: no ranking can ever be accepted
    logging, target, _ = two_action(0.6)
    x = context(2, cid=17)
    with pytest.raises(DegenerateOverlapError) as err:
        midzuno_sen_inverse(target, logging, x, CappingRule("zero", 0.1), 3, RandomStream(0), budget=50)
    assert err.value.context_id == 17


def test_n_mc_must_be_positive():
    logging, target, x = two_action()
    with pytest.raises(ValidationError):
        midzuno_sen_inverse(target, logging, x, CappingRule("max", 1.0), 0, RandomStream(0))


def test_same_stream_same_value():
    logging, target, x = two_action()
    cap = CappingRule("max", 1.0)
    a = midzuno_sen_inverse(target, logging, x, cap, 10, RandomStream(8, (3,)))
    b = midzuno_sen_inverse(target, logging, x, cap, 10, RandomStream(8, (3,)))
    assert a == b
