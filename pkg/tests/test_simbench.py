import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from offab.errors import ValidationError
from offab.estimators import EstimatorReport
from offab.oracle import inverse_mass, ncis_asymptotic_value, policy_value
from offab.policy import log_prob_batch
from offab.simbench import (DEFAULT_SUITE_TESTS, PERTURBATIONS, TABLE1_CAPPING, AbTest, BenchConfig,
                            OnlineResult, SuiteSpec, decide, expected_value, hetero_environment,
                            hetero_logging_policy, load_scenario, make_suite, perturb_policy, run_benchmark,
                            simulate_log, simulate_online, small_enumerable_scenario, summarize,
                            table1_scenario)
from offab.capping import CappingRule
from offab.streams import RandomStream


def test_logged_propensities_match_policy():
    env, pi_p, _ = small_enumerable_scenario()
    log = simulate_log(env, pi_p, 5000, RandomStream(1))
    np.testing.assert_allclose(log.logging_logprob, log_prob_batch(pi_p, log.contexts, log.actions), atol=1e-10)


def test_log_mean_matches_enumeration():
    env, pi_p, _ = small_enumerable_scenario()
    log = simulate_log(env, pi_p, 100_000, RandomStream(2))
    truth = policy_value(env.instance(pi_p), pi_p)
    assert abs(log.rewards.mean() - truth) <= 3 * log.rewards.std() / math.sqrt(len(log))


def test_empty_log_rejected():
    env, pi_p, _ = small_enumerable_scenario()
    with pytest.raises(ValidationError):
        simulate_log(env, pi_p, 0, RandomStream(0))


def test_log_does_not_depend_on_chunking():
    env, pi_p, _ = small_enumerable_scenario()
    a = simulate_log(env, pi_p, 3000, RandomStream(3))
    b = simulate_log(env, pi_p, 3000, RandomStream(3), chunk_size=77)
    assert a.equals(b)


def test_identical_policies_cover_zero():
    env, pi_p, _ = small_enumerable_scenario()
    results = [simulate_online(env, pi_p, pi_p, 2000, RandomStream(4).derive(r), confidence=0.99) for r in range(100)]
    covered = sum(r.ci_low <= 0 <= r.ci_high for r in results)
    assert covered >= 95


def test_online_width_scales_with_sqrt_n():
    env, pi_p, pi_t = small_enumerable_scenario()
    a = simulate_online(env, pi_p, pi_t, 50_000, RandomStream(5))
    b = simulate_online(env, pi_p, pi_t, 100_000, RandomStream(5))
    ratio = (a.ci_high - a.ci_low) / (b.ci_high - b.ci_low)
    assert abs(ratio / math.sqrt(2) - 1) < 0.10


def test_online_uplift_converges_to_enumeration():
    env, pi_p, pi_t = small_enumerable_scenario()
    inst = env.instance(pi_p)
    truth = policy_value(inst, pi_t) - policy_value(inst, pi_p)
    res = simulate_online(env, pi_p, pi_t, 1_000_000, RandomStream(6))
    sigma = (res.ci_high - res.ci_low) / (2 * 1.6448536269514722)
    assert abs(res.uplift - truth) <= 3 * sigma


def test_table1_online_uplift():
    env, pi_p, pi_t = table1_scenario()
    res = simulate_online(env, pi_p, pi_t, 1_000_000, RandomStream(7))
    assert res.uplift == pytest.approx(0.2, abs=0.02)


def test_table1_exact_values():
    env, pi_p, pi_t = table1_scenario()
    inst = env.instance(pi_p)
    assert policy_value(inst, pi_t) == pytest.approx(2.1, abs=1e-12)
    assert policy_value(inst, pi_p) == pytest.approx(1.9, abs=1e-12)
    assert ncis_asymptotic_value(inst, pi_t, TABLE1_CAPPING) == pytest.approx(1.794, abs=5e-4)
    mass = 1 / inverse_mass(inst, pi_t, TABLE1_CAPPING)
    segs = inst.contexts.segments
    for s, expected in [(0, 0.7), (1, 1.0)]:
        q = inst.probs[segs == s]
        assert float(q @ mass[segs == s] / q.sum()) == pytest.approx(expected, abs=0.01)


@pytest.mark.parametrize("lo,hi,expected", [(0.01, 0.05, "positive"), (-0.05, 0.05, "neutral"),
                                            (-0.05, -0.01, "negative"), (0.0, 0.1, "neutral")])
def test_decide_examples(lo, hi, expected):
    assert decide(OnlineResult(0.5 * (lo + hi), lo, hi, 0, 0, 1)) == expected
    assert decide(EstimatorReport(0.5 * (lo + hi), lo, hi, 1, 0, 1, "x")) == expected


@given(st.floats(-1, 1), st.floats(0, 1))
def test_decide_antisymmetric(lo, width):
    flip = {"positive": "negative", "negative": "positive", "neutral": "neutral"}
    hi = lo + width
    a = decide(OnlineResult(lo, lo, hi, 0, 0, 1))
    b = decide(OnlineResult(-lo, -hi, -lo, 0, 0, 1))
    assert b == flip[a]


def _tiny_config(**kw):
    return BenchConfig(n_log=3000, n_online=3000, capping=CappingRule("max", 5.0), n_mc=5, n_bootstrap=50, **kw)


def test_degenerate_suite_reports_nan():
    env = hetero_environment()
    pi_p = hetero_logging_policy()
    suite = [AbTest(env, pi_p, pi_p)] * 3
    cfg = BenchConfig(n_log=2000, n_online=2000, capping=CappingRule("max", 5.0), n_mc=2, n_bootstrap=20)
    # every offline uplift is exactly zero, so correlation has no variance to work with
    records, summaries = run_benchmark(suite, ["cis"], cfg, RandomStream(0))
    s = summaries["cis"]
    assert math.isnan(s.correlation)
    assert math.isnan(s.fnr) or s.fnr == 0.0
    assert all(r.online.uplift == pytest.approx(0.0, abs=0.05) for r in records)


def test_degenerate_summary_from_constant_records():
    rep = EstimatorReport(0.0, -0.1, 0.1, 10, 0.0, 10.0, "cis")
    recs = [_record(i, 0.0, rep) for i in range(4)]
    s = summarize(recs, "cis", n_bootstrap=10)
    assert math.isnan(s.correlation) and math.isnan(s.precision) and math.isnan(s.fnr)


def _record(i, uplift, rep):
    from offab.simbench import AbTestRecord
    online = OnlineResult(uplift, uplift - 0.1, uplift + 0.1, 0, 0, 10)
    return AbTestRecord(i, online, {"cis": rep}, {"cis": decide(rep)}, decide(online))


def test_metrics_by_hand():
    pos = EstimatorReport(1.0, 0.5, 1.5, 10, 0, 10, "cis")
    neg = EstimatorReport(-1.0, -1.5, -0.5, 10, 0, 10, "cis")
    recs = [_record(0, 1.0, pos), _record(1, 1.0, neg), _record(2, -1.0, pos), _record(3, 0.0, neg)]
    s = summarize(recs, "cis", n_bootstrap=0)
    assert s.precision == 0.5          # two offline positives, one online positive
    assert s.fnr == 0.5                # two online positives, one flipped to negative
    assert sum(s.counts.values()) == 4
    assert s.counts["positive/negative"] == 1


def test_small_benchmark_is_deterministic_and_consistent():
    spec = SuiteSpec(tests={"reg-deal": 2, "strong-neg": 2}, n_log=3000, n_online=3000, n_mc=5)
    suite = make_suite(spec)
    est = ["cis", "ncis", "piece-ncis", "point-ncis"]
    r1, s1 = run_benchmark(suite, est, spec.config(n_bootstrap=30), RandomStream(9))
    r2, s2 = run_benchmark(suite, est, spec.config(n_bootstrap=30, threads=4), RandomStream(9))
    assert [x.row() for x in s1.values()] == [x.row() for x in s2.values()]
    for s in s1.values():
        assert sum(s.counts.values()) == len(suite)
        for v in (s.precision, s.fnr):
            assert math.isnan(v) or 0 <= v <= 1
        assert math.isnan(s.correlation) or -1 <= s.correlation <= 1
    for rec in r1:
        for name, rep in rec.offline_uplifts.items():
            assert rec.decisions[name] == decide(rep)


def test_base_rate_is_about_one_percent():
    env = hetero_environment()
    v = expected_value(env, hetero_logging_policy(), 200_000, RandomStream(10))
    assert 0.005 < v < 0.02


def test_suite_composition():
    spec = SuiteSpec()
    suite = make_suite(spec)
    assert len(suite) == sum(DEFAULT_SUITE_TESTS.values()) == 30
    assert [t.label for t in suite].count("mild") == DEFAULT_SUITE_TESTS["mild"]


def test_unknown_perturbation():
    with pytest.raises(ValidationError):
        perturb_policy(hetero_logging_policy(), "bogus", np.random.default_rng(0))
    assert set(PERTURBATIONS) == set(DEFAULT_SUITE_TESTS)


def test_suite_spec_round_trip(tmp_path):
    spec = SuiteSpec(tests={"mild": 3}, environment={"registered_share": 0.2}, cap=3.0)
    path = tmp_path / "suite.json"
    path.write_text(spec.to_json())
    assert SuiteSpec.load(path) == spec
    with pytest.raises(ValidationError):
        SuiteSpec.from_json('{"tests": {}, "nonsense": 1}')
    with pytest.raises(ValidationError):
        SuiteSpec.from_json("[1, 2]")


def test_load_scenario():
    env, pi_p, pi_t = load_scenario({"scenario": "table1"})
    assert policy_value(env.instance(pi_p), pi_t) == pytest.approx(2.1)
    with pytest.raises(ValidationError):
        load_scenario({"scenario": "nope"})
    with pytest.raises(ValidationError):
        load_scenario({"scenario": "small", "params": {"bogus": 1}})
    with pytest.raises(ValidationError):
        load_scenario({"scenario": "hetero", "params": {"bogus": 1}})
    env, pi_p, pi_t = load_scenario({"scenario": "hetero", "params": {"registered_share": 0.2}})
    assert pi_p.n_items == pi_t.n_items == 8
