import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from offab.capping import CappingRule
from offab.errors import LogFormatError, ValidationError
from offab.estimators import CIS, IS, NCIS, NIS, evaluate
from offab.logs import ERROR_CODES, LogDataset, LoggedSample, iter_lines, parse_log, read_log, write_log
from offab.policy import Context, RankedAction
from offab.simbench import hetero_environment, hetero_logging_policy, perturb_policy, simulate_log
from offab.streams import RandomStream

HEADER = '{"format": "offab-log", "schema_version": 1, "k": 1, "r_max": 1.0}'


def record(**over):
    rec = {"id": 0, "segment": 0, "features": [0.5], "eligible": [0, 1, 2], "action": [1],
           "logging_logprob": -1.0, "reward": 0.5}
    rec.update(over)
    return json.dumps(rec)


def small_log(n=5, k=2):
    samples = [LoggedSample(Context(i, i % 2, (0.1 * i, -1.0), (0, 1, 2, 3)), RankedAction((i % 4, (i + 1) % 4)),
                            0.25 * (i % 3), -2.0 - 0.1 * i) for i in range(n)]
    return LogDataset.from_samples(samples, r_max=1.0, k=k)


def error_code(lines):
    with pytest.raises(LogFormatError) as err:
        parse_log(lines)
    return err.value


def test_empty_file(tmp_path):
    (tmp_path / "e.log").write_text("")
    with pytest.raises(LogFormatError) as err:
        read_log(tmp_path / "e.log")
    assert err.value.code == "empty-dataset"
    assert error_code([HEADER]).code == "empty-dataset"


def test_negative_reward_names_line():
    err = error_code([HEADER, record(), record(reward=-0.1)])
    assert err.code == "reward-out-of-range" and err.line == 3


@pytest.mark.parametrize("lines,code", [
    (["not json", record()], "bad-header"),
    (['{"format": "other"}', record()], "bad-header"),
    ([HEADER, "{oops"], "malformed-record"),
    ([HEADER, record(extra=1)], "malformed-record"),
    ([HEADER, record(action=[0, 1])], "malformed-record"),
    ([HEADER, record(reward=1.5)], "reward-out-of-range"),
    ([HEADER, record(logging_logprob=float("nan"))], "non-finite-propensity"),
    ([HEADER, record(logging_logprob=0.5)], "propensity-out-of-range"),
    ([HEADER, record(eligible=[0, 0, 1])], "duplicate-items"),
    ([HEADER, record(action=[7])], "ineligible-item"),
])
def test_distinct_error_codes(lines, code):
    err = error_code(lines)
    assert err.code == code and code in ERROR_CODES


def test_round_trip_and_byte_identity(tmp_path):
    d = small_log()
    write_log(d, tmp_path / "a.log")
    back = read_log(tmp_path / "a.log")
    assert back.equals(d)
    write_log(back, tmp_path / "b.log")
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()


def test_single_sample_file_has_two_lines(tmp_path):
    write_log(small_log(1), tmp_path / "one.log")
    assert (tmp_path / "one.log").read_text().count("\n") == 2


def test_write_rejects_invalid_dataset(tmp_path):
    d = small_log()
    bad = LogDataset(d.contexts, d.actions, d.rewards * 10, d.logging_logprob, d.r_max, d.k)
    with pytest.raises(ValidationError):
        write_log(bad, tmp_path / "bad.log")


def test_large_log_estimates_survive_round_trip(tmp_path):
    env, pi_p = hetero_environment(), hetero_logging_policy()
    target = perturb_policy(pi_p, "reg-deal", np.random.default_rng(0))
    d = simulate_log(env, pi_p, 100_000, RandomStream(8))
    write_log(d, tmp_path / "big.log")
    back = read_log(tmp_path / "big.log")
    ests = [IS(), NIS(), CIS(CappingRule("max", 5.0)), NCIS(CappingRule("max", 5.0))]
    a = evaluate(d, target, ests, n_bootstrap=20, seed=1)
    b = evaluate(back, target, ests, n_bootstrap=20, seed=1)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


# --- invariants ---

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 8))
    k = draw(st.integers(1, 3))
    d = draw(st.integers(0, 3))
    r_max = draw(st.floats(0.5, 100.0))
    samples = []
    for i in range(n):
        m = draw(st.integers(k, 6))
        items = draw(st.lists(st.integers(0, 50), min_size=m, max_size=m, unique=True))
        action = draw(st.permutations(items))[:k]
        samples.append(LoggedSample(
            Context(draw(st.integers(-2**63, 2**63 - 1)), draw(st.integers(0, 5)),
                    tuple(draw(st.lists(finite, min_size=d, max_size=d))), tuple(items)),
            RankedAction(tuple(action)),
            draw(st.floats(0.0, r_max)),
            draw(st.floats(-700.0, 0.0)),
        ))
    return LogDataset.from_samples(samples, r_max=r_max, k=k)


@settings(max_examples=150, deadline=None)
@given(datasets())
def test_read_write_identity(d):
    back = parse_log(list(iter_lines(d)))
    assert back.equals(d)


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=400))
def test_ingestion_is_total_on_bytes(tmp_path, raw):
    path = tmp_path / "fuzz.log"
    path.write_bytes(raw)
    try:
        d = read_log(path)
    except LogFormatError as err:
        assert err.code in ERROR_CODES
    else:
        d.validate()


json_values = st.recursive(st.none() | st.booleans() | st.integers() | st.floats() | st.text(max_size=5),
                           lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=8), inner, max_size=3),
                           max_leaves=8)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["id", "segment", "features", "eligible", "action", "logging_logprob", "reward"]), json_values)
def test_ingestion_is_total_on_field_mutations(field, value):
    rec = json.loads(record())
    rec[field] = value
    try:
        d = parse_log([HEADER, json.dumps(rec)])
    except LogFormatError as err:
        assert err.code in ERROR_CODES
    else:
        d.validate()
