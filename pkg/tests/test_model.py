import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adjauto.model import (
    INF,
    ConstantQuality,
    CoordChange,
    CoordChangeModel,
    Entity,
    ExponentialWait,
    Instant,
    Markovian,
    ProblemInstance,
    ScenarioError,
    TabulatedQuality,
    TabulatedResponse,
    TabulatedWait,
    TimedStrategy,
    Transfer,
    format_strategy,
    parse_strategy,
    quality,
    response_prob,
    scenario_from_dict,
    scenario_to_dict,
    validate_strategy,
    wait_cost,
)
from adjauto.search import enumerate_skeletons


def _two_entity(cap=2):
    return ProblemInstance(
        (Entity("A", True, ConstantQuality(1.0), Instant()), Entity("H", False, ConstantQuality(2.0), Markovian(0.3))),
        ExponentialWait(0.1, 100.0),
        CoordChangeModel(1.0, (0.5,), cap),
    )


# wait cost


def test_exponential_wait_at_zero():
    assert wait_cost(ExponentialWait(0.1, 100.0), 0.0) == pytest.approx(0.1)


def test_exponential_wait_capped_after_deadline():
    assert wait_cost(ExponentialWait(0.01, 100.0), 150.0) == pytest.approx(0.01 * math.e, rel=1e-12)


def test_tabulated_wait_exact_lookup():
    assert wait_cost(TabulatedWait((0.0, 10.0), (0.0, 5.0), 20.0), 10.0) == 5.0


def test_wait_rejects_negative_time():
    with pytest.raises(ValueError):
        wait_cost(ExponentialWait(0.1, 10.0), -1.0)


def test_tabulated_wait_must_not_decrease():
    with pytest.raises(ScenarioError):
        TabulatedWait((0.0, 1.0), (2.0, 1.0), 5.0)


@settings(max_examples=60, deadline=None)
@given(
    omega=st.floats(0.01, 2.0),
    deadline=st.floats(1.0, 50.0),
    t1=st.floats(0.0, 80.0),
    t2=st.floats(0.0, 80.0),
)
def test_wait_cost_nondecreasing_and_capped(omega, deadline, t1, t2):
    t1, t2 = sorted((t1, t2))
    for model in (ExponentialWait(omega, deadline), TabulatedWait((0.0, deadline / 2, deadline), (0.0, omega, 3 * omega), deadline)):
        assert wait_cost(model, t1) <= wait_cost(model, t2)
        if t1 >= deadline:
            assert wait_cost(model, t1) == wait_cost(model, deadline)


# response


def test_markovian_total_mass():
    assert response_prob(Markovian(0.2), 0.0, INF) == 1.0


def test_empty_interval_has_no_mass():
    assert response_prob(Markovian(0.7), 3.0, 3.0) == 0.0
    assert response_prob(TabulatedResponse((0.0, 1.0), (0.5, 0.5)), 0.4, 0.4) == 0.0


def test_markovian_interval_against_trapezoid():
    ts = np.arange(0.0, 2.0 + 5e-5, 1e-4)
    ref = float(np.trapezoid(Markovian(0.5).density(ts), ts))
    assert response_prob(Markovian(0.5), 0.0, 2.0) == pytest.approx(ref, abs=1e-6)
    assert ref == pytest.approx(0.63212, abs=1e-5)


def test_tabulated_response_mass_may_be_short_of_one():
    r = TabulatedResponse((0.0, 10.0), (0.05, 0.05))
    assert r.total_mass == pytest.approx(0.5)
    assert response_prob(r, 0.0, INF) == pytest.approx(0.5)


def test_tabulated_response_rejects_excess_mass():
    with pytest.raises(ScenarioError):
        TabulatedResponse((0.0, 10.0), (0.2, 0.2))


@settings(max_examples=60, deadline=None)
@given(rate=st.floats(0.01, 5.0), a=st.floats(0.0, 20.0), b=st.floats(0.0, 20.0), c=st.floats(0.0, 20.0))
def test_response_prob_additive(rate, a, b, c):
    a, b, c = sorted((a, b, c))
    tab = TabulatedResponse((0.0, 5.0, 12.0), (0.05, 0.08, 0.01))
    for m in (Markovian(rate), tab):
        assert response_prob(m, a, b) + response_prob(m, b, c) == pytest.approx(response_prob(m, a, c), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(rate=st.floats(0.01, 5.0), t=st.floats(0.0, 50.0))
def test_markovian_cdf_closed_form(rate, t):
    assert response_prob(Markovian(rate), 0.0, t) == pytest.approx(1 - math.exp(-rate * t), abs=1e-9)


# quality


def test_constant_quality():
    assert quality(ConstantQuality(1.0), 37.0) == 1.0


def test_tabulated_quality_midpoint_and_hold():
    q = TabulatedQuality((0.0, 10.0), (0.0, 2.0))
    assert quality(q, 5.0) == 1.0
    assert quality(q, 20.0) == 2.0


# instances


def test_instance_needs_exactly_one_agent():
    h = Entity("H", False, ConstantQuality(1.0), Markovian(1.0))
    with pytest.raises(ScenarioError):
        ProblemInstance((h,), ExponentialWait(0.1, 10.0))


def test_instance_rejects_duplicate_ids():
    a = Entity("A", True, ConstantQuality(1.0), Instant())
    with pytest.raises(ScenarioError):
        ProblemInstance((a, a), ExponentialWait(0.1, 10.0))


def test_entity_id_d_is_reserved():
    with pytest.raises(ScenarioError):
        Entity("D", False, ConstantQuality(1.0), Markovian(1.0))


def test_coord_costs_repeat_last_and_cap():
    c = CoordChangeModel(2.0, (1.0, 3.0), 3)
    assert [c.cost(k) for k in (1, 2, 3, 4)] == [1.0, 3.0, 3.0, INF]


# strategies


def test_leading_change_rejected():
    s = TimedStrategy([CoordChange(0.0), Transfer("H", INF)])
    assert "leading action must be a transfer" in validate_strategy(s, _two_entity())


def test_handoff_then_agent_is_valid():
    assert validate_strategy(TimedStrategy([Transfer("H", 5.0), Transfer("A", INF)]), _two_entity()) == []


def test_decreasing_times_rejected():
    s = TimedStrategy([Transfer("H", 5.0), Transfer("A", 3.0)])
    assert "times must be nondecreasing" in validate_strategy(s, _two_entity())


def test_too_many_changes_rejected():
    s = TimedStrategy([Transfer("H", 9.0), CoordChange(1.0), CoordChange(2.0), CoordChange(3.0), Transfer("A", INF)])
    assert any("exceed the cap" in p for p in validate_strategy(s, _two_entity(cap=2)))


def test_change_must_fall_in_its_segment():
    s = TimedStrategy([Transfer("H", 5.0), CoordChange(8.0), Transfer("A", INF)])
    assert validate_strategy(s, _two_entity())


@pytest.mark.parametrize("text", ["H(5)A", "H(8)D(5)A", "H(2.5)D(1)D(2)H(7)A", "A"])
def test_strategy_round_trip(text):
    assert format_strategy(parse_strategy(text, ["A", "H"])) == text


def test_untimed_final_transfer_lasts_forever():
    s = parse_strategy("H(5)A")
    assert s.actions[-1] == Transfer("A", INF)


def test_parse_rejects_junk():
    with pytest.raises(ScenarioError):
        parse_strategy("H(5")
    with pytest.raises(ScenarioError):
        parse_strategy("H(x)A")


def _timed(tokens):
    """Give a token string concrete times: segment i ends at i+1, changes sit mid-segment."""
    actions = []
    transfers = [i for i, t in enumerate(tokens) if t != "D"]
    end = 0.0
    start = 0.0
    for i, t in enumerate(tokens):
        if t == "D":
            actions.append(CoordChange(start if not actions else (start + end) / 2))
        else:
            start = end
            end = INF if i == transfers[-1] else end + 1.0
            actions.append(Transfer(t, end))
            if math.isinf(end):
                end = start + 1.0
    return TimedStrategy(actions)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(["A", "H", "D"]), min_size=1, max_size=5))
def test_validation_matches_grammar(tokens):
    inst = _two_entity(cap=None)
    if all(t == "D" for t in tokens):
        return
    ok = not validate_strategy(_timed(tokens), inst)
    assert ok == (tokens[0] != "D")
    assert ok == (tuple(tokens) in set(enumerate_skeletons(["A", "H"], len(tokens))))


# scenario files


def test_scenario_round_trip():
    inst = _two_entity()
    again = scenario_from_dict(json.loads(json.dumps(scenario_to_dict(inst))))
    assert again == inst


def test_scenario_rejects_unknown_fields():
    doc = scenario_to_dict(_two_entity())
    doc["entities"][0]["colour"] = "red"
    with pytest.raises(ScenarioError, match="unknown field"):
        scenario_from_dict(doc)
    doc = scenario_to_dict(_two_entity())
    doc["extra"] = 1
    with pytest.raises(ScenarioError):
        scenario_from_dict(doc)
