import math

import numpy as np
import pytest

from adjauto.analysis import (
    Census,
    action_census,
    auction_csv,
    auction_replay,
    count_strategies,
    extract_strategy,
    histogram_csv,
    parameter_sweep,
    simulate_policy,
    sweep_csv,
)
from adjauto.eu import meeting_regime
from adjauto.mdp import AuctionScenario, DelayScenario, build_abstract_mdp, build_delay_mdp, mdp_from_table
from adjauto.model import parse_strategy
from adjauto.solver import propagate_constraints, value_iteration
from randmdp import random_constraints, random_mdp


def _wait_chain(n=10):
    return mdp_from_table(n + 1, {n: 1.0}, {s: [("wait", 0.0, [(s + 1, 1.0, 0.0)])] for s in range(n)})


# census


def test_always_wait_counts_every_nonterminal_state():
    m = _wait_chain(10)
    c = action_census(value_iteration(m).policy, m)
    assert (c.wait, c.ask, c.total, c.delay_total) == (10, 0, 10, 0)


def test_census_hand_tally():
    m = mdp_from_table(
        5,
        {4: 0.0},
        {
            0: [("transfer:U", 0.0, [(1, 1.0, 0.0)])],
            1: [("wait", 0.0, [(2, 1.0, 0.0)])],
            2: [("coord", 0.0, [(3, 1.0, 0.0)])],
            3: [("decide:go", 0.0, [(4, 1.0, 0.0)])],
        },
    )
    c = action_census(value_iteration(m).policy, m, ("go", "stay"))
    assert c == Census(ask=1, wait=1, delay={0: 1}, decide={"go": 1, "stay": 0}, total=4, ask_reachable=1)


def test_solved_delay_policy_never_delays_at_the_cap():
    sc = DelayScenario()
    m = build_delay_mdp(sc)
    c = action_census(value_iteration(m).policy, m)
    assert c.delay.get(sc.max_delays, 0) == 0
    assert c.total == int((~m.is_terminal.astype(bool)).sum())


# strategy extraction


def test_office_regime_reads_as_handoff_then_takeback():
    inst = meeting_regime("small", "office").to_instance()
    m = build_abstract_mdp(inst, 1.0)
    text = extract_strategy(value_iteration(m).policy, m)
    assert text.startswith("U") and text.endswith("A")
    parse_strategy(text.replace("D", ""), ["A", "U"])


def test_immediate_decision_reads_as_agent():
    m = mdp_from_table(3, {1: 0.0, 2: 1.0}, {0: [("transfer:U", 0.0, [(1, 1.0, 0.0)]), ("decide:go", 0.0, [(2, 1.0, 0.0)])]})
    assert extract_strategy(value_iteration(m).policy, m) == "A"


def test_delay_policy_uses_the_user_symbol():
    m = build_delay_mdp(DelayScenario(r_user=50.0))
    text = extract_strategy(value_iteration(m).policy, m)
    assert "e" in text and set(text) <= {"e", "D", "A"} and text.endswith("A")


# sweeps


def test_single_value_sweep_equals_direct_census():
    sc = DelayScenario()
    [(v, c)] = parameter_sweep(sc, "lam1", [sc.lam1])
    m = build_delay_mdp(sc)
    assert c == action_census(value_iteration(m).policy, m, ("attending", "not-attending", "cancel"))


def test_sweep_csv_is_reproducible():
    sc = DelayScenario()
    a = sweep_csv(parameter_sweep(sc, "response_mean", [5.0, 60.0]))
    assert a == sweep_csv(parameter_sweep(sc, "response_mean", [5.0, 60.0]))
    header = a.splitlines()[0].split(",")
    assert header[:3] == ["parameter_value", "ask", "wait"] and "delay_3" in header


def test_sweep_rejects_unknown_parameter():
    with pytest.raises(ValueError):
        parameter_sweep(DelayScenario(), "colour", [1.0])


# strategy counting


def test_count_is_product_of_action_counts():
    acts = lambda k: [(lab, 0.0, [(3, 1.0, 0.0)]) for lab in ("wait", "coord", "decide:go")[:k]]
    m = mdp_from_table(4, {3: 0.0}, {0: acts(3), 1: acts(3), 2: acts(2)})
    assert count_strategies(m) == pytest.approx(math.log10(18))


@pytest.mark.parametrize("seed", range(10))
def test_count_never_grows_with_forbidding_constraints(seed):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 30)
    cs = [c for c in random_constraints(rng, 5) if c.forbidding]
    counts = [count_strategies(m, propagate_constraints(m, cs[:k]).admissible) for k in range(len(cs) + 1)]
    assert counts[0] == pytest.approx(count_strategies(m))
    assert all(b <= a + 1e-12 for a, b in zip(counts, counts[1:]))


# simulation


def test_simulation_is_reproducible():
    m = build_delay_mdp(DelayScenario())
    pol = value_iteration(m).policy
    a = simulate_policy(m, pol, seed=5, trials=500)
    b = simulate_policy(m, pol, seed=5, trials=500)
    assert np.array_equal(a.utilities, b.utilities)
    assert [t.steps for t in a.traces] == [t.steps for t in b.traces]


def test_simulation_mean_within_three_standard_errors():
    m = build_delay_mdp(DelayScenario())
    res = value_iteration(m)
    sim = simulate_policy(m, res.policy, seed=9, trials=5000)
    assert abs(sim.mean - (res.U[m.initial] + m.value_offset)) <= 3 * sim.std_error


def test_deterministic_chain_is_a_point_mass():
    m = _wait_chain(4)
    sim = simulate_policy(m, value_iteration(m).policy, seed=0, trials=50)
    assert np.all(sim.utilities == 1.0) and sim.std_error == 0.0
    assert np.all(sim.step_counts == 4)


def test_trace_replay_matches_utility():
    rng = np.random.default_rng(2)
    m = random_mdp(rng, 20)
    pol = value_iteration(m).policy
    sim = simulate_policy(m, pol, seed=1, trials=30, keep_traces=30)
    for t in sim.traces:
        u = sum(m.sa_reward[a] + m.tr_reward[next(j for j in range(m.tr_ptr[a], m.tr_ptr[a + 1]) if m.tr_succ[j] == x)]
                for _, a, x in t.steps)
        u += m.terminal_reward[t.steps[-1][2]]
        assert u == pytest.approx(t.utility, abs=1e-12)


def test_simulation_needs_a_trial():
    m = _wait_chain(2)
    with pytest.raises(ValueError):
        simulate_policy(m, value_iteration(m).policy, seed=0, trials=0)


def test_histogram_csv():
    assert histogram_csv({2: 5, 1: 3}) == "length,count\n1,3\n2,5\n"


# auction replay


def test_dominant_bids_close_as_soon_as_seen():
    sc = AuctionScenario(bid_prob=1.0, p_high=1.0)
    mdp_pct, _ = auction_replay(sc, seed=0)
    assert mdp_pct == pytest.approx(100.0 * (sc.n_steps - 1) / sc.n_steps)


def test_no_bids_means_no_reason_to_wait():
    sc = AuctionScenario(bid_prob=0.0, leader_response=0.0)
    assert auction_replay(sc, seed=0) == (100.0, 100.0)


def test_auction_replay_is_seeded():
    sc = AuctionScenario()
    assert [auction_replay(sc, s) for s in range(5)] == [auction_replay(sc, s) for s in range(5)]
    assert auction_csv([(0, 50.0, 25.0)]) == "seed,mdp_pct,ea_pct\n0,50,25\n"
