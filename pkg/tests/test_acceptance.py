"""End-to-end acceptance checks, one test per criterion."""

import json
import os
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from adjauto.analysis import action_census, auction_replay, parameter_sweep, simulate_policy
from adjauto.eu import (
    TwoEntityParams,
    LOCATION_RATES,
    MEETING_TYPES,
    closed_form_strategy,
    d_marginal_value,
    eu_closed_form,
    eu_of_strategy,
    meeting_regime,
    optimize_timings,
    simple_strategy_table,
)
from adjauto.mdp import AuctionScenario, DelayScenario, build_auction_mdp, build_delay_mdp
from adjauto.model import (
    CoordChangeModel,
    ConstantQuality,
    Entity,
    Instant,
    Markovian,
    ProblemInstance,
    TabulatedWait,
    Transfer,
)
from adjauto.search import ExperimentConfig, best_strategy, random_config_experiment
from adjauto.solver import (
    constrained_value_iteration,
    load_constraints,
    propagate_constraints,
    value_iteration,
    verify_policy,
)
from randmdp import random_constraints, random_mdp

DATA = Path(__file__).resolve().parents[1] / "src" / "adjauto" / "data"
pytestmark = pytest.mark.slow


def _draw_params(rng):
    rho = float(rng.uniform(0.01, 2.0))
    if rng.random() < 0.2:  # rates nearly equal: exercises the series branch
        omega = rho + float(rng.uniform(-5e-7, 5e-7))
    else:
        omega = float(rng.uniform(0.01, 1.0))
    L = float(rng.uniform(2.0, 20.0))
    return TwoEntityParams(rho, omega, float(rng.uniform(0, 10)), float(rng.uniform(0, 10)), L,
                           d_value=float(rng.uniform(0.1, 1.0)), d_cost=float(rng.uniform(0, 2)))


def test_criterion_01_closed_form_matches_quadrature(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    exact_a = True
    for _ in range(100):
        p = _draw_params(rng)
        inst = p.to_instance()
        L = p.deadline
        T = float(rng.uniform(0.5, 1.0)) * L
        D = float(rng.uniform(p.d_value, T))
        cases = [("A", None, None), ("e", None, None), ("eA", T, None), ("eDeA", T, D)]
        for kind, t, d in cases:
            cf = eu_closed_form(p, kind, t, d).value
            quad = eu_of_strategy(inst, closed_form_strategy(kind, t, d)).total
            if kind == "A":
                exact_a &= cf == quad
            worst = max(worst, abs(cf - quad) / (1 + abs(quad)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and exact_a and dt < 5
    criterion(1, ok, f"max scaled error {worst:.2e}, A exact {exact_a}, {dt:.2f}s")
    assert ok


def test_criterion_02_meeting_table_ordering(criterion):
    t0 = time.perf_counter()
    rows = {}
    for meeting in MEETING_TYPES:
        for loc in LOCATION_RATES:
            rows[meeting, loc] = {k: v for k, (v, _) in simple_strategy_table(meeting_regime(meeting, loc)).items()}
    dt = time.perf_counter() - t0
    e_below = all(r["e"] <= r["eA"] - 100 * max(1.0, abs(r["eA"])) for r in rows.values())
    office = all(rows[m, "office"]["eA"] > rows[m, "office"]["A"] and rows[m, "office"]["eDA"] > rows[m, "office"]["A"]
                 for m in MEETING_TYPES)
    a_fixed = all(len({rows[m, loc]["A"] for loc in LOCATION_RATES}) == 1 for m in MEETING_TYPES)
    ok = e_below and office and a_fixed and dt < 5
    criterion(2, ok, f"e two orders below eA {e_below}, office eA/eDA > A {office}, A invariant {a_fixed}, {dt:.2f}s")
    assert ok


def test_criterion_03_interior_rate_maximises_coordination_value(criterion):
    rng = np.random.default_rng(3)
    rhos = np.geomspace(0.01, 10, 13)
    t0 = time.perf_counter()
    hits = 0
    for _ in range(10):
        om = float(rng.uniform(0.05, 0.5))
        dv = float(rng.uniform(0.5, 5.0))
        vals = []
        for r in rhos:
            inst = TwoEntityParams(float(r), om, 1.0, 3.0, 40.0, dv, 0.0).to_instance()
            s, _ = optimize_timings(inst, ["U", "A"])
            vals.append(d_marginal_value(inst, s, s.actions[0].end_time / 2))
        hits += max(vals[1:-1]) > max(vals[0], vals[-1])
    dt = time.perf_counter() - t0
    ok = hits >= 9 and dt < 10
    criterion(3, ok, f"interior maximum in {hits}/10 draws, {dt:.2f}s")
    assert ok


def test_criterion_04_no_takeback_after_better_entity(criterion):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    violations = 0
    for _ in range(50):
        users = [Entity(f"U{i}", False, ConstantQuality(float(rng.uniform(0, 10))), Markovian(float(rng.uniform(0.01, 2))))
                 for i in range(int(rng.integers(1, 3)))]
        agent = Entity("A", True, ConstantQuality(float(rng.uniform(0, 5))), Instant())
        L = float(rng.uniform(10, 60))
        c = float(rng.uniform(0.01, 1.0))
        inst = ProblemInstance((agent, *users), TabulatedWait((0.0, L), (0.0, c * L), L), CoordChangeModel(0.0, (0.0,), 0))
        toks = [a.entity for a in best_strategy(inst, 3).best if isinstance(a, Transfer)]
        for prev, nxt in zip(toks, toks[1:]):
            if nxt == "A" and inst.entity(prev).quality.q > agent.quality.q:
                violations += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 30
    criterion(4, ok, f"{violations} take-backs after a better entity in 50 instances, {dt:.2f}s")
    assert ok


def test_criterion_05_cost_schedule_yields_k_changes(criterion):
    t0 = time.perf_counter()
    counts = {}
    base = TwoEntityParams(0.05, 0.3, 1.0, 6.0, 40.0, d_value=4.0).to_instance()
    for K in range(1, 5):
        inst = base.replace(coord=CoordChangeModel(4.0, tuple([0.01] * K + [1e9]), K + 1))
        counts[K] = best_strategy(inst, K + 2).best_skeleton.count("D")
    dt = time.perf_counter() - t0
    ok = all(counts[K] == K for K in counts) and dt < 60
    criterion(5, ok, f"changes found per schedule {counts}, {dt:.2f}s")
    assert ok


def test_criterion_06_random_config_lengths(criterion):
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    hist, lengths = random_config_experiment(cfg, seed=7)
    dt = time.perf_counter() - t0
    lo, hi = min(cfg.wait_rates), max(cfg.wait_rates)
    mode = {w: Counter(lengths[w]).most_common(1)[0][0] for w in (lo, hi)}
    every = [L for ls in lengths.values() for L in ls]
    short = sum(L <= 8 for L in every) / len(every)
    ok = mode[lo] == 1 and mode[hi] == 2 and short >= 0.95 and dt < 180
    criterion(6, ok, f"modal length {mode[lo]} (lowest) / {mode[hi]} (highest), {100 * short:.1f}% <= 8, {dt:.1f}s")
    assert ok


def test_criterion_07_reachability_and_restricted_values(criterion):
    rng = np.random.default_rng(7)
    agree = exact = 0
    for _ in range(200):
        m = random_mdp(rng)
        cs = random_constraints(rng)
        res = constrained_value_iteration(m, cs)
        report = {cid: status for cid, status, _ in verify_policy(m, res.policy, cs)}
        v = res.value(m.initial)
        forb = (not v.F) == all(report[c.id] == "satisfied" for c in cs if c.forbidding)
        req = v.F or all((c.id in v.N) == (report[c.id] == "satisfied") for c in cs if not c.forbidding)
        agree += bool(forb and req)
        adm = propagate_constraints(m, cs)
        plain = value_iteration(m, adm.admissible.astype(np.uint8))
        keep = ~res.F.astype(bool) & ~m.is_terminal.astype(bool)
        exact += bool(np.array_equal(res.U[keep], plain.U[keep]))
    ok = agree == 200 and exact == 200
    criterion(7, ok, f"<F,N> agrees with reachability {agree}/200, restricted values identical {exact}/200")
    assert ok


LAM1 = [0, 0.25, 0.5, 1, 2, 4, 8, 16, 64]
RESPONSE = [1, 2, 5, 10, 20, 30, 45, 60, 90, 120]


def test_criterion_08_no_fourth_delay(criterion):
    sc = DelayScenario()
    censuses = [c for _, c in parameter_sweep(sc, "lam1", LAM1)]
    censuses += [c for _, c in parameter_sweep(sc, "response_mean", RESPONSE)]
    m = build_delay_mdp(sc)
    cs = load_constraints(DATA / "delay_constraints.json")
    for k in range(len(cs) + 1):
        censuses.append(action_census(constrained_value_iteration(m, cs[:k]).policy, m))
    fourth = sum(c.delay.get(sc.max_delays, 0) for c in censuses)
    capped = all(m.action_of(int(a)).kind != "coord"
                 for s in range(m.n_states) if m.states[s].d_count == sc.max_delays
                 for a in range(m.sa_ptr[s], m.sa_ptr[s + 1]))
    ok = fourth == 0 and capped
    criterion(8, ok, f"{len(censuses)} solved policies, {fourth} schedule another change at the cap, cap enforced {capped}")
    assert ok


def test_criterion_09_sweep_shapes(criterion):
    sc = DelayScenario()
    asks = [c.ask for _, c in parameter_sweep(sc, "lam1", LAM1)]
    interior = max(asks[1:-1]) > max(asks[0], asks[-1])
    resp = [c.ask for _, c in parameter_sweep(sc, "response_mean", RESPONSE)]
    nonincreasing = all(a >= b for a, b in zip(resp, resp[1:]))
    ok = interior and nonincreasing
    criterion(9, ok, f"asks vs repair cost {asks}; asks vs response mean {resp}")
    assert ok


_TIMING = r"""
import json, sys
from adjauto import kernels
from adjauto.analysis import constraint_timing
from adjauto.mdp import DelayScenario, build_delay_mdp
from adjauto.solver import load_constraints
m = build_delay_mdp(DelayScenario())
cs = load_constraints(sys.argv[1])
rows = [constraint_timing(m, cs[:k], repeats=int(sys.argv[2])) for k in range(len(cs) + 1)]
print(json.dumps({"backend": kernels.BACKEND, "rows": rows}))
"""


def _timing_rows(pure: bool, repeats: int):
    env = dict(os.environ, ADJAUTO_PURE="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", _TIMING, str(DATA / "delay_constraints.json"), str(repeats)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def test_criterion_10_constraints_shrink_strategy_space_and_time(criterion):
    ref = _timing_rows(pure=True, repeats=30)
    assert ref["backend"] == "python"
    rows = ref["rows"]
    logs = [r["log10_strategies"] for r in rows]
    monotone = all(a > b for a, b in zip(logs, logs[1:]))
    shrink = 1 - logs[-1] / logs[0]
    plain = sum(r["plain_s"] for r in rows)
    cons = sum(r["constrained_s"] for r in rows[1:]) + rows[0]["plain_s"]
    saved = 1 - rows[-1]["constrained_s"] / rows[-1]["plain_s"]
    comp = _timing_rows(pure=False, repeats=300)
    last = comp["rows"][-1]
    ok = monotone and shrink >= 0.25 and saved > 0
    criterion(10, ok, f"log10 count {logs[0]:.1f} -> {logs[-1]:.1f} ({100 * shrink:.0f}% lower, monotone {monotone}); "
                      f"reference backend solve {1e6 * rows[-1]['plain_s']:.0f}us -> {1e6 * rows[-1]['constrained_s']:.0f}us "
                      f"({100 * saved:.0f}% less, sweep totals {1e3 * plain:.1f}ms vs {1e3 * cons:.1f}ms); "
                      f"{comp['backend']} backend {1e6 * last['plain_s']:.1f}us -> {1e6 * last['constrained_s']:.1f}us")
    assert ok


def test_criterion_11_auction_closure_agrees_with_strategy(criterion):
    sc = AuctionScenario()
    m = build_auction_mdp(sc)
    pol = value_iteration(m).policy
    rows = [auction_replay(sc, seed, pol, m) for seed in range(50)]
    gap = float(np.mean([abs(a - b) for a, b in rows]))
    ok = gap <= 10
    criterion(11, ok, f"mean |MDP% - eA%| = {gap:.2f} points over 50 seeds")
    assert ok


def test_criterion_12_simulation_matches_values(criterion):
    rng = np.random.default_rng(12)
    inside = 0
    zs = []
    for i in range(20):
        m = random_mdp(rng)
        res = value_iteration(m)
        u = float(res.U[m.initial])
        sim = simulate_policy(m, res.policy, seed=i, trials=100_000)
        # deterministic outcomes leave only summation rounding in the gap
        tol = 3 * sim.std_error + 1e-12 * (1 + abs(u))
        inside += abs(sim.mean - u) <= tol
        zs.append(abs(sim.mean - u) / sim.std_error if sim.std_error > 1e-12 else 0.0)
    ok = inside == 20
    criterion(12, ok, f"{inside}/20 means within 3 SE, largest z {max(zs):.2f}")
    assert ok
