"""Inspecting and executing solved policies."""

from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .mdp import (
    AaMdp,
    AuctionScenario,
    DelayScenario,
    build_auction_mdp,
    build_delay_mdp,
)
from .solver import Constraint, SolveResult, constrained_value_iteration, propagate_constraints, value_iteration

__all__ = [
    "Census",
    "ExecutionTrace",
    "SimulationSummary",
    "action_census",
    "extract_strategy",
    "parameter_sweep",
    "sweep_csv",
    "count_strategies",
    "constraint_timing",
    "simulate_policy",
    "histogram_csv",
    "auction_replay",
    "auction_csv",
    "ea_take_back",
]


@dataclass
class Census:
    ask: int = 0
    wait: int = 0
    delay: dict[int, int] = field(default_factory=dict)  # keyed by delays already made
    decide: dict[str, int] = field(default_factory=dict)
    total: int = 0
    ask_reachable: int = 0

    @property
    def delay_total(self) -> int:
        return sum(self.delay.values())


def _reachable(mdp: AaMdp, policy: np.ndarray) -> np.ndarray:
    seen = np.zeros(mdp.n_states, dtype=bool)
    stack = [mdp.initial]
    seen[mdp.initial] = True
    while stack:
        s = stack.pop()
        a = policy[s]
        if mdp.is_terminal[s] or a < 0:
            continue
        for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]):
            x = mdp.tr_succ[j]
            if mdp.tr_prob[j] > 0 and not seen[x]:
                seen[x] = True
                stack.append(x)
    return seen


def action_census(policy: np.ndarray, mdp: AaMdp, decisions: Sequence[str] = ()) -> Census:
    """Count the actions a policy prescribes over all nonterminal states
    that have one.  ``ask_reachable`` restricts the ask count to states the
    policy can reach from the initial state."""
    policy = np.asarray(policy)
    c = Census(decide={d: 0 for d in decisions})
    reach = _reachable(mdp, policy)
    for s in range(mdp.n_states):
        a = policy[s]
        if mdp.is_terminal[s] or a < 0:
            continue
        act = mdp.action_of(int(a))
        c.total += 1
        if act.kind == "transfer" and act.target != mdp.agent_id:
            c.ask += 1
            c.ask_reachable += int(reach[s])
        elif act.kind == "wait":
            c.wait += 1
        elif act.kind == "coord":
            k = mdp.states[s].d_count
            c.delay[k] = c.delay.get(k, 0) + 1
        else:
            c.decide[act.target] = c.decide.get(act.target, 0) + 1
    return c


def extract_strategy(policy: np.ndarray, mdp: AaMdp, pinned: Sequence[str] | None = None, symbols: dict | None = None) -> str:
    """Follow the policy along the path where nobody responds and the pinned
    features (location, by default) never change, writing down who holds
    control.  Decisions and a timeout in the agent's hands read as ``A``."""
    if pinned is None:
        pinned = [f for f in ("location",) if f in mdp.features]
    symbols = {"user": "e", "leader": "e", **(symbols or {})}
    agent = mdp.agent_id
    sym = lambda e: "A" if e == agent else symbols.get(e, e)
    cols = [mdp.features[f] for f in pinned]
    out: list[str] = []
    holder = agent
    s = mdp.initial
    for _ in range(mdp.n_states + 1):
        if mdp.is_terminal[s]:
            if holder == agent and (not out or out[-1] != "A"):
                out.append("A")
            break
        a = int(policy[s])
        if a < 0:
            break
        act = mdp.action_of(a)
        if act.kind == "decide":
            out.append("A")
            break
        if act.kind == "coord":
            out.append("D")
        elif act.kind == "transfer":
            if act.target == agent:
                out.append("A")
                break
            if act.target != holder:
                out.append(sym(act.target))
                holder = act.target
        nxt = None
        for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]):
            x = int(mdp.tr_succ[j])
            if mdp.tr_prob[j] <= 0 or mdp.states[x].response not in (None, "timeout", "none", "deadline"):
                continue
            if all(col[x] == col[s] for col in cols):
                nxt = x
                break
        if nxt is None:
            break
        s = nxt
    return "".join(out) or "A"


def _solve(mdp: AaMdp) -> SolveResult:
    return value_iteration(mdp)


def parameter_sweep(scenario: DelayScenario, name: str, values: Sequence[float]) -> list[tuple[float, Census]]:
    """Re-solve the delay MDP for each value of one scenario field."""
    if name not in DelayScenario.__dataclass_fields__:
        raise ValueError(f"unknown scenario parameter {name!r}")
    rows = []
    for v in values:
        sc = scenario.replace(**{name: _coerce(getattr(scenario, name), v)})
        mdp = build_delay_mdp(sc)
        res = _solve(mdp)
        rows.append((v, action_census(res.policy, mdp, ("attending", "not-attending", "cancel"))))
    return rows


def _coerce(old, v):
    if isinstance(old, tuple):
        return tuple(v) if isinstance(v, (list, tuple)) else tuple(float(v) for _ in old)
    return type(old)(v)


def sweep_csv(rows, max_delays: int = 3) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    decisions = sorted({d for _, c in rows for d in c.decide})
    w.writerow(["parameter_value", "ask", "wait"] + [f"delay_{k}" for k in range(max_delays + 1)]
               + [f"decide_{d}" for d in decisions] + ["total", "ask_reachable"])
    for v, c in rows:
        w.writerow([_fmt(v), c.ask, c.wait] + [c.delay.get(k, 0) for k in range(max_delays + 1)]
                   + [c.decide.get(d, 0) for d in decisions] + [c.total, c.ask_reachable])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return " ".join(f"{x:.10g}" for x in v)
    return f"{v:.10g}"


def count_strategies(mdp: AaMdp, admissible: np.ndarray | None = None) -> float:
    """log10 of the number of deterministic policies that use only
    admissible actions at the acceptable states."""
    if admissible is None:
        admissible = np.ones(mdp.n_sa, dtype=np.uint8)
    counts = np.bincount(mdp.sa_owner, weights=np.asarray(admissible, dtype=np.int64), minlength=mdp.n_states)
    counts = counts[counts > 0].astype(np.int64)
    total = 0.0
    for c in counts:
        total += math.log10(int(c))
    return total


def constraint_timing(mdp: AaMdp, constraints: Sequence[Constraint], repeats: int = 5) -> dict:
    """Best-of-``repeats`` wall time of plain value iteration and of the
    constrained solve, plus the log10 strategy count after propagation.

    The two solves alternate so that clock-speed drift hits both alike.
    Predicate matching is done once up front, like building the model.
    """
    constraints = list(constraints)
    adm = propagate_constraints(mdp, constraints)
    t_plain = t_cons = math.inf
    for _ in range(repeats):
        t_plain = min(t_plain, _timed(lambda: value_iteration(mdp)))
        t_cons = min(t_cons, _timed(lambda: constrained_value_iteration(mdp, constraints)))
    return {"n_constraints": len(constraints), "plain_s": t_plain, "constrained_s": t_cons,
            "log10_strategies": count_strategies(mdp, adm.admissible)}


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ----------------------------------------------------------------------------
# Monte-Carlo execution


@dataclass
class ExecutionTrace:
    seed: int
    trial: int
    steps: list[tuple[int, int, int]]  # (state, state-action, successor)
    utility: float
    length: int  # tokens of the action string actually executed


@dataclass
class SimulationSummary:
    mean: float
    std_error: float
    utilities: np.ndarray
    step_counts: np.ndarray
    length_histogram: dict[int, int]
    traces: list[ExecutionTrace]


def _depth(mdp: AaMdp) -> int:
    """Longest path length, used to size the uniform matrix."""
    if not mdp.acyclic:
        return 10 * mdp.n_states
    d = np.zeros(mdp.n_states, dtype=np.int64)
    for s in mdp.order:
        if mdp.is_terminal[s]:
            continue
        lo, hi = mdp.tr_ptr[mdp.sa_ptr[s]], mdp.tr_ptr[mdp.sa_ptr[s + 1]]
        if hi > lo:
            d[s] = 1 + d[mdp.tr_succ[lo:hi]].max()
    return int(d.max()) + 1


def _replay(mdp: AaMdp, policy, row, s0):
    s, steps = s0, []
    for u in row:
        if mdp.is_terminal[s]:
            break
        a = int(policy[s])
        lo, hi = mdp.tr_ptr[a], mdp.tr_ptr[a + 1]
        j, cum = lo, mdp.tr_prob[lo]
        while u >= cum and j < hi - 1:
            j += 1
            cum += mdp.tr_prob[j]
        x = int(mdp.tr_succ[j])
        steps.append((s, a, x))
        s = x
    return steps


def _action_length(mdp: AaMdp, steps) -> int:
    """Number of tokens in the executed action string (waits collapse)."""
    n, holder = 0, mdp.agent_id
    for _, a, _ in steps:
        act = mdp.action_of(a)
        if act.kind == "coord" or act.kind == "decide":
            n += 1
        elif act.kind == "transfer" and act.target != holder:
            n += 1
            holder = act.target
    return max(n, 1)


def simulate_policy(mdp: AaMdp, policy: np.ndarray, seed: int, trials: int, keep_traces: int = 100,
                    chunk: int = 20000) -> SimulationSummary:
    """Seeded Monte-Carlo execution.  Trial ``i`` consumes row ``i`` of a
    uniform matrix drawn from ``seed``, so any subset of trials can be
    replayed exactly.  Full traces are kept for the first ``keep_traces``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    policy = np.ascontiguousarray(policy, dtype=np.int64)
    depth = _depth(mdp)
    rng = np.random.default_rng(seed)
    utils, counts, rows = [], [], []
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        U = rng.random((m, depth))
        u, k = kernels.simulate(mdp.initial, policy, mdp.is_terminal, mdp.terminal_reward, mdp.sa_reward,
                                mdp.tr_ptr, mdp.tr_succ, mdp.tr_prob, mdp.tr_reward, U)
        if done < keep_traces:
            rows.extend(U[: keep_traces - done])
        utils.append(u)
        counts.append(k)
        done += m
    util = np.concatenate(utils) + mdp.value_offset
    steps = np.concatenate(counts)
    if np.isnan(util).any():
        raise ArithmeticError("policy is undefined on a reachable state")
    traces = []
    for i, row in enumerate(rows):
        st = _replay(mdp, policy, row, mdp.initial)
        traces.append(ExecutionTrace(seed, i, st, float(util[i]), _action_length(mdp, st)))
    hist = Counter(t.length for t in traces)
    se = float(util.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return SimulationSummary(float(util.mean()), se, util, steps, dict(sorted(hist.items())), traces)


def histogram_csv(hist: dict[int, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["length", "count"])
    for k in sorted(hist):
        w.writerow([k, hist[k]])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# Auction replay


def _expected_bids(sc: AuctionScenario, nb: int, steps: int) -> float:
    """Expected bid count after ``steps`` more steps from ``nb`` bids."""
    return sc.n_bidders - (sc.n_bidders - nb) * (1.0 - sc.bid_prob) ** steps


def ea_take_back(sc: AuctionScenario, k: int, nb: int, nh: int) -> int:
    """Optimal take-back step of the eA strategy seen from step ``k``.

    The leader holds control and responds each step with a fixed
    probability; when the agent takes control back it closes with a quality
    proportional to the expected bid count, minus the preparation loss.
    Returns ``k`` when closing now is best.
    """
    T = sc.n_steps
    q_max = sc.value_high

    def agent_q(j):
        if nh > 0:
            best = sc.value_high
        else:
            best = q_max * _expected_bids(sc, nb, j - k) / sc.n_bidders
        return best - sc.prep_cost * j / T

    def leader_q(j):
        return agent_q(j) + sc.leader_quality_bonus * (1.0 if nb or j > k else 0.0)

    best_t, best_v = k, agent_q(k)
    acc, surv = -sc.ask_cost, 1.0
    for t in range(k + 1, T + 1):
        p = sc.leader_response
        acc += surv * p * leader_q(t - 1)
        surv *= 1.0 - p
        v = acc + surv * agent_q(t)
        if v > best_v + 1e-12:
            best_t, best_v = t, v
    return best_t


def auction_replay(sc: AuctionScenario, seed: int, policy: np.ndarray | None = None, mdp: AaMdp | None = None) -> tuple[float, float]:
    """Closure time of the MDP policy and of the eA rule on one seeded bid
    stream, each as the percentage of auction time remaining.

    Both policies see the same bids and the same leader-response draws.
    """
    if mdp is None:
        mdp = build_auction_mdp(sc)
    if policy is None:
        policy = value_iteration(mdp).policy
    rng = np.random.default_rng(seed)
    T, N = sc.n_steps, sc.n_bidders
    # bidder i bids at the first step its uniform falls under bid_prob
    bid_u = rng.random((T, N))
    high_u = rng.random(N)
    leader_u = rng.random(T)
    bid_step = np.where((bid_u < sc.bid_prob).any(axis=0), (bid_u < sc.bid_prob).argmax(axis=0), T)
    is_high = high_u < sc.p_high

    def state_at(k):
        arrived = bid_step < k
        return int(arrived.sum()), int((arrived & is_high).sum())

    index = {(st.controller, st.time_index, st.agent_expect): i for i, st in enumerate(mdp.states) if st.response is None}

    # MDP policy
    ctrl, close_mdp = "agent", T
    for k in range(T):
        nb, nh = state_at(k)
        s = index[(ctrl, k, f"{nb}:{nh}")]
        act = mdp.action_of(int(policy[s]))
        if act.kind == "decide":
            close_mdp = k
            break
        if act.kind == "transfer":
            ctrl = act.target
        if ctrl != "agent" and leader_u[k] < sc.leader_response:
            close_mdp = k
            break

    # eA: leader holds control until the re-planned take-back step
    close_ea = T
    for k in range(T):
        nb, nh = state_at(k)
        if ea_take_back(sc, k, nb, nh) <= k:
            close_ea = k
            break
        if leader_u[k] < sc.leader_response:
            close_ea = k
            break
    pct = lambda c: 100.0 * (T - c) / T
    return pct(close_mdp), pct(close_ea)


def auction_csv(rows: Sequence[tuple[int, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "mdp_pct", "ea_pct"])
    for seed, a, b in rows:
        w.writerow([seed, f"{a:.6g}", f"{b:.6g}"])
    return buf.getvalue()
