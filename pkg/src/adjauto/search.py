"""Strategy-space enumeration, dominance pruning and best-strategy search."""

from __future__ import annotations

import csv
import io
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .eu import TwoEntityParams, EPS_DELTA, EuBreakdown, integrate, optimize_timings
from .model import (
    INF,
    ConstantQuality,
    Markovian,
    ProblemInstance,
    ScenarioError,
    TimedStrategy,
)

__all__ = [
    "Skeleton",
    "SearchReport",
    "enumerate_skeletons",
    "takeback_test",
    "continuation_gain",
    "kth_d_test",
    "best_strategy",
    "ExperimentConfig",
    "random_config_experiment",
    "clock_dp_strategy",
    "histogram_csv",
]

Skeleton = tuple  # of entity ids and "D"

TIE_EPS = 1e-9
TAKEBACK_GRID = 64


def enumerate_skeletons(entity_ids: Sequence[str], k: int, max_d: float = INF) -> list[Skeleton]:
    """All grammar strings of length <= k: an entity first, then entities or D."""
    ids = list(entity_ids)
    if not ids:
        raise ScenarioError("entity set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if "D" in ids:
        raise ScenarioError("'D' is reserved for coordination changes")
    symbols = ids + ["D"]
    out: list[Skeleton] = []
    for n in range(1, k + 1):
        for first in ids:
            for rest in itertools.product(symbols, repeat=n - 1):
                if rest.count("D") <= max_d:
                    out.append((first, *rest))
    return out


def _redundant(inst: ProblemInstance, sk: Skeleton) -> bool:
    """Skeletons that another, shorter skeleton reproduces exactly."""
    prev = None
    for i, tok in enumerate(sk):
        if tok == "D":
            continue
        if tok == prev:
            return True  # same holder twice: one longer segment does the same
        if inst.entity(tok).is_agent and i != len(sk) - 1:
            return True  # nothing after the agent's decision is reached
        prev = tok
    return False


# ----------------------------------------------------------------------------
# Dominance tests


def takeback_test(inst: ProblemInstance, e: str, t: float) -> bool:
    """Literal take-back condition at time ``t``.

    True iff the response-weighted wait cost over ``[t, deadline]`` minus the
    current wait cost exceeds the quality gap ``EQ_e(t) - EQ_A(t)``.
    """
    L = inst.deadline
    if not t < L:
        raise ValueError("t must be before the deadline")
    ent = inst.entity(e)
    if ent.is_agent:
        raise ValueError("the take-back test needs a non-agent entity")
    W = inst.wait

    def f(x):
        return np.atleast_2d(ent.response.density(x) * W(x))

    lhs = float(integrate(f, t, L)[0]) - float(W(t))
    gap = float(ent.quality(t)) - float(inst.agent.quality(t))
    return lhs > gap


def continuation_gain(inst: ProblemInstance, e: str, clock: float) -> float:
    """Value of leaving a memoryless, constant-quality ``e`` in control forever
    from wait clock ``clock``, relative to the agent deciding right now."""
    ent = inst.entity(e)
    if not (isinstance(ent.response, Markovian) and isinstance(ent.quality, ConstantQuality)):
        raise ValueError("continuation gain needs a Markovian, constant-quality entity")
    if not isinstance(inst.agent.quality, ConstantQuality):
        raise ValueError("continuation gain needs a constant agent quality")
    rate = ent.response.rate
    W = inst.wait
    w0 = float(W(clock))
    span = max(inst.deadline - clock, 0.0)

    def f(s):
        return np.atleast_2d(rate * np.exp(-rate * s) * (W(clock + s) - w0))

    cost = float(integrate(f, 0.0, span)[0]) if span > 0 else 0.0
    cost += math.exp(-rate * span) * (float(W(inst.deadline)) - w0)
    return ent.quality.q - cost - inst.agent.quality.q


def _takeback_useless(inst: ProblemInstance, e: str) -> bool:
    """True when keeping ``e`` in control beats taking control back at every
    clock value of a uniform grid over ``[0, deadline]``."""
    try:
        clocks = np.linspace(0.0, inst.deadline, TAKEBACK_GRID)
        return all(continuation_gain(inst, e, c) >= 0.0 for c in clocks)
    except ValueError:
        return False


def kth_d_test(p: TwoEntityParams, K: int, T: float, delta_t: float, cost: float | None = None) -> bool:
    """Whether the K-th coordination change at ``delta_t`` pays for itself in
    an ``e D e A`` strategy with take-back time ``T``.

    ``cost`` overrides the schedule ``p.d_cost`` (``inf`` means exhausted).
    """
    if K < 1:
        raise ValueError("K is 1-based")
    if not delta_t < T:
        raise ValueError("delta_t must precede T")
    fK = p.d_cost if cost is None else cost
    if math.isinf(fK):
        return False
    rho, om, dv = p.rho, p.omega, p.d_value
    d = p.delta
    if abs(d) > EPS_DELTA:
        bracket = (rho / d) * math.exp(-d * T) - (om / d) * math.exp(-d * delta_t)
    else:
        # (rho e^{-dT} - om e^{-dD}) / d, expanded around d = 0
        def phi(x):
            z = x * d
            return -x * (1 - z / 2 + z * z / 6 - z**3 / 24)

        bracket = om * (phi(T) - phi(delta_t)) + math.exp(-d * T)
    rhs = om * math.expm1(-dv * om) * (bracket - math.exp(om * delta_t - rho * T))
    return fK < rhs


def _d_cost_bound(inst: ProblemInstance) -> float:
    """No coordination change can save more wait cost than the full range of W."""
    return float(inst.wait(inst.deadline)) - float(inst.wait(0.0))


# ----------------------------------------------------------------------------
# Search


@dataclass
class SearchReport:
    best: TimedStrategy
    best_eu: float
    best_skeleton: Skeleton
    examined: int
    pruned_takeback: int
    pruned_costly_change: int
    pruned_redundant: int
    table: dict[Skeleton, float] = field(default_factory=dict)
    breakdown: EuBreakdown | None = None


def _pick(table: dict[Skeleton, float]) -> Skeleton:
    top = max(table.values())
    tied = [sk for sk, v in table.items() if v >= top - TIE_EPS]
    return min(tied, key=lambda sk: (len(sk), sk))


def best_strategy(inst: ProblemInstance, k: int, prune: bool = True, grid_points: int | None = None) -> SearchReport:
    """EU-optimal strategy over all skeletons of length <= k.

    With ``prune`` on, skeletons are skipped when a dominance test shows a
    shorter skeleton is at least as good: redundant shapes, take-backs after
    an entity that is always worth waiting for, and coordination changes
    whose cost exceeds anything they could save.
    """
    ids = [e.id for e in inst.entities]
    skeletons = enumerate_skeletons(ids, k, inst.coord.cap)
    d_bound = _d_cost_bound(inst)
    useless_takeback: dict[str, bool] = {}
    n_red = n_takeback = n_costly = 0
    results: dict[Skeleton, tuple[float, TimedStrategy, EuBreakdown]] = {}
    for sk in skeletons:
        if prune:
            if _redundant(inst, sk):
                n_red += 1
                continue
            n_d = sk.count("D")
            if n_d and inst.coord.cost(n_d) >= d_bound:
                n_costly += 1
                continue
            if len(sk) >= 2 and sk[-1] != "D" and sk[-2] != "D" and inst.entity(sk[-1]).is_agent:
                e = sk[-2]
                if e not in useless_takeback:
                    useless_takeback[e] = _takeback_useless(inst, e)
                if useless_takeback[e]:
                    n_takeback += 1
                    continue
        kw = {} if grid_points is None else {"grid_points": grid_points}
        strat, br = optimize_timings(inst, list(sk), **kw)
        results[sk] = (br.total, strat, br)
    table = {sk: v[0] for sk, v in results.items()}
    sk = _pick(table)
    eu, strat, br = results[sk]
    return SearchReport(strat, eu, sk, len(results), n_takeback, n_costly, n_red, table, br)


# ----------------------------------------------------------------------------
# Random-configuration experiment


@dataclass(frozen=True)
class ExperimentConfig:
    n_configs: int = 1000
    entities: tuple[int, int] = (3, 25)
    rate: tuple[float, float] = (0.01, 2.0)
    quality: tuple[float, float] = (0.0, 10.0)
    d_value: tuple[float, float] = (0.0, 5.0)
    d_cost: tuple[float, float] = (0.0, 5.0)
    wait_rates: tuple[float, ...] = (0.005, 0.02, 0.1, 0.5, 2.0)
    deadline: float = 20.0
    step: float = 0.25
    max_changes: int = 3


def _draw_config(rng: np.random.Generator, cfg: ExperimentConfig):
    n = int(rng.integers(cfg.entities[0], cfg.entities[1] + 1))
    rates = rng.uniform(*cfg.rate, size=n - 1)
    quals = rng.uniform(*cfg.quality, size=n)
    agent_q = float(quals.min())
    others = np.delete(quals, int(np.argmin(quals)))
    dv = float(rng.uniform(*cfg.d_value))
    dc = float(rng.uniform(*cfg.d_cost))
    omega = float(rng.choice(cfg.wait_rates))
    return omega, agent_q, rates, others, dv, dc


def clock_dp_strategy(
    omega: float,
    agent_q: float,
    rates: np.ndarray,
    quals: np.ndarray,
    d_value: float,
    d_cost: float,
    deadline: float,
    step: float,
    max_changes: int,
) -> tuple[list[str], float]:
    """Optimal strategy for memoryless, constant-quality entities.

    The continuation value only depends on the wait clock and the number of
    changes made, so a backward recursion over a uniform clock grid solves
    the problem.  Returns the strategy tokens on the no-response path (entity
    indices as strings, ``"D"`` and ``"A"``) and the EU.
    """
    n = int(round(deadline / step))
    shift = int(round(d_value / step))
    costs = np.full(max_changes + 1, d_cost)
    V, act = kernels.clock_dp(
        float(omega), float(agent_q), np.asarray(rates, float), np.asarray(quals, float),
        shift, costs, float(step), n, int(max_changes),
    )
    eu = float(V[0, 0]) - omega
    tokens: list[str] = []
    holder = None  # entity in control; a change does not end its transfer
    c, d = 0, 0
    while True:
        a = int(act[c, d])
        if c >= n:
            best = int(np.argmax(quals)) if len(quals) and quals.max() > agent_q else -1
            tok = "A" if best < 0 else str(best)
            if holder != tok:
                tokens.append(tok)
            break
        if a == -1:
            tokens.append("A")
            break
        if a == -2:
            tokens.append("D")
            c, d = max(c - shift, 0), d + 1
            continue
        tok = str(a)
        if holder != tok:
            tokens.append(tok)
            holder = tok
        c += 1
    return tokens, eu


def random_config_experiment(cfg: ExperimentConfig = ExperimentConfig(), seed: int = 0):
    """Histogram of optimal strategy lengths per wait-rate bucket.

    Returns ``{wait_rate: {length: percentage}}`` plus the raw lengths.
    """
    rng = np.random.default_rng(seed)
    lengths: dict[float, list[int]] = {w: [] for w in cfg.wait_rates}
    for _ in range(cfg.n_configs):
        omega, aq, rates, quals, dv, dc = _draw_config(rng, cfg)
        tokens, _ = clock_dp_strategy(omega, aq, rates, quals, dv, dc, cfg.deadline, cfg.step, cfg.max_changes)
        lengths[omega].append(len(tokens))
    hist = {}
    for w, ls in lengths.items():
        cnt = Counter(ls)
        tot = max(len(ls), 1)
        hist[w] = {L: 100.0 * c / tot for L, c in sorted(cnt.items())}
    return hist, lengths


def histogram_csv(hist: dict[float, dict[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["wait_rate_bucket", "length", "percentage"])
    for rate in sorted(hist):
        for L, pct in sorted(hist[rate].items()):
            w.writerow([f"{rate:g}", L, f"{pct:.6f}"])
    return buf.getvalue()
