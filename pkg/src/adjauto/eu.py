"""Expected utility of timed transfer-of-control strategies.

A strategy is evaluated segment by segment.  Inside a transfer segment the
controlling entity responds with its (conditional) response density and the
decision is worth its quality minus the accumulated wait cost and the cost
of the coordination changes taken so far.  A coordination change at time
``at`` moves the wait clock back to ``max(clock - value, 0)``; the clock then
keeps running, so the wait cost accrued after the change follows the shifted
clock.  Probability mass that never responds is worth zero quality and pays
the wait cost accumulated until the clock reaches the deadline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (
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
    TimedStrategy,
    Transfer,
    parse_strategy,
    validate_strategy,
)

__all__ = [
    "NumericError",
    "TwoEntityParams",
    "EuBreakdown",
    "ClosedForm",
    "eu_of_strategy",
    "eu_closed_form",
    "optimize_timings",
    "d_marginal_value",
    "integrate",
    "MEETING_TYPES",
    "LOCATION_RATES",
    "meeting_regime",
    "simple_strategy_table",
]

EPS_DELTA = 1e-6
_SURVIVAL_FLOOR = 1e-300


class NumericError(ArithmeticError):
    """Quadrature failed to converge; ``diagnostics`` says where."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


# ----------------------------------------------------------------------------
# Quadrature

_GL_N = 10
_x1, _w1 = np.polynomial.legendre.leggauss(_GL_N)
_x2, _w2 = np.polynomial.legendre.leggauss(2 * _GL_N)


def integrate(f, a: float, b: float, atol: float = 1e-10, rtol: float = 1e-12, max_intervals: int = 4096):
    """Adaptive composite Gauss-Legendre quadrature of a vector integrand.

    ``f`` maps an array of points to an array of shape ``(k, n)``.  Each
    subinterval is accepted when its 10- and 20-point rules agree; the
    others are bisected.  Returns an array of ``k`` integrals.
    """
    if b <= a:
        probe = np.atleast_2d(f(np.array([a])))
        return np.zeros(probe.shape[0])
    lo = np.array([a], dtype=float)
    hi = np.array([b], dtype=float)
    total = None
    scale = 0.0
    while lo.size:
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        p1 = (mid[:, None] + half[:, None] * _x1[None, :]).ravel()
        p2 = (mid[:, None] + half[:, None] * _x2[None, :]).ravel()
        v1 = np.atleast_2d(f(p1)).reshape(-1, lo.size, _GL_N)
        v2 = np.atleast_2d(f(p2)).reshape(-1, lo.size, 2 * _GL_N)
        i1 = (v1 * _w1).sum(axis=2) * half
        i2 = (v2 * _w2).sum(axis=2) * half
        if total is None:
            total = np.zeros(i2.shape[0])
            scale = float(np.abs(i2).sum())
        err = np.abs(i2 - i1).max(axis=0)
        frac = (hi - lo) / (b - a)
        ok = err <= np.maximum(atol * frac, rtol * max(scale, np.abs(i2).max()))
        if not np.all(np.isfinite(i2)):
            raise NumericError("non-finite integrand", {"interval": (a, b)})
        total += i2[:, ok].sum(axis=1)
        lo, hi = lo[~ok], hi[~ok]
        if lo.size:
            if lo.size > max_intervals or np.min(hi - lo) < 1e-13 * max(1.0, abs(b)):
                raise NumericError(
                    "adaptive quadrature did not converge",
                    {"interval": (a, b), "open_subintervals": int(lo.size), "worst": float(err.max())},
                )
            m = 0.5 * (lo + hi)
            lo, hi = np.concatenate([lo, m]), np.concatenate([m, hi])
    return total


# ----------------------------------------------------------------------------
# Result types


@dataclass
class EuBreakdown:
    total: float
    per_segment: list[tuple[str, float]]
    accumulated_wait: float
    coord_costs: float
    response_mass: float = 1.0

    def __float__(self):
        return self.total


class ClosedForm(NamedTuple):
    value: float
    limit_form: bool


@dataclass(frozen=True)
class TwoEntityParams:
    """Markovian user, constant qualities, exponential wait cost."""

    rho: float
    omega: float
    alpha: float
    beta: float
    deadline: float = 1e3
    d_value: float = 0.0
    d_cost: float = 0.0
    max_changes: int | None = None

    def __post_init__(self):
        if not (self.rho > 0 and self.omega > 0 and self.deadline > 0):
            raise ScenarioError("rho, omega and deadline must be > 0")

    @property
    def delta(self) -> float:
        return self.rho - self.omega

    def to_instance(self, user_id: str = "U") -> ProblemInstance:
        return ProblemInstance(
            entities=(
                Entity("A", True, ConstantQuality(self.alpha), Instant()),
                Entity(user_id, False, ConstantQuality(self.beta), Markovian(self.rho)),
            ),
            wait=ExponentialWait(self.omega, self.deadline),
            coord=CoordChangeModel(self.d_value, (self.d_cost,), self.max_changes),
        )


# ----------------------------------------------------------------------------
# Timeline helpers


class _Clock:
    """Wait clock and accrued wait cost as a function of real time."""

    def __init__(self, inst: ProblemInstance, d_times: Sequence[float]):
        self.W = inst.wait
        self.deadline = inst.wait.deadline
        dv = inst.coord.value
        self.W0 = float(self.W(0.0))
        # piece j starts at real time starts[j] with clock clk[j] and cost base[j]
        starts, clk, base = [0.0], [0.0], [self.W0]
        for d in sorted(d_times):
            c_before = clk[-1] + (d - starts[-1])
            cost_before = base[-1] + float(self.W(c_before)) - float(self.W(clk[-1]))
            starts.append(d)
            clk.append(max(c_before - dv, 0.0))
            base.append(cost_before)
        self.starts = np.array(starts)
        self.clk = np.array(clk)
        self.base = np.array(base)
        self.W_at_clk = np.array([float(self.W(c)) for c in clk])

    def piece(self, t):
        return np.searchsorted(self.starts, t, side="right") - 1

    def cost(self, t):
        t = np.asarray(t, dtype=float)
        j = self.piece(t)
        c = self.clk[j] + (t - self.starts[j])
        return self.base[j] + self.W(c) - self.W_at_clk[j]

    def cap_time(self) -> float:
        """Real time after which the clock stays at or above the deadline."""
        return float(self.starts[-1] + max(self.deadline - self.clk[-1], 0.0))

    def final_cost(self) -> float:
        j = len(self.starts) - 1
        return float(self.base[j] + self.W(self.deadline) - self.W_at_clk[j])

    def kinks(self, a: float, b: float) -> list[float]:
        """Times in (a, b) where the capped clock has a kink."""
        out = []
        for j in range(len(self.starts)):
            t = self.starts[j] + (self.deadline - self.clk[j])
            nxt = self.starts[j + 1] if j + 1 < len(self.starts) else INF
            if self.clk[j] < self.deadline and t < nxt and a < t < b:
                out.append(float(t))
        return out


def _table_nodes(e: Entity, a: float, b: float) -> list[float]:
    nodes = []
    for obj in (e.quality, e.response):
        ts = getattr(obj, "times", None)
        if ts is not None:
            nodes.extend(t for t in ts if a < t < b)
    return nodes


def eu_of_strategy(inst: ProblemInstance, s: TimedStrategy | str) -> EuBreakdown:
    """Expected utility of a fully timed strategy, with a per-segment breakdown."""
    if isinstance(s, str):
        s = parse_strategy(s, list(inst.by_id))
    problems = validate_strategy(s, inst)
    if problems:
        raise ScenarioError("invalid strategy: " + "; ".join(problems))

    # segments: (entity, start, end, D times inside the segment in order)
    segments: list[tuple[Entity, float, float, list[float]]] = []
    start = 0.0
    for a in s:
        if isinstance(a, Transfer):
            segments.append((inst.entity(a.entity), start, a.end_time, []))
            start = a.end_time
        else:
            segments[-1][3].append(a.at_time)
    d_times = [d for seg in segments for d in seg[3]]
    clock = _Clock(inst, d_times)
    dcum = np.concatenate([[0.0], np.cumsum([inst.coord.cost(k) for k in range(1, len(d_times) + 1)])])
    d_sorted = np.array(sorted(d_times))

    surv = 1.0
    parts: list[tuple[str, float]] = []
    exp_wait = 0.0
    exp_dcost = 0.0
    n_before = 0  # D's preceding the current segment in sequence order

    for ent, a, b, ds in segments:
        if surv <= 0.0:
            parts.append((f"{ent.id}[{a:g},{b:g}) unreachable", 0.0))
            n_before += len(ds)
            continue
        if ent.is_agent:
            # D's listed inside the agent's segment come after its decision
            cost = float(clock.cost(a))
            dc = float(dcum[n_before])
            val = surv * (float(ent.quality(a)) - cost - dc)
            parts.append((f"{ent.id}@{a:g}", val))
            exp_wait += surv * cost
            exp_dcost += surv * dc
            surv = 0.0
            n_before += len(ds)
            continue
        resp = ent.response
        s_a = float(resp.survival(a))
        if s_a <= _SURVIVAL_FLOOR:
            parts.append((f"{ent.id}[{a:g},{b:g}) exhausted", 0.0))
            n_before += len(ds)
            continue
        scale = surv / s_a
        # integrate to where everything becomes constant, tail analytically
        horizon = max(clock.cap_time(), ent.quality.table_end, a)
        hi = min(b, horizon) if isinstance(resp, Markovian) else min(b, max(horizon, resp.support_end))
        hi = max(hi, a)
        cuts = sorted({a, hi, *[d for d in d_sorted if a < d < hi], *clock.kinks(a, hi), *_table_nodes(ent, a, hi)})

        def f(t, ent=ent, resp=resp):
            dens = resp.density(t) * scale
            k = np.searchsorted(d_sorted, t, side="right")
            return np.vstack([dens * ent.quality(t), dens * clock.cost(t), dens * dcum[k]])

        q_part = w_part = d_part = 0.0
        for lo, up in zip(cuts[:-1], cuts[1:]):
            try:
                iq, iw, idc = integrate(f, lo, up)
            except NumericError as exc:
                exc.diagnostics.update(entity=ent.id, segment=(a, b))
                raise
            q_part += iq
            w_part += iw
            d_part += idc
        # constant tail beyond ``hi`` up to ``b``
        if b > hi:
            s_end = float(resp.survival(b)) if not math.isinf(b) else 1.0 - resp.total_mass
            tail_mass = scale * (float(resp.survival(hi)) - s_end)
            if tail_mass > 0:
                k = int(np.searchsorted(d_sorted, hi, side="right"))
                cost_tail = float(clock.cost(hi)) if hi >= clock.cap_time() else None
                if cost_tail is None:
                    raise NumericError("tail integration started before the wait clock saturated", {"hi": hi})
                q_part += tail_mass * ent.quality.last
                w_part += tail_mass * cost_tail
                d_part += tail_mass * dcum[k]
        val = q_part - w_part - d_part
        parts.append((f"{ent.id}[{a:g},{b:g})", float(val)))
        exp_wait += w_part
        exp_dcost += d_part
        if not math.isinf(b):
            surv = scale * float(resp.survival(b))
        elif isinstance(resp, Markovian):
            surv = 0.0
        else:
            surv = scale * max(1.0 - resp.total_mass, 0.0)
        n_before += len(ds)

    if surv > 0.0:
        cost = clock.final_cost()
        dc = float(dcum[-1])
        val = surv * (0.0 - cost - dc)
        parts.append(("no response", val))
        exp_wait += surv * cost
        exp_dcost += surv * dc
    total = float(sum(v for _, v in parts))
    return EuBreakdown(total, parts, float(exp_wait), float(exp_dcost), 1.0 - surv)


# ----------------------------------------------------------------------------
# Closed forms for the Markovian / exponential / constant-quality model


def _phi(x: float, delta: float) -> tuple[float, bool]:
    """``(exp(-x*delta) - 1) / delta`` with its limit near ``delta = 0``."""
    if abs(delta) > EPS_DELTA:
        return math.expm1(-x * delta) / delta, False
    z = x * delta
    return -x * (1 - z / 2 + z * z / 6 - z**3 / 24), True


def eu_closed_form(p: TwoEntityParams, kind: str, T: float | None = None, delta_t: float | None = None) -> ClosedForm:
    """Analytic EU of strategies ``A``, ``e``, ``eA`` and ``eDeA``.

    ``T`` is the take-back time, ``delta_t`` the time of the coordination
    change.  Forms dividing by ``rho - omega`` switch to a series near zero.
    """
    rho, om, al, be = p.rho, p.omega, p.alpha, p.beta
    d = p.delta
    if kind == "A":
        return ClosedForm(al - om, False)
    if kind == "e":
        L = p.deadline
        ph, lim = _phi(L, d)
        return ClosedForm(om * rho * ph - om * math.exp(-L * d) + be, lim)
    if kind == "eA":
        if T is None or not 0 <= T <= p.deadline:
            raise ValueError("eA needs 0 <= T <= deadline")
        ph, lim = _phi(T, d)
        return ClosedForm(om * rho * ph - om * math.exp(-T * d) + math.exp(-rho * T) * (al - be) + be, lim)
    if kind == "eDeA":
        if T is None or delta_t is None:
            raise ValueError("eDeA needs T and delta_t")
        dv, dc = p.d_value, p.d_cost
        D = delta_t
        if not (dv <= D <= T and T - dv <= p.deadline and D <= p.deadline):
            raise ValueError("eDeA closed form needs d_value <= delta_t <= T and clocks below the deadline")
        phD, l1 = _phi(D, d)
        phT, l2 = _phi(T, d)
        eD, eT = math.exp(-rho * D), math.exp(-rho * T)
        shrink = math.exp(-om * dv)
        v = (
            rho * om * phD
            + be * (1 - eD)
            + rho * om * shrink * (phT - phD)
            + (dc - be) * (eT - eD)
            + om * math.exp(D * om) * (shrink - 1) * (eD - eT)
            - eT * (dc - al + om * (math.exp(om * D) - math.exp(om * (D - dv)) + math.exp(om * (T - dv))))
        )
        return ClosedForm(v, l1 or l2)
    raise ValueError(f"unknown strategy kind {kind!r}")


def closed_form_strategy(kind: str, T: float | None = None, delta_t: float | None = None, user: str = "U") -> TimedStrategy:
    """The timed strategy whose EU ``eu_closed_form`` computes."""
    if kind == "A":
        return TimedStrategy([Transfer("A", 0.0)])
    if kind == "e":
        return TimedStrategy([Transfer(user, INF)])
    if kind == "eA":
        return TimedStrategy([Transfer(user, T), Transfer("A", INF)])
    if kind == "eDeA":
        return TimedStrategy([Transfer(user, delta_t), CoordChange(delta_t), Transfer(user, T), Transfer("A", INF)])
    raise ValueError(f"unknown strategy kind {kind!r}")


# ----------------------------------------------------------------------------
# Timing optimisation

GRID_POINTS = 24


def _skeleton_tokens(inst: ProblemInstance, skeleton) -> list[str]:
    if isinstance(skeleton, str):
        toks = [a.entity if isinstance(a, Transfer) else "D" for a in parse_strategy(skeleton, list(inst.by_id))]
    else:
        toks = list(skeleton)
    if not toks or toks[0] == "D":
        raise ScenarioError("skeleton must start with an entity")
    for t in toks:
        if t != "D" and t not in inst.by_id:
            raise ScenarioError(f"unknown entity {t!r} in skeleton")
    if toks.count("D") > inst.coord.cap:
        raise ScenarioError(f"skeleton has {toks.count('D')} coordination changes, cap is {inst.coord.max_changes}")
    return toks


class _Layout:
    """Maps a box of free coordinates to a timed strategy.

    Coordinates are durations of the non-final, non-agent transfers and the
    offsets of coordination changes inside their segment (a fraction of the
    segment for finite segments, absolute time for the final one).
    """

    def __init__(self, inst: ProblemInstance, toks: list[str], horizon: float):
        self.inst = inst
        self.toks = toks
        self.horizon = horizon
        last_t = max(i for i, t in enumerate(toks) if t != "D")
        self.kinds: list[tuple[str, int]] = []  # (kind, token index)
        for i, t in enumerate(toks):
            if t == "D":
                self.kinds.append(("d", i))
            elif i != last_t and not inst.entity(t).is_agent:
                self.kinds.append(("dur", i))
        self.last_t = last_t

    def bounds(self, j: int) -> tuple[float, float]:
        kind, i = self.kinds[j]
        if kind == "dur":
            return 0.0, self.horizon
        seg_final = not any(t != "D" for t in self.toks[i + 1 :]) and not self.inst.entity(self._owner(i)).is_agent
        return (0.0, self.horizon) if seg_final else (0.0, 1.0)

    def _owner(self, i: int) -> str:
        return next(self.toks[k] for k in range(i, -1, -1) if self.toks[k] != "D")

    def build(self, x: np.ndarray) -> TimedStrategy:
        val = {i: x[j] for j, (_, i) in enumerate(self.kinds)}
        actions = []
        t = 0.0
        seg_start = 0.0
        pending: list[float] = []
        seg_is_final = False

        def flush(end):
            # coordination changes of the closing segment, sorted in time
            for off in sorted(pending):
                at = seg_start + (off if seg_is_final else off * (end - seg_start))
                actions.append(CoordChange(at))
            pending.clear()

        seg_owner = None
        for i, tok in enumerate(self.toks):
            if tok == "D":
                pending.append(float(val[i]))
                continue
            if seg_owner is not None:
                flush(t)
            ent = self.inst.entity(tok)
            seg_start = t
            if i == self.last_t:
                end = INF if not ent.is_agent else INF
                seg_is_final = True
            elif ent.is_agent:
                end = t
                seg_is_final = False
            else:
                end = t + float(val[i])
                seg_is_final = False
            actions.append(Transfer(tok, end))
            seg_owner = tok
            t = end if not math.isinf(end) else t
        flush(t)
        # D's after a final agent transfer are unreachable; place them at its start
        return TimedStrategy(actions)


def _eval(inst, layout, x):
    try:
        return eu_of_strategy(inst, layout.build(x)).total
    except NumericError:
        return -INF


def optimize_timings(inst: ProblemInstance, skeleton, grid_points: int = GRID_POINTS, horizon: float | None = None):
    """Best timings for an untimed skeleton by coordinate ascent.

    Each coordinate is scanned on a uniform grid and the best grid point is
    refined by a bounded scalar search in its bracket.  Sweeps repeat until
    no coordinate improves the EU by more than 1e-9.
    """
    toks = _skeleton_tokens(inst, skeleton)
    if horizon is None:
        horizon = inst.deadline + toks.count("D") * inst.coord.value
        for e in inst.entities:
            horizon = max(horizon, e.quality.table_end, getattr(e.response, "support_end", 0.0) if not isinstance(e.response, Markovian) else 0.0)
    layout = _Layout(inst, toks, horizon)
    n = len(layout.kinds)
    x = np.array([min(1.0, layout.bounds(j)[1]) * (0.5 if layout.bounds(j)[1] <= 1 else 0.0) for j in range(n)], dtype=float)
    best = _eval(inst, layout, x)
    improved = n > 0
    sweeps = 0
    while improved and sweeps < 50:
        improved = False
        sweeps += 1
        for j in range(n):
            lo, hi = layout.bounds(j)
            grid = np.linspace(lo, hi, grid_points + 1)
            vals = []
            for g in grid:
                y = x.copy()
                y[j] = g
                vals.append(_eval(inst, layout, y))
            k = int(np.argmax(vals))
            cand_x, cand_v = grid[k], vals[k]
            a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid_points)]
            if b > a:

                def neg(z, j=j):
                    y = x.copy()
                    y[j] = z
                    return -_eval(inst, layout, y)

                r = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-7 * max(1.0, hi)})
                if -r.fun > cand_v:
                    cand_x, cand_v = float(r.x), -float(r.fun)
            if cand_v > best + 1e-9:
                x[j] = cand_x
                best = cand_v
                improved = True
    strat = layout.build(x)
    return strat, eu_of_strategy(inst, strat)


def d_marginal_value(inst: ProblemInstance, s: TimedStrategy | str, at: float) -> float:
    """EU gained by inserting a coordination change at ``at``, before its cost."""
    if isinstance(s, str):
        s = parse_strategy(s, list(inst.by_id))
    if any(isinstance(a, CoordChange) and a.at_time == at for a in s):
        raise ScenarioError(f"strategy already changes coordination at {at}")
    actions = list(s)
    # insert after the transfer whose segment holds ``at`` and after earlier D's
    start = 0.0
    pos = None
    for i, a in enumerate(actions):
        if isinstance(a, Transfer):
            if start <= at <= a.end_time:
                pos = i + 1
                while pos < len(actions) and isinstance(actions[pos], CoordChange) and actions[pos].at_time <= at:
                    pos += 1
                break
            start = a.end_time
    if pos is None:
        raise ScenarioError(f"no transfer segment contains time {at}")
    new = TimedStrategy(actions[:pos] + [CoordChange(at)] + actions[pos:])
    free = replace(inst, coord=replace(inst.coord, costs=(0.0,), max_changes=None))
    if validate_strategy(new, free):
        raise ScenarioError("inserting the coordination change makes the strategy invalid")
    return eu_of_strategy(free, new).total - eu_of_strategy(free, s).total


# ----------------------------------------------------------------------------
# Meeting-attendance regimes (times in minutes)

# user response rate by where the user is
LOCATION_RATES = {"office": 1 / 5, "not-at-dept": 1 / 60, "at-meeting-loc": 1 / 10}
# (omega, agent quality, user quality) by meeting size
MEETING_TYPES = {"small": (0.5, 15.3, 45.0), "large": (1.0, 15.6, 40.0)}


def meeting_regime(meeting: str, location: str, deadline: float = 60.0, d_value: float = 5.0,
                   d_cost: float = 1.0) -> TwoEntityParams:
    try:
        om, al, be = MEETING_TYPES[meeting]
        rho = LOCATION_RATES[location]
    except KeyError as exc:
        raise ScenarioError(f"unknown meeting regime {exc.args[0]!r}") from None
    return TwoEntityParams(rho, om, al, be, deadline, d_value=d_value, d_cost=d_cost, max_changes=1)


def simple_strategy_table(p: TwoEntityParams) -> dict[str, tuple[float, TimedStrategy]]:
    """EU of the four short strategies A, e, eA and eDA, timings optimized."""
    inst = p.to_instance()
    out = {}
    for kind in ("A", "e"):
        out[kind] = (eu_closed_form(p, kind).value, closed_form_strategy(kind))
    for kind, sk in (("eA", ["U", "A"]), ("eDA", ["U", "D", "A"])):
        s, br = optimize_timings(inst, sk)
        out[kind] = (br.total, s)
    return out
