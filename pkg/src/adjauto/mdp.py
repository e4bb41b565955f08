"""Compilation of adjustable-autonomy problems into explicit finite MDPs.

An :class:`AaMdp` is stored in compressed-sparse-row form: the actions of
state ``s`` are ``sa_ptr[s]:sa_ptr[s+1]`` and the outcomes of state-action
pair ``a`` are ``tr_ptr[a]:tr_ptr[a+1]``.  Rewards live on state-action pairs
(``sa_reward``), on individual outcomes (``tr_reward``) and on terminal
states (``terminal_reward``).  Costs are stored as magnitudes by the models
and enter these arrays with a minus sign.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .model import ProblemInstance, ScenarioError, load_scenario, scenario_from_dict

__all__ = [
    "AaState",
    "AaAction",
    "AaMdp",
    "build_abstract_mdp",
    "DelayScenario",
    "team_reward",
    "agent_decision_quality",
    "user_decision_quality",
    "build_delay_mdp",
    "AuctionScenario",
    "build_auction_mdp",
    "auction_close_quality",
    "load_mdp",
    "mdp_from_table",
]


@dataclass(frozen=True)
class AaState:
    controller: str
    response: str | None
    time_index: int
    d_count: int = 0
    team_expect: float = 0.0
    team_orig_expect: float = 0.0
    agent_expect: str = ""
    activity_status: str = ""

    @property
    def terminal(self) -> bool:
        return self.response is not None


@dataclass(frozen=True)
class AaAction:
    kind: str  # transfer | wait | coord | decide
    target: str | None = None

    def __post_init__(self):
        if self.kind not in ("transfer", "wait", "coord", "decide"):
            raise ValueError(f"unknown action kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "transfer":
            return f"transfer:{self.target}"
        if self.kind == "decide":
            return f"decide:{self.target}"
        return self.kind

    def __str__(self):
        return self.label


WAIT = AaAction("wait")
COORD = AaAction("coord")


@dataclass
class AaMdp:
    states: list[AaState]
    actions: list[AaAction]
    initial: int
    is_terminal: np.ndarray
    terminal_reward: np.ndarray
    sa_ptr: np.ndarray
    sa_action: np.ndarray
    sa_reward: np.ndarray
    tr_ptr: np.ndarray
    tr_succ: np.ndarray
    tr_prob: np.ndarray
    tr_reward: np.ndarray
    order: np.ndarray
    acyclic: bool
    features: dict[str, np.ndarray] = field(default_factory=dict)
    value_offset: float = 0.0
    agent_id: str = "A"
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_sa(self) -> int:
        return len(self.sa_action)

    @cached_property
    def graph(self):
        """Arrays bundled for the value-iteration kernels."""
        from . import kernels

        return kernels.Graph(self.order, self.is_terminal, self.terminal_reward, self.sa_ptr, self.sa_reward,
                             self.tr_ptr, self.tr_succ, self.tr_prob, self.tr_reward)

    @cached_property
    def first_action(self) -> np.ndarray:
        """First state-action index of each state, -1 for states without actions."""
        return np.where(np.diff(self.sa_ptr) > 0, self.sa_ptr[:-1], -1)

    @cached_property
    def sa_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_states, dtype=np.int64), np.diff(self.sa_ptr))

    @cached_property
    def tr_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_sa, dtype=np.int64), np.diff(self.tr_ptr))

    @cached_property
    def predecessors(self) -> tuple[np.ndarray, np.ndarray]:
        """Reverse CSR: for each state, the state-action pairs reaching it
        with positive probability."""
        pos = self.tr_prob > 0
        succ = self.tr_succ[pos]
        sa = self.tr_owner[pos]
        idx = np.argsort(succ, kind="stable")
        counts = np.bincount(succ, minlength=self.n_states)
        ptr = np.zeros(self.n_states + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return ptr, np.ascontiguousarray(sa[idx], dtype=np.int64)

    def action_of(self, a: int) -> AaAction:
        return self.actions[self.sa_action[a]]

    def state_actions(self, s: int) -> range:
        return range(self.sa_ptr[s], self.sa_ptr[s + 1])

    def outcomes(self, a: int):
        for j in range(self.tr_ptr[a], self.tr_ptr[a + 1]):
            yield int(self.tr_succ[j]), float(self.tr_prob[j]), float(self.tr_reward[j])

    @cached_property
    def sa_features(self) -> dict[str, np.ndarray]:
        acts = self.actions
        kind = np.array([acts[i].kind for i in self.sa_action], dtype=object)
        target = np.array([acts[i].target or "" for i in self.sa_action], dtype=object)
        label = np.array([acts[i].label for i in self.sa_action], dtype=object)
        return {"action": label, "kind": kind, "target": target}

    def validate(self, tol: float = 1e-9) -> list[str]:
        problems = []
        if np.any(self.tr_prob < 0) or np.any(self.tr_prob > 1 + tol):
            problems.append("probabilities outside [0, 1]")
        sums = np.add.reduceat(self.tr_prob, self.tr_ptr[:-1]) if self.n_sa else np.zeros(0)
        empty = np.diff(self.tr_ptr) == 0
        if np.any(empty):
            problems.append("state-action pair without outcomes")
        bad = np.where(~empty & (np.abs(sums - 1.0) > tol))[0]
        if bad.size:
            problems.append(f"{bad.size} outcome distributions do not sum to 1")
        nonterm_no_act = np.where(~self.is_terminal.astype(bool) & (np.diff(self.sa_ptr) == 0))[0]
        if nonterm_no_act.size:
            problems.append(f"{nonterm_no_act.size} nonterminal states without actions")
        if np.any(np.diff(self.sa_ptr)[self.is_terminal.astype(bool)] != 0):
            problems.append("terminal states with actions")
        return problems

    def dump(self) -> str:
        """One line per outcome: state, action, successor, probability, reward."""
        buf = io.StringIO()
        buf.write("# state_id action successor_id probability reward\n")
        for s in range(self.n_states):
            if self.is_terminal[s]:
                buf.write(f"{s} terminal - 1 {self.terminal_reward[s]:.12g}\n")
                continue
            for a in self.state_actions(s):
                lab = self.action_of(a).label
                for x, p, r in self.outcomes(a):
                    buf.write(f"{s} {lab} {x} {p:.12g} {self.sa_reward[a] + r:.12g}\n")
        return buf.getvalue()


class _Builder:
    """Incremental construction; states are deduplicated by key."""

    def __init__(self):
        self.index: dict[Any, int] = {}
        self.states: list[AaState] = []
        self.term: list[bool] = []
        self.treward: list[float] = []
        self.action_index: dict[AaAction, int] = {}
        self.actions: list[AaAction] = []
        self.sas: dict[int, list] = {}

    def state(self, key, st: AaState, terminal: bool = False, reward: float = 0.0) -> int:
        i = self.index.get(key)
        if i is None:
            i = len(self.states)
            self.index[key] = i
            self.states.append(st)
            self.term.append(terminal)
            self.treward.append(reward)
        return i

    def act(self, s: int, action: AaAction, reward: float, outcomes: Iterable[tuple[int, float, float]]):
        ai = self.action_index.get(action)
        if ai is None:
            ai = len(self.actions)
            self.action_index[action] = ai
            self.actions.append(action)
        merged: dict[int, list[float]] = {}
        for x, p, r in outcomes:
            if p <= 0:
                continue
            if x in merged:
                # identical successors merge; their rewards must agree
                q, rr = merged[x]
                if abs(rr - r) > 1e-12:
                    raise ValueError("outcomes into one successor with different rewards")
                merged[x] = [q + p, rr]
            else:
                merged[x] = [p, r]
        self.sas.setdefault(s, []).append((ai, reward, sorted(merged.items())))

    def build(self, initial: int, features: dict[str, list], **kw) -> AaMdp:
        ns = len(self.states)
        sa_ptr = np.zeros(ns + 1, dtype=np.int64)
        sa_action, sa_reward, tr_ptr, tr_succ, tr_prob, tr_reward = [], [], [0], [], [], []
        for s in range(ns):
            for ai, rew, outs in self.sas.get(s, []):
                sa_action.append(ai)
                sa_reward.append(rew)
                for x, (p, r) in outs:
                    tr_succ.append(x)
                    tr_prob.append(p)
                    tr_reward.append(r)
                tr_ptr.append(len(tr_succ))
            sa_ptr[s + 1] = len(sa_action)
        tr_succ_a = np.array(tr_succ, dtype=np.int64)
        tr_ptr_a = np.array(tr_ptr, dtype=np.int64)
        order, acyclic = _topological(ns, sa_ptr, tr_ptr_a, tr_succ_a)
        feats = {k: np.array(v, dtype=object if isinstance(v[0], str) or v[0] is None else float) for k, v in features.items()}
        return AaMdp(
            states=self.states,
            actions=self.actions,
            initial=initial,
            is_terminal=np.array(self.term, dtype=np.uint8),
            terminal_reward=np.array(self.treward, dtype=float),
            sa_ptr=sa_ptr,
            sa_action=np.array(sa_action, dtype=np.int64),
            sa_reward=np.array(sa_reward, dtype=float),
            tr_ptr=tr_ptr_a,
            tr_succ=tr_succ_a,
            tr_prob=np.array(tr_prob, dtype=float),
            tr_reward=np.array(tr_reward, dtype=float),
            order=order,
            acyclic=acyclic,
            features=feats,
            **kw,
        )


def _topological(ns, sa_ptr, tr_ptr, tr_succ) -> tuple[np.ndarray, bool]:
    """Post-order of an iterative DFS: successors come before predecessors."""
    color = np.zeros(ns, dtype=np.int8)
    order = []
    acyclic = True
    for root in range(ns):
        if color[root]:
            continue
        stack = [(root, iter(tr_succ[tr_ptr[sa_ptr[root]] : tr_ptr[sa_ptr[root + 1]]]))]
        color[root] = 1
        while stack:
            s, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                color[s] = 2
                order.append(s)
                continue
            nxt = int(nxt)
            if color[nxt] == 1:
                acyclic = False
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(tr_succ[tr_ptr[sa_ptr[nxt]] : tr_ptr[sa_ptr[nxt + 1]]])))
    return np.array(order, dtype=np.int64), acyclic


def _state_features(states: list[AaState], extra: dict[str, list] | None = None) -> dict[str, list]:
    f = {
        "controller": [s.controller for s in states],
        "response": [s.response or "" for s in states],
        "terminal": [float(s.terminal) for s in states],
        "time_index": [float(s.time_index) for s in states],
        "d_count": [float(s.d_count) for s in states],
        "team_expect": [float(s.team_expect) for s in states],
        "team_orig_expect": [float(s.team_orig_expect) for s in states],
        "agent_expect": [s.agent_expect for s in states],
        "status": [s.activity_status for s in states],
    }
    if extra:
        f.update(extra)
    return f


# ----------------------------------------------------------------------------
# Abstract MDP over a problem instance


def build_abstract_mdp(inst: ProblemInstance, grid: float, allow_coord: bool = True) -> AaMdp:
    """Discretize an instance on a uniform time grid.

    Nonterminal states are (controller, time index, changes used).  The time
    index is the team's wait clock, which a coordination change moves back.
    Holding control for a step either ends in a response terminal worth the
    responder's quality or moves one step on and pays the wait-cost increment.
    """
    L = inst.deadline
    n = int(round(L / grid))
    if n < 1 or abs(n * grid - L) > 1e-9 * max(1.0, L):
        raise ScenarioError(f"grid step {grid} does not divide the deadline {L}")
    cap = inst.coord.max_changes if allow_coord else 0
    if cap is None:
        raise ScenarioError("the abstract MDP needs a finite max_changes")
    dv = inst.coord.value
    shift = int(round(dv / grid))
    if allow_coord and cap > 0 and abs(shift * grid - dv) > 1e-9 * max(1.0, dv):
        raise ScenarioError(f"coordination value {dv} is not a multiple of the grid step {grid}")
    agent = inst.agent.id
    times = np.arange(n + 1) * grid
    W = np.asarray(inst.wait(times), dtype=float)
    b = _Builder()

    def nonterm(c, k, d):
        return b.state(("s", c, k, d), AaState(c, None, k, d, team_expect=float(times[k])))

    def responded(e, k, d):
        q = float(inst.entity(e).quality(times[k]))
        return b.state(("r", e, k, d), AaState(e, e, k, d, team_expect=float(times[k])), True, q)

    def deadline(c, d):
        return b.state(("t", c, d), AaState(c, "none", n, d, team_expect=float(times[n])), True, 0.0)

    hazard = {}
    for e in inst.entities:
        if e.is_agent:
            continue
        F = np.asarray(e.response.cdf(times), dtype=float)
        h = np.zeros(n)
        surv = 1.0 - F[:-1]
        ok = surv > 1e-300
        h[ok] = (F[1:][ok] - F[:-1][ok]) / surv[ok]
        hazard[e.id] = np.clip(h, 0.0, 1.0)

    init = nonterm(agent, 0, 0)
    # d descending, k descending: successors are always created already or later
    for d in range(cap, -1, -1):
        for k in range(n - 1, -1, -1):
            for c in [e.id for e in inst.entities]:
                s = nonterm(c, k, d)
                nxt = (lambda cc: deadline(cc, d) if k + 1 == n else nonterm(cc, k + 1, d))
                step_cost = -(W[k + 1] - W[k])
                for e in inst.entities:
                    if e.is_agent:
                        b.act(s, AaAction("transfer", e.id), 0.0, [(responded(e.id, k, d), 1.0, 0.0)])
                        continue
                    p = float(hazard[e.id][k])
                    outs = [(responded(e.id, k, d), p, 0.0), (nxt(e.id), 1.0 - p, step_cost)]
                    if e.id == c:
                        b.act(s, WAIT, 0.0, outs)
                    else:
                        b.act(s, AaAction("transfer", e.id), 0.0, outs)
                if c == agent:
                    b.act(s, WAIT, 0.0, [(nxt(agent), 1.0, step_cost)])
                if d < cap:
                    b.act(s, COORD, -inst.coord.cost(d + 1), [(nonterm(c, max(k - shift, 0), d + 1), 1.0, 0.0)])
    feats = _state_features(b.states, {"time": [float(s.team_expect) for s in b.states]})
    return b.build(init, feats, value_offset=-float(W[0]), agent_id=agent, meta={"kind": "abstract", "grid": grid})


# ----------------------------------------------------------------------------
# Delay MDP

LOCATIONS = ("office", "not-at-dept", "at-meeting-loc")
DECISIONS = ("attending", "not-attending", "cancel")


@dataclass(frozen=True)
class DelayScenario:
    """Meeting-attendance decision.  Times are in minutes."""

    step: float = 5.0
    start: float = -20.0  # decision window opens this long before the meeting
    late_limit: float = 30.0  # attendees give up waiting after this long
    delay_minutes: float = 15.0
    max_delays: int = 3
    orig_meeting: float = 690.0  # minutes after midnight
    locations: tuple[str, ...] = LOCATIONS
    arrived: str = "at-meeting-loc"
    initial_location: str = "office"
    transitions: tuple[tuple[float, ...], ...] = (
        (0.80, 0.05, 0.15),
        (0.08, 0.87, 0.05),
        (0.00, 0.00, 1.00),
    )
    response_mean: tuple[float, ...] = (19.0, 12.0, 58.0)  # minutes, per location
    ask_cost: tuple[float, ...] = (0.23, 0.09, 0.15)  # q(e) per location/channel
    lam1: float = 0.5  # team repair cost weight
    lam2: float = 1.0  # team wait cost weight
    lam3: float = 1.0  # joint task weight
    lam4: float = 1.0  # transfer-of-control cost weight
    attendees: int = 5
    repair_base: float = 0.006
    repair_escalation: float = 2.0
    wait_rate: float = 0.05
    wait_growth: float = 0.15
    r_activity: float = 0.25
    r_user: float = 1.5

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        nl = len(self.locations)
        if P.shape != (nl, nl) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
            raise ScenarioError("location matrix must be square, nonnegative, rows summing to 1")
        if self.arrived not in self.locations or self.initial_location not in self.locations:
            raise ScenarioError("arrived/initial location must be declared locations")
        if len(self.response_mean) != nl or len(self.ask_cost) != nl:
            raise ScenarioError("response_mean and ask_cost need one entry per location")
        if min(self.lam1, self.lam2, self.lam3, self.lam4) < 0:
            raise ScenarioError("lambda weights must be >= 0")
        for name in ("start", "late_limit", "delay_minutes"):
            v = getattr(self, name)
            if abs(v / self.step - round(v / self.step)) > 1e-9:
                raise ScenarioError(f"{name} must be a multiple of the time step")
        if self.start >= self.late_limit or self.step <= 0:
            raise ScenarioError("need start < late_limit and step > 0")
        if not 0 <= self.max_delays <= 3:
            raise ScenarioError("at most three delays are allowed (a fourth has infinite cost)")

    @property
    def P(self) -> np.ndarray:
        return np.asarray(self.transitions, dtype=float)

    @property
    def d_steps(self) -> int:
        return int(round(self.delay_minutes / self.step))

    @property
    def rel_min(self) -> int:
        return int(round(self.start / self.step)) - self.max_delays * self.d_steps

    @property
    def rel_max(self) -> int:
        return int(round(self.late_limit / self.step))

    def response_prob(self, loc: int) -> float:
        m = self.response_mean[loc]
        return 0.0 if math.isinf(m) else -math.expm1(-self.step / m)

    def repair_cost(self, n_prior: int) -> float:
        """g: cost of the next delay after ``n_prior`` earlier ones (inf from the 4th)."""
        if n_prior + 1 >= 4:
            return math.inf
        return self.repair_base * self.attendees * self.delay_minutes * self.repair_escalation**n_prior

    def lateness_cost(self, late: float) -> float:
        """h: cost of attendees waiting ``late`` minutes (0 when not late)."""
        if late <= 0:
            return 0.0
        return self.attendees * self.wait_rate * math.expm1(late * self.wait_growth)

    def replace(self, **kw) -> "DelayScenario":
        from dataclasses import replace

        return replace(self, **kw)


def delay_scenario_from_dict(d: dict) -> DelayScenario:
    allowed = set(DelayScenario.__dataclass_fields__)
    extra = set(d) - allowed - {"kind"}
    if extra:
        raise ScenarioError(f"delay scenario: unknown field(s) {sorted(extra)}")
    kw = {k: v for k, v in d.items() if k != "kind"}
    for key in ("locations", "response_mean", "ask_cost"):
        if key in kw:
            kw[key] = tuple(math.inf if v is None else v for v in kw[key]) if key == "response_mean" else tuple(kw[key])
    if "transitions" in kw:
        kw["transitions"] = tuple(tuple(map(float, r)) for r in kw["transitions"])
    return DelayScenario(**kw)


def _arrival(sc: DelayScenario, loc: int, n: int) -> tuple[np.ndarray, float]:
    """First-arrival probabilities at steps 0..n and the mass not arriving by n."""
    P = sc.P
    arr = sc.locations.index(sc.arrived)
    out = np.zeros(n + 1)
    if loc == arr:
        out[0] = 1.0
        return out, 0.0
    v = np.zeros(len(sc.locations))
    v[loc] = 1.0
    for j in range(1, n + 1):
        v = v @ P
        out[j] = v[arr]
        v[arr] = 0.0
    return out, float(v.sum())


def _outcome_table(sc: DelayScenario, rel: float, n_prior: int, loc: int):
    """Per arrival path, the value of each decision.

    Returns (path probabilities, values[path, option]) where options are the
    three announcements followed by ``m = 1..`` further delays chosen with
    knowledge of the arrival time.
    """
    L = sc.late_limit
    n = max(int(round((L - rel) / sc.step)), 0)
    arr, never = _arrival(sc, loc, n)
    lam1, lam2, lam3 = sc.lam1, sc.lam2, sc.lam3
    sunk = sc.lateness_cost(rel)
    probs = np.append(arr, never)
    n_delay = max(sc.max_delays - n_prior, 0)
    vals = np.zeros((n + 2, 3 + n_delay))
    for j in range(n + 2):
        arrives = j <= n
        a = rel + j * sc.step
        if arrives:
            att = lam3 * (sc.r_activity + sc.r_user) - lam2 * (sc.lateness_cost(a) - sunk)
        else:
            att = lam3 * sc.r_activity - lam2 * (sc.lateness_cost(L) - sunk)
        vals[j, 0] = att
        vals[j, 1] = lam3 * sc.r_activity
        vals[j, 2] = 0.0
        repair = 0.0
        for m in range(1, n_delay + 1):
            repair += sc.repair_cost(n_prior + m - 1)
            shift = m * sc.delay_minutes
            base = sc.lateness_cost(rel - shift)
            if arrives:
                v = lam3 * (sc.r_activity + sc.r_user) - lam2 * (sc.lateness_cost(a - shift) - base)
            else:
                v = lam3 * sc.r_activity - lam2 * (sc.lateness_cost(L) - base)
            vals[j, 2 + m] = v - lam1 * repair
    return probs, vals


def agent_decision_quality(sc: DelayScenario, state: AaState, decision: str) -> float:
    """Expected reward of announcing ``decision`` now, by forward simulation
    of the user's location until arrival or until attendees stop waiting."""
    if decision not in DECISIONS:
        raise ValueError(f"unknown decision {decision!r}")
    rel = state.team_expect
    loc = sc.locations.index(state.agent_expect)
    probs, vals = _outcome_table(sc, rel, state.d_count, loc)
    return float(probs @ vals[:, DECISIONS.index(decision)])


def user_decision_quality(sc: DelayScenario, state: AaState) -> float:
    """The user knows when they will arrive and picks the best option."""
    rel = state.team_expect
    loc = sc.locations.index(state.agent_expect)
    probs, vals = _outcome_table(sc, rel, state.d_count, loc)
    return float(probs @ vals.max(axis=1))


def team_reward(state: AaState, action: AaAction | None, sc: DelayScenario, next_state: AaState | None = None) -> float:
    """Scalar reward of the delay MDP, assembled from its weighted parts.

    With ``action`` of None the state is terminal and its response quality
    is returned.  Time-consuming actions need ``next_state`` for the
    lateness increment.
    """
    if action is None:
        if state.response == "user":
            return user_decision_quality(sc, state)
        if state.response in DECISIONS:
            return agent_decision_quality(sc, state, state.response)
        if state.response == "timeout":
            return sc.lam3 * sc.r_activity
        return 0.0
    r = 0.0
    if action.kind == "coord":
        r -= sc.lam1 * sc.repair_cost(state.d_count)
    if action.kind == "transfer" and action.target == "user":
        r -= sc.lam4 * sc.ask_cost[sc.locations.index(state.agent_expect)]
    if next_state is not None and action.kind in ("transfer", "wait"):
        r -= sc.lam2 * (sc.lateness_cost(next_state.team_expect) - sc.lateness_cost(state.team_expect))
    return r


def build_delay_mdp(sc: DelayScenario) -> AaMdp:
    """States: controller x relative time x delays x location, plus terminals
    for the user's response, each announcement and the waiting limit."""
    b = _Builder()
    step = sc.step
    lo, hi = sc.rel_min, sc.rel_max
    locs = sc.locations
    P = sc.P
    delay_action = AaAction("coord", f"delay{sc.delay_minutes:g}")

    def make(ctrl, r, n, loc, response=None, status=None):
        rel = r * step
        st = AaState(
            controller=ctrl,
            response=response,
            time_index=r - lo,
            d_count=n,
            team_expect=rel,
            team_orig_expect=sc.orig_meeting,
            agent_expect=locs[loc],
            activity_status=status or ("pending" if rel < 0 else "overdue"),
        )
        key = (ctrl, r, n, loc, response)
        if response is None:
            return b.state(key, st)
        return b.state(key, st, True, team_reward(st, None, sc))

    r0 = int(round(sc.start / step))
    init = make("agent", r0, 0, locs.index(sc.initial_location))
    for n in range(sc.max_delays, -1, -1):
        for r in range(hi - 1, lo - 1, -1):
            for li in range(len(locs)):
                for ctrl in ("agent", "user"):
                    s = make(ctrl, r, n, li)
                    st = b.states[s]

                    def advance(c, responded_p):
                        outs = []
                        if responded_p > 0:
                            outs.append((make(c, r, n, li, response="user", status="decided"), responded_p, 0.0))
                        for lj in range(len(locs)):
                            p = (1.0 - responded_p) * P[li, lj]
                            if p <= 0:
                                continue
                            if r + 1 >= hi:
                                x = make(c, hi, n, lj, response="timeout", status="started")
                            else:
                                x = make(c, r + 1, n, lj)
                            rew = team_reward(st, WAIT, sc, b.states[x])
                            outs.append((x, p, rew))
                        return outs

                    pr = sc.response_prob(li)
                    if ctrl == "agent":
                        ask = AaAction("transfer", "user")
                        b.act(s, ask, team_reward(st, ask, sc), advance("user", pr))
                        b.act(s, WAIT, 0.0, advance("agent", 0.0))
                    else:
                        b.act(s, WAIT, 0.0, advance("user", pr))
                    if n < sc.max_delays and math.isfinite(sc.repair_cost(n)):
                        x = make(ctrl, max(r - sc.d_steps, lo), n + 1, li)
                        b.act(s, delay_action, team_reward(st, COORD, sc), [(x, 1.0, 0.0)])
                    for dec in DECISIONS:
                        x = make(ctrl, r, n, li, response=dec, status="decided")
                        b.act(s, AaAction("decide", dec), 0.0, [(x, 1.0, 0.0)])
    extra = {
        "time": [float(s.team_expect) for s in b.states],
        "location": [s.agent_expect for s in b.states],
        "meeting_time": [sc.orig_meeting + s.d_count * sc.delay_minutes for s in b.states],
        "now": [sc.orig_meeting + s.d_count * sc.delay_minutes + s.team_expect for s in b.states],
    }
    feats = _state_features(b.states, extra)
    meta = {"kind": "delay", "cardinalities": {
        "controller": 2, "time": hi - lo, "d_count": sc.max_delays + 1, "location": len(locs)}}
    return b.build(init, feats, agent_id="agent", meta=meta)


# ----------------------------------------------------------------------------
# Auction MDP


@dataclass(frozen=True)
class AuctionScenario:
    """Closing an auction for a team role.

    Time runs in steps from the auction opening to the preparation deadline.
    Each step each missing bidder bids with ``bid_prob``; a bid is high
    quality with ``p_high``.  Closing allocates the role to the best bid.
    """

    n_steps: int = 24
    n_bidders: int = 9
    bid_prob: float = 0.12
    p_high: float = 0.4
    value_high: float = 1.0
    value_low: float = 0.45
    value_none: float = 0.0
    prep_cost: float = 0.6  # lost value per unit fraction of elapsed time
    leader_response: float = 0.25
    leader_quality_bonus: float = 0.15
    ask_cost: float = 0.08

    def __post_init__(self):
        if self.n_steps < 1 or self.n_bidders < 1:
            raise ScenarioError("need at least one step and one bidder")
        for name in ("bid_prob", "p_high", "leader_response"):
            if not 0 <= getattr(self, name) <= 1:
                raise ScenarioError(f"{name} must be a probability")

    def replace(self, **kw) -> "AuctionScenario":
        from dataclasses import replace

        return replace(self, **kw)


def auction_close_quality(sc: AuctionScenario, k: int, n_bids: int, n_high: int) -> float:
    """Value of allocating the role now to the best bid received so far."""
    if n_bids == 0:
        best = sc.value_none
    elif n_high > 0:
        best = sc.value_high
    else:
        best = sc.value_low
    return best - sc.prep_cost * k / sc.n_steps


def _leader_quality(sc: AuctionScenario, k: int, n_bids: int, n_high: int) -> float:
    return auction_close_quality(sc, k, n_bids, n_high) + (sc.leader_quality_bonus if n_bids else 0.0)


def build_auction_mdp(sc: AuctionScenario) -> AaMdp:
    """State: step, bids received, high-quality bids, controller.  Actions:
    close, wait, ask the team leader.  No coordination change is offered."""
    from scipy.stats import binom

    b = _Builder()
    N, T = sc.n_bidders, sc.n_steps

    def status(nb, nh):
        return "none" if nb == 0 else ("high" if nh else "low")

    def make(ctrl, k, nb, nh, response=None):
        st = AaState(ctrl, response, k, 0, team_expect=float(k), team_orig_expect=float(T),
                     agent_expect=f"{nb}:{nh}", activity_status=status(nb, nh))
        key = (ctrl, k, nb, nh, response)
        if response is None:
            return b.state(key, st)
        if response == "closed":
            rew = auction_close_quality(sc, k, nb, nh)
        elif response == "leader":
            rew = _leader_quality(sc, k, nb, nh)
        else:  # deadline reached: forced allocation
            rew = auction_close_quality(sc, T, nb, nh)
        return b.state(key, st, True, rew)

    # bid arrivals: new bids ~ Binomial(missing, p); high among new ~ Binomial(new, p_high)
    arrivals = {}
    for nb in range(N + 1):
        miss = N - nb
        dist = []
        for new in range(miss + 1):
            pn = binom.pmf(new, miss, sc.bid_prob)
            for hi_new in range(new + 1):
                dist.append((new, hi_new, pn * binom.pmf(hi_new, new, sc.p_high)))
        arrivals[nb] = dist

    init = make("agent", 0, 0, 0)
    for k in range(T - 1, -1, -1):
        for nb in range(N + 1):
            for nh in range(nb + 1):
                for ctrl in ("agent", "leader"):
                    s = make(ctrl, k, nb, nh)

                    def advance(c, p_resp):
                        outs = []
                        if p_resp > 0:
                            outs.append((make(c, k, nb, nh, response="leader"), p_resp, 0.0))
                        for new, hn, p in arrivals[nb]:
                            q = (1 - p_resp) * p
                            if q <= 0:
                                continue
                            nb2, nh2 = nb + new, min(nh + hn, nb + new)
                            x = make(c, T, nb2, nh2, response="deadline") if k + 1 >= T else make(c, k + 1, nb2, nh2)
                            outs.append((x, q, 0.0))
                        return outs

                    b.act(s, AaAction("decide", "close"), 0.0, [(make(ctrl, k, nb, nh, response="closed"), 1.0, 0.0)])
                    if ctrl == "agent":
                        b.act(s, WAIT, 0.0, advance("agent", 0.0))
                        b.act(s, AaAction("transfer", "leader"), -sc.ask_cost, advance("leader", sc.leader_response))
                    else:
                        b.act(s, WAIT, 0.0, advance("leader", sc.leader_response))
    extra = {
        "time": [float(s.time_index) for s in b.states],
        "bids": [float(s.agent_expect.split(":")[0]) for s in b.states],
        "high_bids": [float(s.agent_expect.split(":")[1]) for s in b.states],
    }
    return b.build(init, _state_features(b.states, extra), agent_id="agent", meta={"kind": "auction"})


def auction_scenario_from_dict(d: dict) -> AuctionScenario:
    allowed = set(AuctionScenario.__dataclass_fields__)
    extra = set(d) - allowed - {"kind"}
    if extra:
        raise ScenarioError(f"auction scenario: unknown field(s) {sorted(extra)}")
    return AuctionScenario(**{k: v for k, v in d.items() if k != "kind"})


def _action_from_label(label: str | AaAction) -> AaAction:
    if isinstance(label, AaAction):
        return label
    kind, _, target = label.partition(":")
    return AaAction(kind, target or None)


def mdp_from_table(
    n_states: int,
    terminals: dict[int, float],
    actions: dict[int, list[tuple[str | AaAction, float, list[tuple[int, float, float]]]]],
    initial: int = 0,
    features: dict[str, list] | None = None,
) -> AaMdp:
    """Small explicit MDP: ``actions[s]`` lists ``(label, reward, [(successor,
    probability, reward), ...])``; labels read like ``"wait"`` or ``"transfer:U"``.
    State ``s`` gets ``time_index = s``; ``features`` adds predicate columns."""
    b = _Builder()
    for s in range(n_states):
        term = s in terminals
        b.state(s, AaState("A", "done" if term else None, s), term, float(terminals.get(s, 0.0)))
    for s, acts in actions.items():
        if s in terminals:
            raise ScenarioError(f"terminal state {s} cannot have actions")
        for label, rew, outs in acts:
            b.act(s, _action_from_label(label), float(rew), outs)
    return b.build(initial, _state_features(b.states, features), meta={"kind": "table"})


def load_mdp(path: str | Path) -> tuple[AaMdp, Any]:
    """Build an MDP from a JSON description with a ``kind`` of delay,
    auction or abstract (an instance scenario plus ``grid``)."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    kind = doc.get("kind")
    if kind == "delay":
        sc = delay_scenario_from_dict(doc)
        return build_delay_mdp(sc), sc
    if kind == "auction":
        sc = auction_scenario_from_dict(doc)
        return build_auction_mdp(sc), sc
    if kind == "abstract":
        extra = set(doc) - {"kind", "scenario", "grid"}
        if extra or "scenario" not in doc or "grid" not in doc:
            raise ScenarioError("abstract MDP needs exactly 'scenario' and 'grid'")
        sc = doc["scenario"]
        inst = load_scenario(Path(path).parent / sc) if isinstance(sc, str) else scenario_from_dict(sc)
        return build_abstract_mdp(inst, float(doc["grid"])), inst
    raise ScenarioError(f"{path}: unknown MDP kind {kind!r}")


def delay_scenario_to_dict(sc: DelayScenario) -> dict:
    d = asdict(sc)
    d["response_mean"] = [None if math.isinf(v) else v for v in sc.response_mean]
    return {"kind": "delay", **d}
