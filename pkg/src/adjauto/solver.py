"""Value iteration with forbidding and requiring constraints.

Each state carries a triple ``(F, N, U)``: whether a forbidding constraint
can be avoided (``F`` false when it can), the set of requiring constraints
guaranteed to be met, and the expected utility.  Triples are compared by
``F`` first, then by ``N`` and only then by ``U``.  The ``N`` comparison
ranks a strict superset higher; sets that are not nested are ranked by size
and then by their bit encoding so that the order is total and transitive.
"""

from __future__ import annotations

import csv
import io
import json
import operator
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .mdp import AaMdp
from .model import ScenarioError

__all__ = [
    "Constraint",
    "ConstrainedValue",
    "SolveResult",
    "Admissibility",
    "compare_values",
    "value_iteration",
    "propagate_constraints",
    "constrained_value_iteration",
    "constrained_single_pass",
    "verify_policy",
    "load_constraints",
    "constraints_to_json",
    "verification_csv",
]

KINDS = ("forbidden_state", "forbidden_action", "required_state", "required_action")
_OPS = {
    "=": operator.eq,
    "==": operator.eq,
    "!=": operator.ne,
    "≠": operator.ne,
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    "≤": operator.le,
    ">=": operator.ge,
    "≥": operator.ge,
}
ACTION_FEATURES = ("action", "kind", "target")


@dataclass(frozen=True)
class Constraint:
    id: str
    kind: str
    state_predicate: tuple[tuple[str, str, object], ...] = ()
    action_predicate: tuple[tuple[str, str, object], ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"constraint {self.id!r}: unknown kind {self.kind!r}")
        for feat, op, _ in (*self.state_predicate, *self.action_predicate):
            if op not in _OPS:
                raise ScenarioError(f"constraint {self.id!r}: unknown operator {op!r} on {feat!r}")
        if self.kind.endswith("state") and self.action_predicate:
            raise ScenarioError(f"constraint {self.id!r}: state constraints take no action predicate")

    @property
    def forbidding(self) -> bool:
        return self.kind.startswith("forbidden")

    @property
    def on_action(self) -> bool:
        return self.kind.endswith("action")


def _match(table: dict[str, np.ndarray], pred, n: int, cid: str) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    for feat, op, value in pred:
        if feat not in table:
            raise ScenarioError(f"constraint {cid!r}: undeclared feature {feat!r}")
        col = table[feat]
        if col.dtype == object:
            if op not in ("=", "==", "!=", "≠"):
                raise ScenarioError(f"constraint {cid!r}: operator {op!r} needs a numeric feature")
            hit = np.asarray(col == value, dtype=bool)
            mask &= hit if op in ("=", "==") else ~hit
        else:
            mask &= _OPS[op](col, float(value))
    return mask


def state_mask(mdp: AaMdp, c: Constraint) -> np.ndarray:
    return _match(mdp.features, c.state_predicate, mdp.n_states, c.id)


def action_mask(mdp: AaMdp, c: Constraint) -> np.ndarray:
    """State-action pairs matched by an action constraint."""
    owner_ok = state_mask(mdp, c)[mdp.sa_owner]
    return owner_ok & _match(mdp.sa_features, c.action_predicate, mdp.n_sa, c.id)


@dataclass(frozen=True)
class ConstrainedValue:
    F: bool
    N: frozenset
    U: float


def _rank(N, order: dict) -> tuple[int, int]:
    mask = 0
    for c in N:
        mask |= 1 << order[c]
    return len(N), mask


def compare_values(a: ConstrainedValue, b: ConstrainedValue, ids: Sequence[str] | None = None) -> int:
    """+1 if ``a`` is preferred, -1 if ``b`` is, 0 if equal.

    ``ids`` fixes the bit order of requiring constraints; by default the
    sorted union of the ids in both sets.
    """
    if a.F != b.F:
        return 1 if not a.F else -1
    if a.N != b.N:
        order = {c: i for i, c in enumerate(sorted(set(a.N) | set(b.N)) if ids is None else ids)}
        ra, rb = _rank(a.N, order), _rank(b.N, order)
        if ra != rb:
            return 1 if ra > rb else -1
    if a.U != b.U:
        return 1 if a.U > b.U else -1
    return 0


@dataclass
class SolveResult:
    policy: np.ndarray  # state -> state-action index, -1 where none
    U: np.ndarray
    F: np.ndarray | None = None
    N: np.ndarray | None = None  # requiring-constraint bit masks; None when there are none
    Q: np.ndarray | None = None
    required_ids: tuple[str, ...] = ()
    admissible: np.ndarray | None = None
    constraints: tuple = ()
    initial: int = 0
    sweeps: int = 1
    wall_time: float = 0.0
    value_offset: float = 0.0

    def value(self, s: int) -> ConstrainedValue | float:
        if self.F is None:
            return float(self.U[s])
        bits = 0 if self.N is None else int(self.N[s])
        N = frozenset(c for i, c in enumerate(self.required_ids) if bits >> i & 1)
        return ConstrainedValue(bool(self.F[s]), N, float(self.U[s]))

    def action(self, mdp: AaMdp, s: int):
        a = int(self.policy[s])
        return None if a < 0 else mdp.action_of(a)

    @property
    def diagnostics(self) -> dict:
        """Per-constraint status at the initial state."""
        if self.F is None:
            return {"initial": self.value(self.initial)}
        return _diagnostics(self)


def _cyclic_sweeps(mdp: AaMdp, allowed: np.ndarray, tol=1e-9, cap=10000):
    V = np.where(mdp.is_terminal.astype(bool), mdp.terminal_reward, 0.0)
    best = np.full(mdp.n_states, -1, dtype=np.int64)
    Q = np.full(mdp.n_sa, np.nan)
    for sweep in range(1, cap + 1):
        delta = 0.0
        for s in range(mdp.n_states):
            if mdp.is_terminal[s]:
                continue
            bv, ba = -np.inf, -1
            for a in mdp.state_actions(s):
                if not allowed[a]:
                    continue
                acc = 0.0
                for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]):
                    acc += mdp.tr_prob[j] * (mdp.tr_reward[j] + V[mdp.tr_succ[j]])
                q = mdp.sa_reward[a] + acc
                Q[a] = q
                if ba < 0 or q > bv:
                    bv, ba = q, a
            if np.isfinite(bv) and np.isfinite(V[s]):
                delta = max(delta, abs(bv - V[s]))
            elif bv != V[s]:
                delta = np.inf
            V[s], best[s] = bv, ba
        if delta <= tol:
            return V, best, Q, sweep
    raise ArithmeticError(f"value iteration did not converge within {cap} sweeps")


def value_iteration(mdp: AaMdp, allowed: np.ndarray | None = None) -> SolveResult:
    """Optimal values and policy.  Acyclic MDPs take one backward pass;
    cyclic ones fall back to repeated sweeps."""
    t0 = time.perf_counter()
    if allowed is not None:
        allowed = np.ascontiguousarray(allowed, dtype=np.uint8)
    if mdp.acyclic:
        V, best, Q = kernels.backward_induction(mdp.graph, allowed)
        sweeps = 1
    else:
        V, best, Q, sweeps = _cyclic_sweeps(mdp, np.ones(mdp.n_sa, dtype=np.uint8) if allowed is None else allowed)
    return SolveResult(best, V, Q=Q, initial=mdp.initial, sweeps=sweeps, wall_time=time.perf_counter() - t0,
                       value_offset=mdp.value_offset)


@dataclass
class Admissibility:
    F: np.ndarray
    N: np.ndarray
    sa_F: np.ndarray
    sa_N: np.ndarray
    admissible: np.ndarray
    required_ids: tuple[str, ...]

    sa_ptr: np.ndarray | None = None

    @property
    def acceptable(self) -> np.ndarray:
        """States with at least one admissible action."""
        owner = np.repeat(np.arange(len(self.sa_ptr) - 1), np.diff(self.sa_ptr))
        return np.bincount(owner, weights=self.admissible, minlength=len(self.sa_ptr) - 1) > 0


def _direct(mdp: AaMdp, cs: Sequence[Constraint]):
    """Direct flags and masks per state and state-action, cached per
    constraint set on the MDP."""
    last = mdp.__dict__.get("_last_masks")
    if last is not None and last[0] is cs:
        return last[1]
    cache = mdp.__dict__.setdefault("_constraint_masks", {})
    key = tuple(cs)
    if key not in cache:
        cache[key] = _compile(mdp, cs)
    mdp.__dict__["_last_masks"] = (cs, cache[key])
    return cache[key]


def _compile(mdp: AaMdp, cs: Sequence[Constraint]):
    req = sorted(c.id for c in cs if not c.forbidding)
    if len(req) > 64:
        raise ScenarioError("at most 64 requiring constraints are supported")
    if len({c.id for c in cs}) != len(cs):
        raise ScenarioError("constraint ids must be unique")
    bit = {cid: i for i, cid in enumerate(req)}
    state_f = np.zeros(mdp.n_states, dtype=np.uint8)
    state_n = np.zeros(mdp.n_states, dtype=np.uint64)
    sa_f = np.zeros(mdp.n_sa, dtype=np.uint8)
    sa_n = np.zeros(mdp.n_sa, dtype=np.uint64)
    for c in cs:
        if c.on_action:
            m = action_mask(mdp, c)
            if c.forbidding:
                sa_f[m] = 1
            else:
                sa_n[m] |= np.uint64(1 << bit[c.id])
        else:
            m = state_mask(mdp, c)
            if c.forbidding:
                state_f[m] = 1
            else:
                state_n[m] |= np.uint64(1 << bit[c.id])
    stuck = (np.diff(mdp.sa_ptr) == 0) & ~mdp.is_terminal.astype(bool)
    forb_states = np.flatnonzero(state_f.astype(bool) | stuck).astype(np.int64)
    forb_sa = np.flatnonzero(sa_f).astype(np.int64)
    return _Masks(state_f, state_n, sa_f, sa_n, tuple(req), forb_states, forb_sa, kernels.Flags(state_f, sa_f))


@dataclass(frozen=True)
class _Masks:
    state_f: np.ndarray
    state_n: np.ndarray
    sa_f: np.ndarray
    sa_n: np.ndarray
    required_ids: tuple[str, ...]
    forb_states: np.ndarray  # directly forbidden or stuck
    forb_sa: np.ndarray
    flags: object  # kernel bundle of state_f and sa_f


def propagate_constraints(mdp: AaMdp, cs: Sequence[Constraint], method: str = "auto") -> Admissibility:
    """Forbidden flags, guaranteed requiring sets and the admissible actions.

    Without requiring constraints only forbidden flags matter and they are
    found by walking backwards from forbidden states; otherwise a single
    backward pass over the topological order computes both.
    """
    if not mdp.acyclic:
        raise ValueError("constraint propagation needs an acyclic MDP; use constrained_single_pass")
    m = _direct(mdp, cs)
    req = m.required_ids
    if method == "auto":
        method = "forward" if req else "reverse"
    if method == "reverse":
        if req:
            raise ValueError("reverse propagation handles forbidding constraints only")
        pptr, psa = mdp.predecessors
        F, out_f = kernels.propagate_reverse(mdp.is_terminal, mdp.sa_ptr, mdp.sa_owner, pptr, psa, m.forb_states, m.forb_sa)
        return _forbidding_only(mdp, F, out_f)
    F, N, out_f, out_n, adm = kernels.propagate_forward(
        mdp.order, mdp.is_terminal, m.state_f, m.state_n, mdp.sa_ptr, m.sa_f, m.sa_n, mdp.tr_ptr, mdp.tr_succ, mdp.tr_prob
    )
    return Admissibility(F, N, out_f, out_n, adm, req, mdp.sa_ptr)


def _forbidding_only(mdp: AaMdp, F, out_f) -> Admissibility:
    # a forbidden state has all its actions flagged, so admissible is the complement
    adm = (1 - out_f).astype(np.uint8)
    zeros_s = np.zeros(mdp.n_states, dtype=np.uint64)
    return Admissibility(F, zeros_s, out_f, np.zeros(mdp.n_sa, dtype=np.uint64), adm, (), mdp.sa_ptr)


def _fallback_policy(mdp: AaMdp, adm: Admissibility, best: np.ndarray) -> np.ndarray:
    """Where no action is admissible, take the first action with the best
    (F, N) so that the policy stays total."""
    if not adm.required_ids:
        # every action of a forbidden state has the same (F, N)
        return np.where(best < 0, mdp.first_action, best)
    pol = best.copy()
    for s in np.flatnonzero((pol < 0) & (mdp.first_action >= 0)):
        lo, hi = mdp.sa_ptr[s], mdp.sa_ptr[s + 1]
        if hi == lo:
            continue
        pick = lo
        for a in range(lo + 1, hi):
            if _key(adm.sa_F[a], adm.sa_N[a]) > _key(adm.sa_F[pick], adm.sa_N[pick]):
                pick = a
        pol[s] = pick
    return pol


def _key(f, n):
    n = int(n)
    return (not f, n.bit_count(), n)


def constrained_value_iteration(mdp: AaMdp, cs: Sequence[Constraint], method: str = "two-phase") -> SolveResult:
    """Best policy under the constraint preference order.

    ``two-phase`` propagates constraints first and then runs plain value
    iteration over the admissible actions; ``single`` evaluates the full
    triples in one pass and serves as the reference.
    """
    if method == "single" or not mdp.acyclic:
        return constrained_single_pass(mdp, cs)
    t0 = time.perf_counter()
    m = _direct(mdp, cs)
    if not m.required_ids:
        # forbidding only: propagation and restricted backward induction share one pass
        V, policy, Q, F, adm = kernels.solve_forbidding(mdp.graph, m.flags)
        return SolveResult(policy, V, F, None, Q, (), adm, cs, mdp.initial, 1, time.perf_counter() - t0,
                           mdp.value_offset)
    adm = propagate_constraints(mdp, cs)
    V, best, Q = kernels.backward_induction(mdp.graph, adm.admissible)
    policy = _fallback_policy(mdp, adm, best)
    return SolveResult(policy, V, adm.F, adm.N, Q, adm.required_ids, adm.admissible, cs, mdp.initial, 1,
                       time.perf_counter() - t0, mdp.value_offset)


def constrained_single_pass(mdp: AaMdp, cs: Sequence[Constraint], cap: int = 10000) -> SolveResult:
    """Reference implementation: full triples, compared state by state.

    One pass in topological order for acyclic MDPs, repeated sweeps from the
    directly-known values otherwise.
    """
    t0 = time.perf_counter()
    m = _direct(mdp, cs)
    state_f, state_n, sa_f, sa_n, req = m.state_f, m.state_n, m.sa_f, m.sa_n, m.required_ids
    ns = mdp.n_states
    term = mdp.is_terminal.astype(bool)
    F = state_f.astype(bool).copy()
    N = [int(x) for x in state_n]
    U = np.where(term, mdp.terminal_reward, -np.inf)
    Q = np.full(mdp.n_sa, np.nan)
    policy = np.full(ns, -1, dtype=np.int64)
    full = (1 << 64) - 1
    order = [int(s) for s in mdp.order] if mdp.acyclic else list(range(ns))
    sweeps = 0
    while True:
        sweeps += 1
        changed = False
        for s in order:
            if term[s]:
                continue
            lo, hi = mdp.sa_ptr[s], mdp.sa_ptr[s + 1]
            if hi == lo:
                if not F[s]:
                    F[s] = True
                    changed = True
                continue
            best = None
            for a in range(lo, hi):
                f = bool(state_f[s] or sa_f[a])
                m = full
                acc = 0.0
                for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]):
                    x = mdp.tr_succ[j]
                    p = mdp.tr_prob[j]
                    if p > 0.0:
                        f = f or bool(F[x])
                        m &= N[x]
                    acc += p * (mdp.tr_reward[j] + U[x])
                q = mdp.sa_reward[a] + acc
                n = int(state_n[s]) | int(sa_n[a]) | m
                Q[a] = q
                cand = (_key(f, n), q)
                if best is None or cand > best[0]:
                    best = (cand, a, f, n, q)
            _, a, f, n, q = best
            if (F[s], N[s], U[s], policy[s]) != (f, n, q, a):
                changed = True
            F[s], N[s], U[s], policy[s] = f, n, q, a
        if mdp.acyclic or not changed:
            break
        if sweeps >= cap:
            raise ArithmeticError(f"constrained sweeps did not settle within {cap}")
    return SolveResult(
        policy, U, F.astype(np.uint8), np.array(N, dtype=np.uint64), Q, req, None, tuple(cs), mdp.initial,
        sweeps, time.perf_counter() - t0, mdp.value_offset,
    )


def _diagnostics(res: SolveResult) -> dict:
    cs = res.constraints
    v = res.value(res.initial)
    out = {"initial": v, "constraints": {}}
    for c in cs:
        if c.forbidding:
            out["constraints"][c.id] = "avoidable" if not v.F else "unavoidable"
        else:
            out["constraints"][c.id] = "guaranteed" if c.id in v.N else "not guaranteed"
    conflicts = [c.id for c in cs if not c.forbidding and c.id not in v.N]
    if v.F:
        out["conflict"] = "forbidding constraints cannot all be avoided from the initial state"
    elif conflicts:
        out["conflict"] = f"requiring constraints {conflicts} cannot be guaranteed while avoiding forbidden states"
    return out


# ----------------------------------------------------------------------------
# Verification by exact reachability


def _reach(mdp: AaMdp, policy: np.ndarray, start: int, stop: np.ndarray | None = None):
    """States reachable from ``start`` under ``policy`` without entering a
    ``stop`` state (stop states are reached but not expanded)."""
    parent = {start: None}
    q = deque([start])
    while q:
        s = q.popleft()
        if mdp.is_terminal[s] or (stop is not None and stop[s]):
            continue
        a = policy[s]
        if a < 0:
            continue
        for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]):
            if mdp.tr_prob[j] > 0:
                x = int(mdp.tr_succ[j])
                if x not in parent:
                    parent[x] = s
                    q.append(x)
    return parent


def _path(parent, s):
    out = []
    while s is not None:
        out.append(s)
        s = parent[s]
    return out[::-1]


def verify_policy(mdp: AaMdp, policy: np.ndarray, cs: Sequence[Constraint]) -> list[tuple[str, str, list[int]]]:
    """``(id, "satisfied" | "violated", witness)`` for each constraint.

    A forbidding constraint is violated when a positive-probability path
    reaches a matching state (or takes a matching action).  A requiring
    constraint is satisfied when every such path meets it; the witness of a
    violation is a path that ends, loops or gets stuck without meeting it.
    """
    policy = np.asarray(policy, dtype=np.int64)
    s0 = mdp.initial
    out = []
    for c in cs:
        if c.on_action:
            am = action_mask(mdp, c)
            hit = np.zeros(mdp.n_states, dtype=bool)
            has = policy >= 0
            hit[has] = am[policy[has]]
            hit &= ~mdp.is_terminal.astype(bool)
        else:
            hit = state_mask(mdp, c)
        if c.forbidding:
            parent = _reach(mdp, policy, s0)
            bad = [s for s in parent if hit[s]]
            if bad:
                out.append((c.id, "violated", _path(parent, min(bad))))
            else:
                out.append((c.id, "satisfied", []))
        else:
            parent = _reach(mdp, policy, s0, stop=hit)
            witness = None
            for s in parent:
                if hit[s]:
                    continue
                if mdp.is_terminal[s] or policy[s] < 0:
                    witness = s
                    break
            if witness is None and not mdp.acyclic:
                witness = _cycle_in(mdp, policy, parent, hit)
            if witness is None:
                out.append((c.id, "satisfied", []))
            else:
                out.append((c.id, "violated", _path(parent, witness)))
    return out


def _cycle_in(mdp, policy, parent, hit):
    """A state on a cycle that avoids ``hit``, if any (cyclic MDPs only)."""
    nodes = [s for s in parent if not hit[s] and not mdp.is_terminal[s]]
    color = {s: 0 for s in nodes}
    for root in nodes:
        if color[root]:
            continue
        stack = [(root, 0)]
        while stack:
            s, i = stack.pop()
            if i == 0:
                color[s] = 1
            a = policy[s]
            succ = [int(mdp.tr_succ[j]) for j in range(mdp.tr_ptr[a], mdp.tr_ptr[a + 1]) if mdp.tr_prob[j] > 0]
            if i < len(succ):
                stack.append((s, i + 1))
                x = succ[i]
                if x in color:
                    if color[x] == 1:
                        return x
                    if color[x] == 0:
                        stack.append((x, 0))
            else:
                color[s] = 2
    return None


# ----------------------------------------------------------------------------
# Files


def _pred_from(items, where) -> tuple:
    out = []
    for it in items or []:
        if not isinstance(it, dict) or set(it) != {"feature", "op", "value"}:
            raise ScenarioError(f"{where}: predicate items need exactly feature, op, value")
        out.append((str(it["feature"]), str(it["op"]), it["value"]))
    return tuple(out)


def load_constraints(path_or_doc) -> list[Constraint]:
    if isinstance(path_or_doc, (str, Path)):
        with open(path_or_doc, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path_or_doc}: invalid JSON ({exc})") from None
    else:
        doc = path_or_doc
    if not isinstance(doc, list):
        raise ScenarioError("constraint file must hold a list")
    out = []
    for i, d in enumerate(doc):
        where = f"constraints[{i}]"
        if not isinstance(d, dict):
            raise ScenarioError(f"{where}: expected an object")
        extra = set(d) - {"id", "kind", "state_predicate", "action_predicate"}
        if extra or "id" not in d or "kind" not in d:
            raise ScenarioError(f"{where}: needs id and kind; unknown fields {sorted(extra)}")
        out.append(
            Constraint(
                str(d["id"]),
                str(d["kind"]),
                _pred_from(d.get("state_predicate"), where),
                _pred_from(d.get("action_predicate"), where),
            )
        )
    return out


def constraints_to_json(cs: Sequence[Constraint]) -> list[dict]:
    out = []
    for c in cs:
        d = {"id": c.id, "kind": c.kind, "state_predicate": [{"feature": f, "op": o, "value": v} for f, o, v in c.state_predicate]}
        if c.action_predicate:
            d["action_predicate"] = [{"feature": f, "op": o, "value": v} for f, o, v in c.action_predicate]
        out.append(d)
    return out


def verification_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "status", "witness"])
    for cid, status, path in report:
        w.writerow([cid, status, ";".join(str(s) for s in path)])
    return buf.getvalue()
