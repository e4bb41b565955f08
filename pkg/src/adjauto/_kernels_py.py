"""Pure-Python reference implementations of the hot loops.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and the same floating-point operation order, so the two backends
agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np


def clock_dp(omega, agent_q, rates, quals, shift, costs, step, n, max_changes):
    """Backward recursion over (clock index, changes used).

    Actions: ``-1`` agent decides, ``-2`` coordination change, ``i >= 0``
    entity ``i`` holds control for one step.  Values exclude ``W(0)``.
    """
    ne = len(rates)
    V = np.zeros((n + 1, max_changes + 1))
    act = np.full((n + 1, max_changes + 1), -1, dtype=np.int64)
    final = agent_q
    for i in range(ne):
        if quals[i] > final:
            final = quals[i]
    for d in range(max_changes + 1):
        V[n, d] = final
        act[n, d] = -3
    # per-entity step factors are clock independent except for exp(omega*c)
    surv = np.empty(ne)
    resp_cost = np.empty(ne)
    resp_q = np.empty(ne)
    for i in range(ne):
        r = rates[i]
        surv[i] = math.exp(-r * step)
        diff = omega - r
        if abs(diff) > 1e-12:
            g = r * omega * (math.exp(diff * step) - 1.0) / diff
        else:
            g = r * omega * step
        resp_cost[i] = g
        resp_q[i] = quals[i] * (1.0 - surv[i])
    for d in range(max_changes, -1, -1):
        for c in range(n - 1, -1, -1):
            ec = math.exp(omega * c * step)
            w_now = omega * ec
            w_next = omega * math.exp(omega * (c + 1) * step)
            best = agent_q
            ba = -1
            for i in range(ne):
                # response within the step: quality minus cost accrued so far
                q = resp_q[i] - (ec * resp_cost[i] - w_now * (1.0 - surv[i]))
                q = q + surv[i] * (V[c + 1, d] - (w_next - w_now))
                if q > best:
                    best = q
                    ba = i
            if d < max_changes and shift > 0:
                c2 = c - shift
                if c2 < 0:
                    c2 = 0
                q = V[c2, d + 1] - costs[d]
                if q > best:
                    best = q
                    ba = -2
            V[c, d] = best
            act[c, d] = ba
    return V, act


class Graph:
    """The arrays value iteration reads, bundled once per MDP."""

    __slots__ = ("order", "inner", "is_terminal", "terminal_reward", "sa_ptr", "sa_reward", "tr_ptr", "tr_succ", "tr_prob", "tr_reward")

    def __init__(self, order, is_terminal, terminal_reward, sa_ptr, sa_reward, tr_ptr, tr_succ, tr_prob, tr_reward):
        self.order = order
        # terminals are filled in one vectorized sweep, so the pass visits only these
        self.inner = order[is_terminal[order] == 0]
        self.is_terminal = is_terminal
        self.terminal_reward = terminal_reward
        self.sa_ptr = sa_ptr
        self.sa_reward = sa_reward
        self.tr_ptr = tr_ptr
        self.tr_succ = tr_succ
        self.tr_prob = tr_prob
        self.tr_reward = tr_reward


def backward_induction(g, sa_allowed=None):
    """One backward pass; the first maximal action wins ties."""
    is_terminal, terminal_reward, sa_ptr, sa_reward = g.is_terminal, g.terminal_reward, g.sa_ptr, g.sa_reward
    tr_ptr, tr_succ, tr_prob, tr_reward = g.tr_ptr, g.tr_succ, g.tr_prob, g.tr_reward
    ns = len(is_terminal)
    V = terminal_reward.copy()
    best_sa = np.full(ns, -1, dtype=np.int64)
    Q = np.full(len(sa_reward), np.nan)
    for s in g.inner:
        best = -np.inf
        arg = -1
        for a in range(sa_ptr[s], sa_ptr[s + 1]):
            if sa_allowed is not None and not sa_allowed[a]:
                continue
            acc = 0.0
            for j in range(tr_ptr[a], tr_ptr[a + 1]):
                acc += tr_prob[j] * (tr_reward[j] + V[tr_succ[j]])
            q = sa_reward[a] + acc
            Q[a] = q
            if arg < 0 or q > best:
                best = q
                arg = a
        V[s] = best
        best_sa[s] = arg
    return V, best_sa, Q


def _better(f1, n1, f2, n2):
    """Strictly better (F, N) under: not forbidden, then more bits, then larger mask."""
    if f1 != f2:
        return f2 > f1
    c1, c2 = int(n1).bit_count(), int(n2).bit_count()
    if c1 != c2:
        return c1 > c2
    return int(n1) > int(n2)


def propagate_forward(order, is_terminal, state_f, state_n, sa_ptr, sa_f, sa_n, tr_ptr, tr_succ, tr_prob):
    """Forbidden flags and guaranteed requiring-constraint sets, one pass."""
    ns = len(is_terminal)
    F = np.zeros(ns, dtype=np.uint8)
    N = np.zeros(ns, dtype=np.uint64)
    out_f = np.zeros(len(sa_f), dtype=np.uint8)
    out_n = np.zeros(len(sa_f), dtype=np.uint64)
    adm = np.zeros(len(sa_f), dtype=np.uint8)
    full = (1 << 64) - 1
    for s in order:
        if is_terminal[s]:
            F[s] = state_f[s]
            N[s] = state_n[s]
            continue
        lo, hi = sa_ptr[s], sa_ptr[s + 1]
        if hi == lo:
            F[s] = 1
            N[s] = state_n[s]
            continue
        bf, bn = 2, 0
        for a in range(lo, hi):
            f = 1 if (state_f[s] or sa_f[a]) else 0
            m = full
            for j in range(tr_ptr[a], tr_ptr[a + 1]):
                if tr_prob[j] > 0.0:
                    x = tr_succ[j]
                    if F[x]:
                        f = 1
                    m &= int(N[x])
            n = int(state_n[s]) | int(sa_n[a]) | m
            out_f[a] = f
            out_n[a] = n
            if bf == 2 or _better(f, n, bf, bn):
                bf, bn = f, n
        F[s] = bf
        N[s] = bn
        if not bf:
            for a in range(lo, hi):
                if out_f[a] == bf and out_n[a] == bn:
                    adm[a] = 1
    return F, N, out_f, out_n, adm


def propagate_reverse(is_terminal, sa_ptr, sa_owner, pred_ptr, pred_sa, forb_states, forb_sa):
    """Forbidden flags by backward reachability from forbidden states.

    Only valid without requiring constraints.  Work is proportional to the
    forbidden region: states and actions outside it are never visited.
    ``forb_states`` must include nonterminal states without actions.
    """
    ns = len(is_terminal)
    F = np.zeros(ns, dtype=np.uint8)
    out_f = np.zeros(len(sa_owner), dtype=np.uint8)
    alive = np.full(ns, -1, dtype=np.int64)
    stack = []
    for s in forb_states:
        if F[s]:
            continue
        F[s] = 1
        stack.append(s)
        for a in range(sa_ptr[s], sa_ptr[s + 1]):
            out_f[a] = 1
    for a in forb_sa:
        _kill(a, F, out_f, alive, sa_ptr, sa_owner, stack)
    while stack:
        x = stack.pop()
        for j in range(pred_ptr[x], pred_ptr[x + 1]):
            _kill(pred_sa[j], F, out_f, alive, sa_ptr, sa_owner, stack)
    return F, out_f


def _kill(a, F, out_f, alive, sa_ptr, sa_owner, stack):
    if out_f[a]:
        return
    out_f[a] = 1
    s = sa_owner[a]
    if alive[s] < 0:
        alive[s] = sa_ptr[s + 1] - sa_ptr[s]
    alive[s] -= 1
    if alive[s] == 0 and not F[s]:
        F[s] = 1
        stack.append(s)


class Flags:
    """Directly forbidden states and state-action pairs for one constraint set."""

    __slots__ = ("state_f", "sa_f")

    def __init__(self, state_f, sa_f):
        self.state_f = state_f
        self.sa_f = sa_f


def solve_forbidding(g, flags):
    """Forbidden flags and backward induction over the admissible actions in
    one topological pass.  An action is dropped as soon as it is flagged or
    reaches a forbidden successor, so its remaining outcomes are never read.

    Returns values, a total policy (forbidden states take their first
    action), Q, forbidden flags and the admissible mask.
    """
    is_terminal, terminal_reward, sa_ptr, sa_reward = g.is_terminal, g.terminal_reward, g.sa_ptr, g.sa_reward
    tr_ptr, tr_succ, tr_prob, tr_reward = g.tr_ptr, g.tr_succ, g.tr_prob, g.tr_reward
    state_f, sa_f = flags.state_f, flags.sa_f
    ns = len(is_terminal)
    # forbidden states carry NaN while the pass runs, so the check rides on the value load
    V = np.where(state_f != 0, np.nan, terminal_reward)
    policy = np.full(ns, -1, dtype=np.int64)
    Q = np.full(len(sa_reward), np.nan)
    adm = np.zeros(len(sa_reward), dtype=np.uint8)
    for s in g.inner:
        lo, hi = sa_ptr[s], sa_ptr[s + 1]
        best = -np.inf
        arg = -1
        if not state_f[s]:
            for a in range(lo, hi):
                if sa_f[a]:
                    continue
                acc = 0.0
                bad = False
                for j in range(tr_ptr[a], tr_ptr[a + 1]):
                    v = V[tr_succ[j]]
                    if v != v and tr_prob[j] > 0.0:
                        bad = True
                        break
                    acc += tr_prob[j] * (tr_reward[j] + v)
                if bad:
                    continue
                adm[a] = 1
                q = sa_reward[a] + acc
                Q[a] = q
                if arg < 0 or q > best:
                    best = q
                    arg = a
        if arg < 0:
            V[s] = math.nan
            policy[s] = lo if hi > lo else -1
            adm[lo:hi] = 0
            Q[lo:hi] = np.nan
        else:
            V[s] = best
            policy[s] = arg
    forb = np.isnan(V)
    V[forb] = np.where(is_terminal != 0, terminal_reward, -np.inf)[forb]
    return V, policy, Q, forb.astype(np.uint8), adm


def simulate(s0, policy_sa, is_terminal, terminal_reward, sa_reward, tr_ptr, tr_succ, tr_prob, tr_reward, uniforms):
    """Monte-Carlo walks driven by pre-drawn uniforms, one row per trial."""
    trials, depth = uniforms.shape
    util = np.zeros(trials)
    steps = np.zeros(trials, dtype=np.int64)
    for i in range(trials):
        s = s0
        u = 0.0
        k = 0
        while not is_terminal[s]:
            a = policy_sa[s]
            if a < 0 or k >= depth:
                u = np.nan
                break
            u += sa_reward[a]
            x = uniforms[i, k]
            lo, hi = tr_ptr[a], tr_ptr[a + 1]
            j = lo
            cum = tr_prob[j]
            while x >= cum and j < hi - 1:
                j += 1
                cum += tr_prob[j]
            u += tr_reward[j]
            s = tr_succ[j]
            k += 1
        if not math.isnan(u):
            u += terminal_reward[s]
        util[i] = u
        steps[i] = k
    return util, steps
