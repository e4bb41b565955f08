# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the loops in ``_kernels_py``; same signatures, same results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY, NAN, isnan
from libc.stdint cimport uint64_t, uint8_t, int64_t

cnp.import_array()


cdef inline int _popcount(uint64_t x) nogil:
    cdef int c = 0
    while x:
        x &= x - 1
        c += 1
    return c


def clock_dp(double omega, double agent_q, double[::1] rates, double[::1] quals,
             Py_ssize_t shift, double[::1] costs, double step, Py_ssize_t n, Py_ssize_t max_changes):
    cdef Py_ssize_t ne = rates.shape[0]
    V_arr = np.zeros((n + 1, max_changes + 1))
    act_arr = np.full((n + 1, max_changes + 1), -1, dtype=np.int64)
    cdef double[:, ::1] V = V_arr
    cdef int64_t[:, ::1] act = act_arr
    surv_a = np.empty(ne)
    cost_a = np.empty(ne)
    q_a = np.empty(ne)
    cdef double[::1] surv = surv_a
    cdef double[::1] resp_cost = cost_a
    cdef double[::1] resp_q = q_a
    cdef double final = agent_q, r, diff, g, ec, w_now, w_next, best, q
    cdef Py_ssize_t i, d, c, c2
    cdef int64_t ba
    for i in range(ne):
        if quals[i] > final:
            final = quals[i]
    for d in range(max_changes + 1):
        V[n, d] = final
        act[n, d] = -3
    for i in range(ne):
        r = rates[i]
        surv[i] = exp(-r * step)
        diff = omega - r
        if fabs(diff) > 1e-12:
            g = r * omega * (exp(diff * step) - 1.0) / diff
        else:
            g = r * omega * step
        resp_cost[i] = g
        resp_q[i] = quals[i] * (1.0 - surv[i])
    for d in range(max_changes, -1, -1):
        for c in range(n - 1, -1, -1):
            ec = exp(omega * c * step)
            w_now = omega * ec
            w_next = omega * exp(omega * (c + 1) * step)
            best = agent_q
            ba = -1
            for i in range(ne):
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
    return V_arr, act_arr


cdef class Graph:
    """The arrays value iteration reads, bundled once per MDP so that
    repeated solves skip buffer acquisition."""

    cdef const int64_t[::1] order
    cdef const int64_t[::1] inner
    cdef const uint8_t[::1] is_terminal
    cdef const double[::1] terminal_reward
    cdef const int64_t[::1] sa_ptr
    cdef const double[::1] sa_reward
    cdef const int64_t[::1] tr_ptr
    cdef const int64_t[::1] tr_succ
    cdef const double[::1] tr_prob
    cdef const double[::1] tr_reward

    def __init__(self, order, is_terminal, terminal_reward, sa_ptr, sa_reward, tr_ptr, tr_succ, tr_prob, tr_reward):
        self.order = order
        # terminals are filled in one sequential sweep, so the pass visits only these
        self.inner = np.ascontiguousarray(np.asarray(order)[np.asarray(is_terminal)[np.asarray(order)] == 0])
        self.is_terminal = is_terminal
        self.terminal_reward = terminal_reward
        self.sa_ptr = sa_ptr
        self.sa_reward = sa_reward
        self.tr_ptr = tr_ptr
        self.tr_succ = tr_succ
        self.tr_prob = tr_prob
        self.tr_reward = tr_reward


def backward_induction(Graph g, sa_allowed=None):
    cdef const int64_t[::1] inner = g.inner
    cdef const double[::1] terminal_reward = g.terminal_reward
    cdef const int64_t[::1] sa_ptr = g.sa_ptr
    cdef const double[::1] sa_reward = g.sa_reward
    cdef const int64_t[::1] tr_ptr = g.tr_ptr
    cdef const int64_t[::1] tr_succ = g.tr_succ
    cdef const double[::1] tr_prob = g.tr_prob
    cdef const double[::1] tr_reward = g.tr_reward
    cdef Py_ssize_t ns = terminal_reward.shape[0]
    cdef const uint8_t[::1] allowed
    cdef bint restrict = sa_allowed is not None
    if restrict:
        allowed = sa_allowed
    # every entry is written below, so skip the fill
    V_arr = np.empty(ns)
    best_arr = np.empty(ns, dtype=np.int64)
    Q_arr = np.empty(sa_reward.shape[0])
    cdef double[::1] V = V_arr
    cdef int64_t[::1] best_sa = best_arr
    cdef double[::1] Q = Q_arr
    cdef Py_ssize_t k, s, a, j
    cdef int64_t arg
    cdef double best, acc, q
    with nogil:
        for s in range(ns):
            V[s] = terminal_reward[s]
            best_sa[s] = -1
        for k in range(inner.shape[0]):
            s = inner[k]
            best = -INFINITY
            arg = -1
            for a in range(sa_ptr[s], sa_ptr[s + 1]):
                if restrict and not allowed[a]:
                    Q[a] = NAN
                    continue
                acc = 0.0
                for j in range(tr_ptr[a], tr_ptr[a + 1]):
                    acc = acc + tr_prob[j] * (tr_reward[j] + V[tr_succ[j]])
                q = sa_reward[a] + acc
                Q[a] = q
                if arg < 0 or q > best:
                    best = q
                    arg = a
            V[s] = best
            best_sa[s] = arg
    return V_arr, best_arr, Q_arr


cdef inline bint _better(uint8_t f1, uint64_t n1, uint8_t f2, uint64_t n2) nogil:
    cdef int c1, c2
    if f1 != f2:
        return f2 > f1
    c1 = _popcount(n1)
    c2 = _popcount(n2)
    if c1 != c2:
        return c1 > c2
    return n1 > n2


def propagate_forward(const int64_t[::1] order, const uint8_t[::1] is_terminal, const uint8_t[::1] state_f,
                      const uint64_t[::1] state_n, const int64_t[::1] sa_ptr, const uint8_t[::1] sa_f,
                      const uint64_t[::1] sa_n, const int64_t[::1] tr_ptr, const int64_t[::1] tr_succ,
                      const double[::1] tr_prob):
    cdef Py_ssize_t ns = is_terminal.shape[0], nsa = sa_f.shape[0]
    F_arr = np.zeros(ns, dtype=np.uint8)
    N_arr = np.zeros(ns, dtype=np.uint64)
    of_arr = np.zeros(nsa, dtype=np.uint8)
    on_arr = np.zeros(nsa, dtype=np.uint64)
    adm_arr = np.zeros(nsa, dtype=np.uint8)
    cdef uint8_t[::1] F = F_arr
    cdef uint64_t[::1] N = N_arr
    cdef uint8_t[::1] out_f = of_arr
    cdef uint64_t[::1] out_n = on_arr
    cdef uint8_t[::1] adm = adm_arr
    cdef Py_ssize_t k, s, a, j, lo, hi, x
    cdef uint8_t f, bf
    cdef uint64_t m, nn, bn
    cdef uint64_t full = <uint64_t>0xFFFFFFFFFFFFFFFF
    with nogil:
        for k in range(order.shape[0]):
            s = order[k]
            if is_terminal[s]:
                F[s] = state_f[s]
                N[s] = state_n[s]
                continue
            lo = sa_ptr[s]
            hi = sa_ptr[s + 1]
            if hi == lo:
                F[s] = 1
                N[s] = state_n[s]
                continue
            bf = 2
            bn = 0
            for a in range(lo, hi):
                f = 1 if (state_f[s] or sa_f[a]) else 0
                m = full
                for j in range(tr_ptr[a], tr_ptr[a + 1]):
                    if tr_prob[j] > 0.0:
                        x = tr_succ[j]
                        if F[x]:
                            f = 1
                        m = m & N[x]
                nn = state_n[s] | sa_n[a] | m
                out_f[a] = f
                out_n[a] = nn
                if bf == 2 or _better(f, nn, bf, bn):
                    bf = f
                    bn = nn
            F[s] = bf
            N[s] = bn
            if not bf:
                for a in range(lo, hi):
                    if out_f[a] == bf and out_n[a] == bn:
                        adm[a] = 1
    return F_arr, N_arr, of_arr, on_arr, adm_arr


cdef inline void _kill(Py_ssize_t a, uint8_t* F, uint8_t* out_f, int64_t* alive, const int64_t* sa_ptr,
                       const int64_t* sa_owner, int64_t* stack, Py_ssize_t* top) noexcept nogil:
    cdef Py_ssize_t s
    if out_f[a]:
        return
    out_f[a] = 1
    s = sa_owner[a]
    if alive[s] < 0:
        alive[s] = sa_ptr[s + 1] - sa_ptr[s]
    alive[s] -= 1
    if alive[s] == 0 and not F[s]:
        F[s] = 1
        stack[top[0]] = s
        top[0] += 1


cdef void _reverse(const int64_t* sa_ptr, const int64_t* sa_owner, const int64_t* pred_ptr, const int64_t* pred_sa,
                   const int64_t* forb_states, Py_ssize_t n_fs, const int64_t* forb_sa, Py_ssize_t n_fa,
                   uint8_t* F, uint8_t* out_f, int64_t* alive, int64_t* stack) noexcept nogil:
    cdef Py_ssize_t top = 0, i, s, a, j, x
    for i in range(n_fs):
        s = forb_states[i]
        if F[s]:
            continue
        F[s] = 1
        stack[top] = s
        top += 1
        for a in range(sa_ptr[s], sa_ptr[s + 1]):
            out_f[a] = 1
    for i in range(n_fa):
        _kill(forb_sa[i], F, out_f, alive, sa_ptr, sa_owner, stack, &top)
    while top > 0:
        top -= 1
        x = stack[top]
        for j in range(pred_ptr[x], pred_ptr[x + 1]):
            _kill(pred_sa[j], F, out_f, alive, sa_ptr, sa_owner, stack, &top)


cdef inline const int64_t* _ip(const int64_t[::1] v) noexcept nogil:
    return &v[0] if v.shape[0] > 0 else NULL


def propagate_reverse(const uint8_t[::1] is_terminal, const int64_t[::1] sa_ptr, const int64_t[::1] sa_owner,
                      const int64_t[::1] pred_ptr, const int64_t[::1] pred_sa, const int64_t[::1] forb_states,
                      const int64_t[::1] forb_sa):
    cdef Py_ssize_t ns = is_terminal.shape[0]
    F_arr = np.zeros(ns, dtype=np.uint8)
    of_arr = np.zeros(sa_owner.shape[0], dtype=np.uint8)
    alive_arr = np.full(ns, -1, dtype=np.int64)
    stack_arr = np.empty(ns, dtype=np.int64)
    cdef uint8_t[::1] F = F_arr
    cdef uint8_t[::1] out_f = of_arr
    cdef int64_t[::1] alive = alive_arr
    cdef int64_t[::1] stack = stack_arr
    with nogil:
        _reverse(_ip(sa_ptr), _ip(sa_owner), _ip(pred_ptr), _ip(pred_sa), _ip(forb_states), forb_states.shape[0],
                 _ip(forb_sa), forb_sa.shape[0], &F[0], &out_f[0] if out_f.shape[0] else NULL, &alive[0], &stack[0])
    return F_arr, of_arr


cdef class Flags:
    """Directly forbidden states and state-action pairs for one constraint set."""

    cdef const uint8_t[::1] state_f
    cdef const uint8_t[::1] sa_f

    def __init__(self, state_f, sa_f):
        self.state_f = state_f
        self.sa_f = sa_f


def solve_forbidding(Graph g, Flags flags):
    cdef const uint8_t[::1] state_f = flags.state_f
    cdef const uint8_t[::1] sa_f = flags.sa_f
    cdef const int64_t[::1] inner = g.inner
    cdef const uint8_t[::1] is_terminal = g.is_terminal
    cdef const double[::1] terminal_reward = g.terminal_reward
    cdef const int64_t[::1] sa_ptr = g.sa_ptr
    cdef const double[::1] sa_reward = g.sa_reward
    cdef const int64_t[::1] tr_ptr = g.tr_ptr
    cdef const int64_t[::1] tr_succ = g.tr_succ
    cdef const double[::1] tr_prob = g.tr_prob
    cdef const double[::1] tr_reward = g.tr_reward
    cdef Py_ssize_t ns = is_terminal.shape[0], nsa = sa_reward.shape[0]
    V_arr = np.empty(ns)
    pol_arr = np.empty(ns, dtype=np.int64)
    Q_arr = np.empty(nsa)
    F_arr = np.empty(ns, dtype=np.uint8)
    adm_arr = np.empty(nsa, dtype=np.uint8)
    cdef double[::1] V = V_arr
    cdef int64_t[::1] policy = pol_arr
    cdef double[::1] Q = Q_arr
    cdef uint8_t[::1] F = F_arr
    cdef uint8_t[::1] adm = adm_arr
    cdef Py_ssize_t k, s, a, j, lo, hi, t1
    cdef int64_t arg
    cdef double best, acc, q, v
    cdef bint ok
    with nogil:
        # forbidden states carry NaN while the pass runs, so the check rides on the value load
        for s in range(ns):
            V[s] = NAN if state_f[s] else terminal_reward[s]
            policy[s] = -1
        for k in range(inner.shape[0]):
            s = inner[k]
            lo = sa_ptr[s]
            hi = sa_ptr[s + 1]
            arg = -1
            best = -INFINITY
            if not state_f[s]:
                for a in range(lo, hi):
                    adm[a] = 0
                    if sa_f[a]:
                        Q[a] = NAN
                        continue
                    acc = 0.0
                    ok = 1
                    t1 = tr_ptr[a + 1]
                    for j in range(tr_ptr[a], t1):
                        v = V[tr_succ[j]]
                        if v != v and tr_prob[j] > 0.0:
                            ok = 0
                            break
                        acc = acc + tr_prob[j] * (tr_reward[j] + v)
                    if not ok:
                        Q[a] = NAN
                        continue
                    adm[a] = 1
                    q = sa_reward[a] + acc
                    Q[a] = q
                    if arg < 0 or q > best:
                        best = q
                        arg = a
            if arg < 0:
                V[s] = NAN
                policy[s] = lo if hi > lo else -1
                for a in range(lo, hi):
                    adm[a] = 0
                    Q[a] = NAN
            else:
                V[s] = best
                policy[s] = arg
        for s in range(ns):
            v = V[s]
            F[s] = v != v
            if v != v:
                V[s] = terminal_reward[s] if is_terminal[s] else -INFINITY
    return V_arr, pol_arr, Q_arr, F_arr, adm_arr


def simulate(Py_ssize_t s0, const int64_t[::1] policy_sa, const uint8_t[::1] is_terminal,
             const double[::1] terminal_reward, const double[::1] sa_reward, const int64_t[::1] tr_ptr,
             const int64_t[::1] tr_succ, const double[::1] tr_prob, const double[::1] tr_reward,
             const double[:, ::1] uniforms):
    cdef Py_ssize_t trials = uniforms.shape[0], depth = uniforms.shape[1]
    util_arr = np.zeros(trials)
    steps_arr = np.zeros(trials, dtype=np.int64)
    cdef double[::1] util = util_arr
    cdef int64_t[::1] steps = steps_arr
    cdef Py_ssize_t i, s, k, j, lo, hi
    cdef int64_t a
    cdef double u, x, cum
    with nogil:
        for i in range(trials):
            s = s0
            u = 0.0
            k = 0
            while not is_terminal[s]:
                a = policy_sa[s]
                if a < 0 or k >= depth:
                    u = NAN
                    break
                u = u + sa_reward[a]
                x = uniforms[i, k]
                lo = tr_ptr[a]
                hi = tr_ptr[a + 1]
                j = lo
                cum = tr_prob[j]
                while x >= cum and j < hi - 1:
                    j += 1
                    cum = cum + tr_prob[j]
                u = u + tr_reward[j]
                s = tr_succ[j]
                k += 1
            if not isnan(u):
                u = u + terminal_reward[s]
            util[i] = u
            steps[i] = k
    return util_arr, steps_arr
