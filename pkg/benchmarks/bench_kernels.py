"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeats N]

Prints one line per kernel with the best-of-N time of each backend and the
speed-up.  Exits early with a message when the extension is not built.
"""

import argparse
import time
from importlib.resources import files

import numpy as np

from adjauto import _kernels_py as pure
from adjauto.mdp import DelayScenario, build_delay_mdp
from adjauto.solver import _direct, load_constraints

try:
    from adjauto import _kernels as compiled
except ImportError:
    compiled = None


def best_of(fn, repeats):
    t = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        t = min(t, time.perf_counter() - t0)
    return t


def graph(mod, m):
    return mod.Graph(m.order, m.is_terminal, m.terminal_reward, m.sa_ptr, m.sa_reward, m.tr_ptr, m.tr_succ, m.tr_prob, m.tr_reward)


def cases(mod, m, cs):
    g = graph(mod, m)
    d = _direct(m, cs)
    flags = mod.Flags(d.state_f, d.sa_f)
    fwd = (m.order, m.is_terminal, d.state_f, d.state_n, m.sa_ptr, d.sa_f, d.sa_n, m.tr_ptr, m.tr_succ, m.tr_prob)
    pol = np.ascontiguousarray(pure.backward_induction(graph(pure, m))[1], dtype=np.int64)
    U = np.random.default_rng(0).random((2000, 40))
    sim = (m.initial, pol, m.is_terminal, m.terminal_reward, m.sa_reward, m.tr_ptr, m.tr_succ, m.tr_prob, m.tr_reward, U)
    dp = (0.1, 1.0, np.array([0.3, 0.05]), np.array([3.0, 5.0]), 20, np.full(3, 0.2), 0.05, 400, 2)
    return {
        "backward_induction": lambda: mod.backward_induction(g),
        "solve_forbidding": lambda: mod.solve_forbidding(g, flags),
        "propagate_forward": lambda: mod.propagate_forward(*fwd),
        "simulate (2000 trials)": lambda: mod.simulate(*sim),
        "clock_dp (400 steps)": lambda: mod.clock_dp(*dp),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; run: pip install -e . --no-build-isolation")
        return
    m = build_delay_mdp(DelayScenario())
    cs = load_constraints(files("adjauto") / "data" / "delay_constraints.json")
    print(f"delay MDP: {m.n_states} states, {m.n_sa} state-action pairs, {len(cs)} constraints")
    py, cy = cases(pure, m, cs), cases(compiled, m, cs)
    print(f"{'kernel':24s} {'pure ms':>10s} {'compiled ms':>12s} {'speed-up':>9s}")
    for name in py:
        tp, tc = best_of(py[name], args.repeats), best_of(cy[name], args.repeats)
        print(f"{name:24s} {tp * 1e3:10.3f} {tc * 1e3:12.3f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
