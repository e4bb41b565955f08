import os
import subprocess
import sys

import numpy as np
import pytest

from adjauto import _kernels_py as pure
from adjauto.mdp import DelayScenario, build_delay_mdp
from adjauto.solver import _direct
from randmdp import random_constraints, random_mdp

compiled = pytest.importorskip("adjauto._kernels")


def _graph(mod, m):
    return mod.Graph(m.order, m.is_terminal, m.terminal_reward, m.sa_ptr, m.sa_reward, m.tr_ptr, m.tr_succ, m.tr_prob, m.tr_reward)


def _same(a, b):
    for x, y in zip(a, b):
        np.testing.assert_array_equal(np.asarray(x), np.asarray(y))


MDPS = [("delay", lambda: build_delay_mdp(DelayScenario()))] + [
    (f"random{i}", lambda i=i: random_mdp(np.random.default_rng(100 + i), 40)) for i in range(5)
]


@pytest.mark.parametrize("name,make", MDPS)
def test_backward_induction_bit_identical(name, make):
    m = make()
    allowed = (np.arange(m.n_sa) % 3 != 0).astype(np.uint8)
    for mask in (None, allowed):
        _same(pure.backward_induction(_graph(pure, m), mask), compiled.backward_induction(_graph(compiled, m), mask))


@pytest.mark.parametrize("seed", range(8))
def test_constraint_kernels_bit_identical(seed):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, 40)
    cs = random_constraints(rng, 4)
    d = _direct(m, cs)
    args = (m.order, m.is_terminal, d.state_f, d.state_n, m.sa_ptr, d.sa_f, d.sa_n, m.tr_ptr, m.tr_succ, m.tr_prob)
    _same(pure.propagate_forward(*args), compiled.propagate_forward(*args))
    pptr, psa = m.predecessors
    rargs = (m.is_terminal, m.sa_ptr, m.sa_owner, pptr, psa, d.forb_states, d.forb_sa)
    _same(pure.propagate_reverse(*rargs), compiled.propagate_reverse(*rargs))
    _same(
        pure.solve_forbidding(_graph(pure, m), pure.Flags(d.state_f, d.sa_f)),
        compiled.solve_forbidding(_graph(compiled, m), compiled.Flags(d.state_f, d.sa_f)),
    )


@pytest.mark.parametrize("changes", [0, 2])
def test_clock_dp_bit_identical(changes):
    args = (0.1, 1.0, np.array([0.3, 0.05]), np.array([3.0, 5.0]), 20, np.full(changes + 1, 0.2), 0.05, 400, changes)
    _same(pure.clock_dp(*args), compiled.clock_dp(*args))


def test_simulate_bit_identical():
    m = build_delay_mdp(DelayScenario())
    pol = np.ascontiguousarray(compiled.backward_induction(_graph(compiled, m))[1], dtype=np.int64)
    U = np.random.default_rng(0).random((300, 40))
    args = (m.initial, pol, m.is_terminal, m.terminal_reward, m.sa_reward, m.tr_ptr, m.tr_succ, m.tr_prob, m.tr_reward, U)
    _same(pure.simulate(*args), compiled.simulate(*args))


def test_environment_switch_forces_pure_backend():
    env = {**os.environ, "ADJAUTO_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", "from adjauto import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
