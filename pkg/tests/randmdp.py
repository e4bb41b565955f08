"""Random acyclic MDPs and constraint sets shared by the solver tests."""

import numpy as np

from adjauto.mdp import mdp_from_table
from adjauto.solver import Constraint

LABELS = ("wait", "coord", "transfer:U", "decide:go")


def random_mdp(rng: np.random.Generator, n_states: int | None = None, max_actions: int = 3, max_succ: int = 3):
    """Successors always have larger indices, so the graph is acyclic."""
    n = int(n_states or rng.integers(4, 51))
    n_term = max(1, int(rng.integers(1, max(2, n // 3))))
    terminals = {s: float(rng.normal()) for s in range(n - n_term, n)}
    actions = {}
    for s in range(n - n_term):
        k = int(rng.integers(1, max_actions + 1))
        labels = rng.choice(len(LABELS), size=k, replace=False)
        acts = []
        for li in labels:
            m = int(rng.integers(1, max_succ + 1))
            succ = rng.choice(np.arange(s + 1, n), size=min(m, n - s - 1), replace=False)
            p = rng.dirichlet(np.ones(len(succ)))
            acts.append((LABELS[li], float(rng.normal(scale=0.3)), [(int(x), float(q), float(rng.normal(scale=0.1))) for x, q in zip(succ, p)]))
        actions[s] = acts
    features = {"color": [float(v) for v in rng.integers(0, 4, size=n)], "zone": [str(v) for v in rng.choice(["a", "b", "c"], size=n)]}
    return mdp_from_table(n, terminals, actions, features=features)


def random_constraints(rng: np.random.Generator, max_n: int = 4) -> list[Constraint]:
    kinds = ("forbidden_state", "forbidden_action", "required_state", "required_action")
    cs = []
    for i in range(int(rng.integers(1, max_n + 1))):
        kind = kinds[int(rng.integers(4))]
        if rng.random() < 0.5:
            pred = (("color", "==", float(rng.integers(0, 4))),)
        else:
            pred = (("zone", "==", str(rng.choice(["a", "b", "c"]))),)
        act = ()
        if kind.endswith("action"):
            act = (("action", "==", LABELS[int(rng.integers(len(LABELS)))]),)
            if rng.random() < 0.5:
                pred = ()
        cs.append(Constraint(f"c{i}", kind, pred, act))
    return cs
