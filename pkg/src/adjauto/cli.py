"""Command-line front end.

Every subcommand writes its artifacts into ``--out-dir`` next to a
``<command>.manifest.json`` that records the inputs (with sha256 digests), the seed and
the outputs.  Exit status: 0 ok, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import (
    action_census,
    auction_csv,
    auction_replay,
    constraint_timing,
    extract_strategy,
    histogram_csv,
    parameter_sweep,
    simulate_policy,
    sweep_csv,
)
from .eu import (
    LOCATION_RATES,
    MEETING_TYPES,
    NumericError,
    eu_of_strategy,
    meeting_regime,
    simple_strategy_table,
)
from .mdp import (
    DECISIONS,
    AuctionScenario,
    DelayScenario,
    build_abstract_mdp,
    build_auction_mdp,
    build_delay_mdp,
    load_mdp,
)
from .model import ScenarioError, format_strategy, load_scenario, parse_strategy, validate_strategy
from .search import ExperimentConfig, best_strategy
from .search import histogram_csv as length_histogram_csv
from .search import random_config_experiment
from .solver import constrained_value_iteration, load_constraints, value_iteration, verification_csv, verify_policy

DATA = Path(__file__).parent / "data"
EXPERIMENTS = ("fig10", "fig11", "fig14", "fig15", "table5", "table6")
REPAIR_COSTS = (0, 0.25, 0.5, 1, 2, 4, 8, 16, 64)
RESPONSE_MEANS = (1, 2, 5, 10, 20, 30, 45, 60, 90, 120)


@dataclass
class RunManifest:
    command: list[str]
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    seed: int = 0
    outputs: dict[str, str] = field(default_factory=dict)
    engine_version: str = __version__
    backend: str = kernels.BACKEND
    wall_time: float = 0.0


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Run:
    def __init__(self, args, argv):
        self.out = Path(args.out_dir)
        self.manifest = RunManifest(command=list(argv), seed=args.seed)
        self.name = args.command if args.command != "experiment" else f"experiment_{args.name}"

    def input(self, path) -> Path:
        p = Path(path)
        try:
            self.manifest.inputs[str(p)] = _sha256(p.read_bytes())
        except OSError as exc:
            raise ScenarioError(f"cannot read {p}: {exc.strerror}") from None
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.out / name
        atomic_write(p, text)
        self.manifest.outputs[str(p)] = _sha256(text.encode())
        return p

    def finish(self, t0: float):
        self.manifest.wall_time = time.perf_counter() - t0
        atomic_write(self.out / f"{self.name}.manifest.json", json.dumps(asdict(self.manifest), indent=2) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return f"{x:.12g}"


# ----------------------------------------------------------------------------
# input helpers


def _need(args, name):
    if getattr(args, name) is None:
        raise ScenarioError(f"--{name.replace('_', '-')} is required")
    return getattr(args, name)


def _strategy_text(run, args) -> str:
    s = _need(args, "strategy")
    if os.path.isfile(s):
        return run.input(s).read_text(encoding="utf-8").strip()
    return s


def _mdp(run, args, default=None):
    """The MDP named by ``--mdp`` (or ``default()``) and its scenario."""
    if args.mdp is None:
        if default is None:
            raise ScenarioError("--mdp is required")
        sc = default()
    else:
        m, sc = load_mdp(run.input(args.mdp))
        if args.grid_step is None:
            return m, sc
    if args.grid_step is not None:
        if isinstance(sc, DelayScenario):
            sc = replace(sc, step=args.grid_step)
        elif not isinstance(sc, AuctionScenario):
            return build_abstract_mdp(sc, args.grid_step), sc
    if isinstance(sc, DelayScenario):
        return build_delay_mdp(sc), sc
    if isinstance(sc, AuctionScenario):
        return build_auction_mdp(sc), sc
    raise ScenarioError("unsupported scenario")


def _constraints(run, args):
    return [] if args.constraints is None else load_constraints(run.input(args.constraints))


def _delay(run, args) -> DelayScenario:
    _, sc = _mdp(run, args, DelayScenario)
    if not isinstance(sc, DelayScenario):
        raise ScenarioError("this command needs a delay MDP")
    return sc


def _solve(mdp, cs):
    return constrained_value_iteration(mdp, cs) if cs else value_iteration(mdp)


# ----------------------------------------------------------------------------
# subcommands


def cmd_eval(run, args):
    inst = load_scenario(run.input(_need(args, "scenario")))
    s = parse_strategy(_strategy_text(run, args), list(inst.by_id))
    problems = validate_strategy(s, inst)
    if problems:
        raise ScenarioError("; ".join(problems))
    br = eu_of_strategy(inst, s)
    header = ["strategy", "total", "accumulated_wait", "coord_costs", "response_mass"]
    row = [format_strategy(s), _num(br.total), _num(br.accumulated_wait), _num(br.coord_costs), _num(br.response_mass)]
    for i, (who, v) in enumerate(br.per_segment):
        header += [f"segment_{i + 1}", f"segment_{i + 1}_eu"]
        row += [who, _num(v)]
    run.write("eval.csv", _csv(header, [row]))
    print(f"{format_strategy(s)}  EU {br.total:.6g}")


def cmd_search(run, args):
    inst = load_scenario(run.input(_need(args, "scenario")))
    rep = best_strategy(inst, args.max_len)
    rows = sorted(rep.table.items(), key=lambda kv: -kv[1])
    run.write("search.csv", _csv(["skeleton", "eu"], [["".join(sk), _num(v)] for sk, v in rows]))
    print(f"best {format_strategy(rep.best)}  EU {rep.best_eu:.6g}  "
          f"({rep.examined} examined, {rep.pruned_redundant + rep.pruned_takeback + rep.pruned_costly_change} pruned)")


def cmd_build(run, args):
    mdp, _ = _mdp(run, args)
    problems = mdp.validate()
    if problems:
        raise ScenarioError("; ".join(problems))
    run.write("mdp.txt", mdp.dump())
    print(f"{mdp.n_states} states, {mdp.n_sa} state-action pairs, acyclic {mdp.acyclic}")


def _policy_rows(mdp, res):
    for s, st in enumerate(mdp.states):
        act = res.action(mdp, s)
        row = [s, st.controller, st.time_index, st.d_count, st.response or "", act.label if act else "", _num(res.U[s])]
        if res.F is not None:
            v = res.value(s)
            row += [int(v.F), " ".join(sorted(v.N))]
        yield row


def cmd_solve(run, args):
    mdp, _ = _mdp(run, args)
    cs = _constraints(run, args)
    res = _solve(mdp, cs)
    header = ["state_id", "controller", "time_index", "d_count", "response", "action", "U"]
    if res.F is not None:
        header += ["F", "N"]
    run.write("policy.csv", _csv(header, _policy_rows(mdp, res)))
    print(f"U(s0) {res.value(mdp.initial)}  strategy {extract_strategy(res.policy, mdp)}")


def cmd_verify(run, args):
    mdp, _ = _mdp(run, args)
    cs = _constraints(run, args)
    if not cs:
        raise ScenarioError("--constraints is required")
    report = verify_policy(mdp, _solve(mdp, cs).policy, cs)
    run.write("verify.csv", verification_csv(report))
    for cid, status, _ in report:
        print(f"{cid}: {status}")


def cmd_census(run, args):
    mdp, sc = _mdp(run, args, DelayScenario)
    res = _solve(mdp, _constraints(run, args))
    decisions = DECISIONS if isinstance(sc, DelayScenario) else ()
    c = action_census(res.policy, mdp, decisions)
    run.write("census.csv", sweep_csv([(math.nan, c)]))
    print(f"ask {c.ask}, wait {c.wait}, delay {c.delay_total}, decide {sum(c.decide.values())}")


def cmd_sweep(run, args):
    sc = _delay(run, args)
    values = args.values or (REPAIR_COSTS if args.param == "lam1" else None)
    if not values:
        raise ScenarioError("--values is required for this parameter")
    rows = parameter_sweep(sc, args.param, values)
    run.write(f"sweep_{args.param}.csv", sweep_csv(rows, sc.max_delays))
    print(" ".join(f"{v:g}:{c.ask}" for v, c in rows))


def cmd_simulate(run, args):
    mdp, _ = _mdp(run, args)
    res = _solve(mdp, _constraints(run, args))
    sim = simulate_policy(mdp, res.policy, seed=args.seed, trials=args.trials)
    run.write("lengths.csv", histogram_csv(sim.length_histogram))
    u = float(res.U[mdp.initial])
    run.write("simulation.csv", _csv(["trials", "mean", "std_error", "solver_u"],
                                     [[args.trials, _num(sim.mean), _num(sim.std_error), _num(u)]]))
    print(f"mean {sim.mean:.6g} +- {sim.std_error:.2g} (solver {u:.6g})")


def _auction(run, args, n_seeds):
    mdp, sc = _mdp(run, args, AuctionScenario)
    if not isinstance(sc, AuctionScenario):
        raise ScenarioError("this command needs an auction MDP")
    pol = value_iteration(mdp).policy
    rows = [(s, *auction_replay(sc, s, pol, mdp)) for s in range(args.seed, args.seed + n_seeds)]
    gap = float(np.mean([abs(a - b) for _, a, b in rows]))
    return rows, gap


def cmd_auction(run, args):
    rows, gap = _auction(run, args, args.seeds)
    run.write("auction.csv", auction_csv(rows))
    print(f"mean |MDP% - eA%| {gap:.2f}")


def cmd_experiment(run, args):
    name = args.name
    if name == "fig10":
        cfg = ExperimentConfig() if args.grid_step is None else ExperimentConfig(step=args.grid_step)
        hist, _ = random_config_experiment(cfg, seed=args.seed)
        run.write("fig10.csv", length_histogram_csv(hist))
    elif name in ("fig11", "fig14"):
        sc = _delay(run, args)
        param, values = ("lam1", REPAIR_COSTS) if name == "fig11" else ("response_mean", RESPONSE_MEANS)
        run.write(f"{name}.csv", sweep_csv(parameter_sweep(sc, param, args.values or values), sc.max_delays))
    elif name == "fig15":
        mdp, _ = _mdp(run, args, DelayScenario)
        cs = _constraints(run, args) or load_constraints(run.input(DATA / "delay_constraints.json"))
        rows = []
        for k in range(len(cs) + 1):
            t = constraint_timing(mdp, cs[:k], repeats=args.repeats)
            rows.append([k, _num(t["log10_strategies"]), _num(t["plain_s"]), _num(t["constrained_s"])])
        run.write("fig15.csv", _csv(["n_constraints", "log10_strategies", "plain_s", "constrained_s"], rows))
    elif name == "table5":
        rows = []
        for meeting in MEETING_TYPES:
            for loc in LOCATION_RATES:
                tab = simple_strategy_table(meeting_regime(meeting, loc))
                rows.append([meeting, loc] + [_num(tab[k][0]) for k in ("A", "e", "eA", "eDA")]
                            + [format_strategy(tab["eA"][1]), format_strategy(tab["eDA"][1])])
        run.write("table5.csv", _csv(["meeting", "location", "A", "e", "eA", "eDA", "eA_strategy", "eDA_strategy"], rows))
    else:  # table6
        rows, gap = _auction(run, args, args.seeds)
        run.write("table6.csv", auction_csv(rows))
        print(f"mean |MDP% - eA%| {gap:.2f}")
    print(f"wrote {', '.join(run.manifest.outputs)}")


# ----------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="instance scenario JSON")
    common.add_argument("--mdp", help="MDP description JSON (kind delay, auction or abstract)")
    common.add_argument("--constraints", help="constraint set JSON")
    common.add_argument("--strategy", help="strategy string such as 'H(8)D(5)A', or a file holding one")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--grid-step", type=float, help="time step of the MDP or experiment grid")
    common.add_argument("--max-len", type=int, default=3, help="longest strategy searched")
    common.add_argument("--param", default="lam1", help="delay-scenario field to sweep")
    common.add_argument("--values", type=_floats, help="comma-separated sweep values")
    common.add_argument("--trials", type=int, default=10_000)
    common.add_argument("--seeds", type=int, default=50, help="number of auction bid streams")
    common.add_argument("--repeats", type=int, default=20, help="timing repeats (best of)")

    p = argparse.ArgumentParser(prog="adjauto", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("eval", "EU of a strategy"),
        ("search", "best strategy up to --max-len"),
        ("build", "dump an MDP"),
        ("solve", "policy and values, optionally constrained"),
        ("verify", "check a constrained policy by reachability"),
        ("census", "count actions in the optimal policy"),
        ("sweep", "census over values of one delay-scenario field"),
        ("simulate", "Monte-Carlo execution of the optimal policy"),
        ("auction", "MDP vs fixed-strategy auction closure"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    ex = sub.add_parser("experiment", parents=[common], help="reproduction bundles")
    ex.add_argument("name", choices=EXPERIMENTS)
    return p


COMMANDS = {
    "eval": cmd_eval, "search": cmd_search, "build": cmd_build, "solve": cmd_solve, "verify": cmd_verify,
    "census": cmd_census, "sweep": cmd_sweep, "simulate": cmd_simulate, "auction": cmd_auction,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    if args.max_len < 1 or args.trials < 1 or args.seeds < 1 or args.repeats < 1:
        print("adjauto: error: --max-len, --trials, --seeds and --repeats must be positive", file=sys.stderr)
        return 2
    run = _Run(args, argv)
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](run, args)
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"adjauto: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ScenarioError, ValueError, KeyError, TypeError) as exc:
        print(f"adjauto: invalid input: {exc}", file=sys.stderr)
        return 2
    run.finish(t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
