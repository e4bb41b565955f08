"""Domain types of an adjustable-autonomy problem instance.

An instance bundles the entities the agent may hand decision-making control
to, the team's wait-cost model and the coordination-change (``D``) model.
Timed strategies are sequences of transfers and coordination changes.

All models are immutable; evaluation helpers accept floats or numpy arrays.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np

INF = math.inf

__all__ = [
    "ScenarioError",
    "Markovian",
    "TabulatedResponse",
    "Instant",
    "ConstantQuality",
    "TabulatedQuality",
    "ExponentialWait",
    "TabulatedWait",
    "CoordChangeModel",
    "Entity",
    "ProblemInstance",
    "Transfer",
    "CoordChange",
    "TimedStrategy",
    "wait_cost",
    "response_prob",
    "quality",
    "validate_strategy",
    "parse_strategy",
    "format_strategy",
    "scenario_from_dict",
    "scenario_to_dict",
    "load_scenario",
]


class ScenarioError(ValueError):
    """Raised for malformed models, scenario files or strategy strings."""


def _check_time(t, name="t"):
    if np.any(np.asarray(t) < 0):
        raise ValueError(f"{name} must be nonnegative, got {t!r}")


def _as_grid(times: Sequence[float], values: Sequence[float], what: str):
    ts = np.asarray(times, dtype=float)
    vs = np.asarray(values, dtype=float)
    if ts.ndim != 1 or ts.size == 0 or ts.shape != vs.shape:
        raise ScenarioError(f"{what}: times and values must be equal-length nonempty lists")
    if ts[0] < 0 or np.any(np.diff(ts) <= 0):
        raise ScenarioError(f"{what}: times must be nonnegative and strictly increasing")
    return ts, vs


# ----------------------------------------------------------------------------
# Response models


@dataclass(frozen=True)
class Markovian:
    """Memoryless response with density ``rate * exp(-rate * t)``."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ScenarioError(f"Markovian rate must be > 0, got {self.rate}")

    def density(self, t):
        return self.rate * np.exp(-self.rate * np.asarray(t, dtype=float))

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        return -np.expm1(-self.rate * t)

    def survival(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=float))

    @property
    def total_mass(self) -> float:
        return 1.0

    @property
    def support_end(self) -> float:
        return INF


@dataclass(frozen=True)
class TabulatedResponse:
    """Response density sampled on a grid, linear in between, zero outside.

    The mass may be below one; the remainder is "never responds".
    """

    times: tuple[float, ...]
    density_values: tuple[float, ...]

    def __post_init__(self):
        ts, ds = _as_grid(self.times, self.density_values, "tabulated response")
        if np.any(ds < 0):
            raise ScenarioError("tabulated response density must be nonnegative")
        total = float(np.trapezoid(ds, ts)) if ts.size > 1 else 0.0
        if total > 1 + 1e-9:
            raise ScenarioError(f"tabulated response mass {total:.6g} exceeds 1")

    @cached_property
    def _ts(self):
        return np.asarray(self.times, dtype=float)

    @cached_property
    def _ds(self):
        return np.asarray(self.density_values, dtype=float)

    @cached_property
    def _cum(self):
        ts, ds = self._ts, self._ds
        cum = np.zeros_like(ts)
        if ts.size > 1:
            cum[1:] = np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(ts))
        return cum

    def density(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self._ts, self._ds)
        return np.where((t < self._ts[0]) | (t > self._ts[-1]), 0.0, out)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        ts, ds, cum = self._ts, self._ds, self._cum
        tc = np.clip(t, ts[0], ts[-1])
        i = np.clip(np.searchsorted(ts, tc, side="right") - 1, 0, max(ts.size - 2, 0))
        if ts.size == 1:
            return np.zeros_like(tc)
        h = tc - ts[i]
        d0 = ds[i]
        d1 = np.interp(tc, ts, ds)
        return cum[i] + 0.5 * (d0 + d1) * h

    def survival(self, t):
        return 1.0 - self.cdf(t)

    @property
    def total_mass(self) -> float:
        return float(self._cum[-1])

    @property
    def support_end(self) -> float:
        return float(self._ts[-1])


@dataclass(frozen=True)
class Instant:
    """The agent's own response: decides at once with probability one."""

    def density(self, t):  # pragma: no cover - a point mass has no density
        raise TypeError("Instant responses have no density")

    def cdf(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def survival(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    @property
    def total_mass(self) -> float:
        return 1.0

    @property
    def support_end(self) -> float:
        return 0.0


ResponseModel = Union[Markovian, TabulatedResponse, Instant]


# ----------------------------------------------------------------------------
# Quality models


@dataclass(frozen=True)
class ConstantQuality:
    q: float

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.q)

    @property
    def last(self) -> float:
        return self.q

    @property
    def table_end(self) -> float:
        return 0.0


@dataclass(frozen=True)
class TabulatedQuality:
    """Quality over time; linear interpolation, held at the last value."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        _as_grid(self.times, self.values, "tabulated quality")

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self.times, self.values)

    @property
    def last(self) -> float:
        return float(self.values[-1])

    @property
    def table_end(self) -> float:
        return float(self.times[-1])


QualityModel = Union[ConstantQuality, TabulatedQuality]


# ----------------------------------------------------------------------------
# Wait-cost models


@dataclass(frozen=True)
class ExponentialWait:
    """``omega * exp(omega * t)`` up to the deadline, flat afterwards."""

    omega: float
    deadline: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ScenarioError(f"omega must be > 0, got {self.omega}")
        if not self.deadline > 0:
            raise ScenarioError(f"deadline must be > 0, got {self.deadline}")

    def __call__(self, t):
        t = np.minimum(np.asarray(t, dtype=float), self.deadline)
        return self.omega * np.exp(self.omega * t)


@dataclass(frozen=True)
class TabulatedWait:
    """Nondecreasing cost table, linear in between, capped at the deadline."""

    times: tuple[float, ...]
    costs: tuple[float, ...]
    deadline: float

    def __post_init__(self):
        ts, cs = _as_grid(self.times, self.costs, "tabulated wait cost")
        if np.any(np.diff(cs) < 0):
            raise ScenarioError("tabulated wait cost must be nondecreasing")
        if np.any(cs < 0):
            raise ScenarioError("wait costs are magnitudes and must be nonnegative")
        if not self.deadline > 0:
            raise ScenarioError(f"deadline must be > 0, got {self.deadline}")

    def __call__(self, t):
        t = np.minimum(np.asarray(t, dtype=float), self.deadline)
        return np.interp(t, self.times, self.costs)


WaitCostModel = Union[ExponentialWait, TabulatedWait]


def wait_cost(model: WaitCostModel, t):
    """Cost of the decision still being unmade at clock time ``t``."""
    _check_time(t)
    out = model(t)
    return float(out) if np.ndim(out) == 0 else out


def response_prob(model: ResponseModel, t0: float, t1: float) -> float:
    """Probability that a response arrives in ``[t0, t1)``."""
    _check_time(t0, "t0")
    if t1 < t0:
        raise ValueError(f"empty or reversed interval [{t0}, {t1})")
    if t1 == t0:
        return 0.0
    if isinstance(model, Instant):
        return 1.0 if t0 == 0 else 0.0
    if isinstance(model, Markovian):
        # difference of survivals keeps precision for far tails
        s0 = math.exp(-model.rate * t0)
        s1 = 0.0 if math.isinf(t1) else math.exp(-model.rate * t1)
        return s0 - s1
    hi = model.support_end if math.isinf(t1) else t1
    return float(model.cdf(hi) - model.cdf(t0))


def quality(model: QualityModel, t):
    _check_time(t)
    out = model(t)
    return float(out) if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------------
# Coordination changes, entities, instances


@dataclass(frozen=True)
class CoordChangeModel:
    """Value (time recovered) and per-occurrence cost of a ``D`` action.

    ``costs[K-1]`` is the cost of the K-th change; the last entry repeats.
    ``max_changes`` of ``None`` means unbounded.
    """

    value: float = 0.0
    costs: tuple[float, ...] = (0.0,)
    max_changes: int | None = 0

    def __post_init__(self):
        if self.value < 0:
            raise ScenarioError("coordination-change value must be >= 0")
        if not self.costs or any(c < 0 for c in self.costs):
            raise ScenarioError("coordination-change costs must be a nonempty list of values >= 0")
        if self.max_changes is not None and self.max_changes < 0:
            raise ScenarioError("max_changes must be >= 0")

    @property
    def cap(self) -> float:
        return INF if self.max_changes is None else self.max_changes

    def cost(self, k: int) -> float:
        """Cost of the k-th change (1-based); ``inf`` past the cap."""
        if k < 1:
            raise ValueError("occurrence index is 1-based")
        if k > self.cap:
            return INF
        return float(self.costs[min(k, len(self.costs)) - 1])


@dataclass(frozen=True)
class Entity:
    id: str
    is_agent: bool
    quality: QualityModel
    response: ResponseModel

    def __post_init__(self):
        if self.is_agent and not isinstance(self.response, Instant):
            raise ScenarioError(f"agent {self.id!r} must use the instant response model")
        if not self.is_agent and isinstance(self.response, Instant):
            raise ScenarioError(f"only the agent may respond instantly ({self.id!r})")
        if not self.id or self.id == "D" or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_\-]*", self.id):
            raise ScenarioError(f"invalid entity id {self.id!r}")


@dataclass(frozen=True)
class ProblemInstance:
    entities: tuple[Entity, ...]
    wait: WaitCostModel
    coord: CoordChangeModel = field(default_factory=CoordChangeModel)
    labels: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        if not self.entities:
            raise ScenarioError("an instance needs at least one entity")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate entity ids in {ids}")
        if sum(e.is_agent for e in self.entities) != 1:
            raise ScenarioError("exactly one entity must be the agent")

    @cached_property
    def by_id(self) -> dict[str, Entity]:
        return {e.id: e for e in self.entities}

    @property
    def agent(self) -> Entity:
        return next(e for e in self.entities if e.is_agent)

    @property
    def deadline(self) -> float:
        return self.wait.deadline

    def entity(self, eid: str) -> Entity:
        try:
            return self.by_id[eid]
        except KeyError:
            raise KeyError(f"unknown entity {eid!r}") from None

    def replace(self, **changes) -> "ProblemInstance":
        from dataclasses import replace

        return replace(self, **changes)


# ----------------------------------------------------------------------------
# Strategies


@dataclass(frozen=True)
class Transfer:
    """Give control to ``entity`` until ``end_time`` (``inf`` = forever)."""

    entity: str
    end_time: float = INF


@dataclass(frozen=True)
class CoordChange:
    """Coordination change fired at ``at_time`` during the current transfer."""

    at_time: float


Action = Union[Transfer, CoordChange]


@dataclass(frozen=True)
class TimedStrategy:
    actions: tuple[Action, ...]

    def __init__(self, actions: Iterable[Action]):
        object.__setattr__(self, "actions", tuple(actions))

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)

    @property
    def n_changes(self) -> int:
        return sum(isinstance(a, CoordChange) for a in self.actions)

    @property
    def skeleton(self) -> tuple[str, ...]:
        return tuple("D" if isinstance(a, CoordChange) else a.entity for a in self.actions)

    def __str__(self) -> str:
        return format_strategy(self)


def validate_strategy(s: TimedStrategy, inst: ProblemInstance) -> list[str]:
    """Return the list of violations; empty means the strategy is valid.

    A coordination change must fall inside the segment of the transfer that
    precedes it; transfer end times chain and never decrease.
    """
    problems: list[str] = []
    actions = list(s)
    if not actions:
        return ["strategy is empty"]
    if not isinstance(actions[0], Transfer):
        problems.append("leading action must be a transfer")
    start = 0.0
    seg_end = None
    last_time = 0.0
    n_d = 0
    for i, a in enumerate(actions):
        if isinstance(a, Transfer):
            if a.entity not in inst.by_id:
                problems.append(f"action {i}: unknown entity {a.entity!r}")
            if a.end_time is None or (isinstance(a.end_time, float) and math.isnan(a.end_time)):
                problems.append(f"action {i}: transfer has no end time")
                continue
            if seg_end is not None:
                start = seg_end
            if a.end_time < start or a.end_time < last_time:
                problems.append("times must be nondecreasing")
            if math.isinf(a.end_time) and i != len(actions) - 1 and any(
                isinstance(b, Transfer) for b in actions[i + 1 :]
            ):
                problems.append(f"action {i}: only the final transfer may last forever")
            seg_end = a.end_time
            last_time = max(last_time, start)
        else:
            n_d += 1
            if a.at_time is None or a.at_time < 0:
                problems.append(f"action {i}: coordination change needs a time >= 0")
                continue
            if a.at_time < last_time:
                problems.append("times must be nondecreasing")
            if seg_end is not None and a.at_time > seg_end:
                problems.append(f"action {i}: coordination change after its segment ends")
            last_time = max(last_time, a.at_time)
    if n_d > inst.coord.cap:
        problems.append(f"{n_d} coordination changes exceed the cap of {inst.coord.max_changes}")
    # dedupe, keep order
    return list(dict.fromkeys(problems))


def _split_tokens(text: str, ids: Sequence[str] | None) -> list[tuple[str, str | None]]:
    """Split ``"H(5)D(8)A"`` into ``[("H","5"),("D","8"),("A",None)]``.

    Multi-character ids are matched greedily against ``ids`` when given.
    """
    out = []
    i = 0
    text = text.strip()
    names = sorted(set(ids or []) | {"D"}, key=len, reverse=True)
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        match = None
        for name in names:
            if text.startswith(name, i):
                match = name
                break
        if match is None:
            if not (text[i].isalpha() or text[i] == "_"):
                raise ScenarioError(f"cannot parse strategy at {text[i:]!r}")
            match = text[i]
        i += len(match)
        arg = None
        if i < len(text) and text[i] == "(":
            j = text.find(")", i)
            if j < 0:
                raise ScenarioError(f"unbalanced parenthesis in {text!r}")
            arg = text[i + 1 : j].strip()
            i = j + 1
        out.append((match, arg))
    return out


def _parse_time(arg: str) -> float:
    if arg.lower() in ("inf", "∞", "infinity"):
        return INF
    try:
        return float(arg)
    except ValueError:
        raise ScenarioError(f"bad time {arg!r}") from None


def parse_strategy(text: str, ids: Sequence[str] | None = None) -> TimedStrategy:
    """Parse the inline notation ``H(5)D(8)A`` into a timed strategy.

    Untimed transfers get ``end_time=None`` except the final one, which lasts
    forever; untimed coordination changes get ``at_time=None``.  Such partially
    timed strategies are skeletons to be completed by the timing optimizer.
    """
    tokens = _split_tokens(text, ids)
    if not tokens:
        raise ScenarioError("empty strategy string")
    actions: list[Action] = []
    last_transfer = max((i for i, (n, _) in enumerate(tokens) if n != "D"), default=-1)
    for i, (name, arg) in enumerate(tokens):
        if name == "D":
            actions.append(CoordChange(None if arg is None else _parse_time(arg)))
        else:
            if arg is None:
                end = INF if i == last_transfer else None
            else:
                end = _parse_time(arg)
            actions.append(Transfer(name, end))
    return TimedStrategy(actions)


def _fmt_time(t: float) -> str:
    return f"{t:.10g}"


def format_strategy(s: TimedStrategy | Sequence[Action], timed: bool = True) -> str:
    parts = []
    for a in s:
        if isinstance(a, CoordChange):
            parts.append("D" if not timed or a.at_time is None else f"D({_fmt_time(a.at_time)})")
        else:
            if not timed or a.end_time is None or math.isinf(a.end_time):
                parts.append(a.entity)
            else:
                parts.append(f"{a.entity}({_fmt_time(a.end_time)})")
    return "".join(parts)


# ----------------------------------------------------------------------------
# Scenario files

_ENTITY_KEYS = {"id", "is_agent", "quality", "response"}


def _strict(d: dict, allowed: set[str], where: str, required: Iterable[str] = ()):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ScenarioError(f"{where}: missing field(s) {missing}")


def _response_from(d: dict, where: str) -> ResponseModel:
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "instant":
        _strict(d, {"kind"}, where)
        return Instant()
    if kind == "markovian":
        _strict(d, {"kind", "rate"}, where, ["rate"])
        return Markovian(float(d["rate"]))
    if kind == "tabulated":
        _strict(d, {"kind", "times", "density"}, where, ["times", "density"])
        return TabulatedResponse(tuple(map(float, d["times"])), tuple(map(float, d["density"])))
    raise ScenarioError(f"{where}: unknown response kind {kind!r}")


def _quality_from(d: dict, where: str) -> QualityModel:
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "constant":
        _strict(d, {"kind", "q"}, where, ["q"])
        return ConstantQuality(float(d["q"]))
    if kind == "tabulated":
        _strict(d, {"kind", "times", "values"}, where, ["times", "values"])
        return TabulatedQuality(tuple(map(float, d["times"])), tuple(map(float, d["values"])))
    raise ScenarioError(f"{where}: unknown quality kind {kind!r}")


def _wait_from(d: dict) -> WaitCostModel:
    kind = d.get("kind") if isinstance(d, dict) else None
    if kind == "exponential":
        _strict(d, {"kind", "omega", "deadline"}, "wait", ["omega", "deadline"])
        return ExponentialWait(float(d["omega"]), float(d["deadline"]))
    if kind == "tabulated":
        _strict(d, {"kind", "times", "costs", "deadline"}, "wait", ["times", "costs", "deadline"])
        return TabulatedWait(
            tuple(map(float, d["times"])), tuple(map(float, d["costs"])), float(d["deadline"])
        )
    raise ScenarioError(f"wait: unknown kind {kind!r}")


def scenario_from_dict(doc: dict) -> ProblemInstance:
    """Build a :class:`ProblemInstance` from the JSON scenario schema."""
    _strict(doc, {"entities", "wait", "coord", "labels"}, "scenario", ["entities", "wait"])
    ents = []
    for i, e in enumerate(doc["entities"]):
        where = f"entities[{i}]"
        _strict(e, _ENTITY_KEYS, where, ["id", "quality", "response"])
        ents.append(
            Entity(
                id=str(e["id"]),
                is_agent=bool(e.get("is_agent", False)),
                quality=_quality_from(e["quality"], where + ".quality"),
                response=_response_from(e["response"], where + ".response"),
            )
        )
    coord = CoordChangeModel()
    if "coord" in doc:
        c = doc["coord"]
        _strict(c, {"value", "costs", "max_changes"}, "coord")
        coord = CoordChangeModel(
            value=float(c.get("value", 0.0)),
            costs=tuple(map(float, c.get("costs", [0.0]))),
            max_changes=c.get("max_changes", 0),
        )
    labels = doc.get("labels", {})
    if not isinstance(labels, dict):
        raise ScenarioError("labels must be an object")
    return ProblemInstance(tuple(ents), _wait_from(doc["wait"]), coord, tuple(sorted(labels.items())))


def _response_to(r: ResponseModel) -> dict:
    if isinstance(r, Instant):
        return {"kind": "instant"}
    if isinstance(r, Markovian):
        return {"kind": "markovian", "rate": r.rate}
    return {"kind": "tabulated", "times": list(r.times), "density": list(r.density_values)}


def _quality_to(q: QualityModel) -> dict:
    if isinstance(q, ConstantQuality):
        return {"kind": "constant", "q": q.q}
    return {"kind": "tabulated", "times": list(q.times), "values": list(q.values)}


def scenario_to_dict(inst: ProblemInstance) -> dict:
    w = inst.wait
    if isinstance(w, ExponentialWait):
        wait = {"kind": "exponential", "omega": w.omega, "deadline": w.deadline}
    else:
        wait = {"kind": "tabulated", "times": list(w.times), "costs": list(w.costs), "deadline": w.deadline}
    return {
        "labels": dict(inst.labels),
        "entities": [
            {
                "id": e.id,
                "is_agent": e.is_agent,
                "quality": _quality_to(e.quality),
                "response": _response_to(e.response),
            }
            for e in inst.entities
        ],
        "wait": wait,
        "coord": {
            "value": inst.coord.value,
            "costs": list(inst.coord.costs),
            "max_changes": inst.coord.max_changes,
        },
    }


def load_scenario(path: str | Path) -> ProblemInstance:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_dict(doc)
