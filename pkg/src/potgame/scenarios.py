"""Scenario files: parsing, validation, serialization and game construction.

Scenarios are JSON documents. Unknown fields are rejected with their
location (``agents[1].cost.Qx``); syntax errors carry line and column.
Parsing and re-serializing a scenario is lossless.
"""

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from potgame.constraints import build_constraints
from potgame.dynamics import JointDynamics, make_model
from potgame.exceptions import ScenarioError
from potgame.game import GameSpec, QuadraticCost
from potgame.solver import SolverOptions

TOP_FIELDS = {
    "name": True, "description": False, "horizon_seconds": True, "step_size": True,
    "seed": False, "agents": True, "constraints": False, "solver": False, "mpc": False,
    "benchmark": False,
}
AGENT_FIELDS = {"name": False, "model": True, "model_params": False, "initial_state": True,
                "goal_state": True, "cost": True, "note": False}
COST_FIELDS = {"Q": True, "C": True, "Q_f": True}
CONSTRAINT_FIELDS = {
    "collision": {"agents": False, "d_collision": True, "position_dims": False},
    "control_bound": {"agents": False, "indices": False, "bound": True},
    "speed_limit": {"agents": False, "indices": False, "max_speed": True},
    "rod": {"agents": True, "length": True, "position_dims": False},
    "cylinder": {"quadrotors": True, "humans": True, "radius": True, "half_height": True, "height_index": False},
}
MPC_FIELDS = {"total_steps": True, "horizon": False, "step_size": False, "warm_start": False,
              "replan_every": False, "scripted": False, "stop_on_failure": False}
BENCH_FIELDS = {"trials": False, "position_box": False, "heading_range": False, "seed": False,
                "bins": False, "certify": False}

SHIPPED = ("four_agent_exchange", "rod_carry")


def _check_fields(obj, spec, where):
    if not isinstance(obj, dict):
        raise ScenarioError(f"expected an object, got {type(obj).__name__}", location=where)
    for key in obj:
        if key not in spec:
            raise ScenarioError(f"unknown field {key!r}", location=f"{where}.{key}" if where else key)
    for key, required in spec.items():
        if required and key not in obj:
            raise ScenarioError(f"missing required field {key!r}", location=where or "<root>")


def _number(v, where, positive=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"expected a number, got {v!r}", location=where)
    if not math.isfinite(v):
        raise ScenarioError("value must be finite", location=where)
    if integer and int(v) != v:
        raise ScenarioError(f"expected an integer, got {v!r}", location=where)
    if positive and v <= 0:
        raise ScenarioError(f"must be > 0, got {v!r}", location=where)
    return v


def _vector(v, where, length=None):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list):
        raise ScenarioError(f"expected a list of numbers, got {v!r}", location=where)
    for j, x in enumerate(v):
        _number(x, f"{where}[{j}]")
    if length is not None and len(v) != length:
        raise ScenarioError(f"expected {length} entries, got {len(v)}", location=where)
    return v


@dataclass
class Scenario:
    """Validated scenario document; ``data`` holds the JSON object as given."""

    data: dict
    source: str = None

    @property
    def name(self):
        return self.data["name"]

    @property
    def seed(self):
        return int(self.data.get("seed", 0))

    @property
    def horizon(self):
        return int(round(self.data["horizon_seconds"] / self.data["step_size"]))

    def to_dict(self):
        return copy.deepcopy(self.data)

    def dumps(self):
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def hash(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.data == other.data

    def with_overrides(self, seed=None, solver=None):
        data = self.to_dict()
        if seed is not None:
            data["seed"] = int(seed)
        if solver:
            merged = dict(data.get("solver", {}))
            merged.update(solver)
            data["solver"] = merged
        return validate(data, self.source)

    # -- construction --------------------------------------------------------

    def models(self):
        return [make_model(a["model"], **a.get("model_params", {})) for a in self.data["agents"]]

    def dynamics(self):
        return JointDynamics(self.models(), float(self.data["step_size"]))

    def build(self):
        """The :class:`GameSpec` described by this scenario."""
        dyn = self.dynamics()
        agents = self.data["agents"]
        costs = [
            QuadraticCost(a["cost"]["Q"], a["cost"]["C"], a["cost"]["Q_f"], a["goal_state"]) for a in agents
        ]
        try:
            cs = build_constraints(self.data.get("constraints", []), dyn)
        except (ValueError, KeyError) as exc:
            raise ScenarioError(str(exc).strip("'\""), location="constraints") from None
        x0 = np.concatenate([np.asarray(a["initial_state"], dtype=float) for a in agents])
        names = tuple(a.get("name", f"agent{i}") for i, a in enumerate(agents))
        return GameSpec(dyn, costs, cs, self.horizon, x0, names)

    def solver_options(self):
        return SolverOptions.from_dict(self.data.get("solver", {}))

    def mpc_config(self, **overrides):
        from potgame.mpc import MPCConfig

        if "mpc" not in self.data and "total_steps" not in overrides:
            raise ScenarioError("scenario has no 'mpc' block", location="mpc")
        block = dict(self.data.get("mpc", {}))
        block.update(overrides)
        scripted = {int(k): v for k, v in block.pop("scripted", {}).items()}
        try:
            return MPCConfig(scripted=scripted, solver=self.solver_options(), **block)
        except ValueError as exc:
            raise ScenarioError(str(exc), location="mpc") from None


def validate(data, source=None):
    """Check a parsed JSON object against the scenario schema and return a :class:`Scenario`."""
    _check_fields(data, TOP_FIELDS, "")
    if not isinstance(data["name"], str) or not data["name"]:
        raise ScenarioError("name must be a non-empty string", location="name")
    h = _number(data["step_size"], "step_size", positive=True)
    horizon = _number(data["horizon_seconds"], "horizon_seconds")
    ratio = horizon / h
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)):
        raise ScenarioError(f"horizon_seconds {horizon} is not a multiple of step_size {h}", location="horizon_seconds")
    if round(ratio) < 1:
        raise ScenarioError(f"horizon must span at least one step, got T={round(ratio)}", location="horizon_seconds")
    if "seed" in data:
        _number(data["seed"], "seed", integer=True)
    agents = data["agents"]
    if not isinstance(agents, list) or not agents:
        raise ScenarioError("agents must be a non-empty list", location="agents")
    for i, a in enumerate(agents):
        where = f"agents[{i}]"
        _check_fields(a, AGENT_FIELDS, where)
        params = a.get("model_params", {})
        if not isinstance(params, dict):
            raise ScenarioError("model_params must be an object", location=f"{where}.model_params")
        try:
            model = make_model(a["model"], **params)
        except (ValueError, TypeError) as exc:
            raise ScenarioError(str(exc), location=f"{where}.model") from None
        n, m = model.state_dim, model.control_dim
        _vector(a["initial_state"], f"{where}.initial_state", n)
        _vector(a["goal_state"], f"{where}.goal_state", n)
        _check_fields(a["cost"], COST_FIELDS, f"{where}.cost")
        for key, dim in (("Q", n), ("C", m), ("Q_f", n)):
            w = a["cost"][key]
            loc = f"{where}.cost.{key}"
            if isinstance(w, list) and w and isinstance(w[0], list):
                if len(w) != dim:
                    raise ScenarioError(f"expected a {dim}x{dim} matrix", location=loc)
                for r, row in enumerate(w):
                    _vector(row, f"{loc}[{r}]", dim)
                W = np.asarray(w, dtype=float)
            else:
                W = np.diag(_vector(w, loc, dim)).astype(float)
            if not np.allclose(W, W.T) or np.linalg.eigvalsh(W).min() < -1e-12:
                raise ScenarioError("weight must be symmetric positive semidefinite", location=loc)
    for c, desc in enumerate(data.get("constraints", [])):
        where = f"constraints[{c}]"
        if not isinstance(desc, dict) or desc.get("type") not in CONSTRAINT_FIELDS:
            kind = desc.get("type") if isinstance(desc, dict) else desc
            raise ScenarioError(
                f"unknown constraint type {kind!r}; expected one of {sorted(CONSTRAINT_FIELDS)}", location=f"{where}.type"
            )
        fields = dict(CONSTRAINT_FIELDS[desc["type"]], type=True)
        _check_fields(desc, fields, where)
    if "solver" in data:
        if not isinstance(data["solver"], dict):
            raise ScenarioError("solver must be an object", location="solver")
        try:
            SolverOptions.from_dict(data["solver"])
        except (ValueError, TypeError) as exc:
            raise ScenarioError(str(exc), location="solver") from None
    if "mpc" in data:
        _check_fields(data["mpc"], MPC_FIELDS, "mpc")
    if "benchmark" in data:
        _check_fields(data["benchmark"], BENCH_FIELDS, "benchmark")
    scen = Scenario(copy.deepcopy(data), source)
    scen.build()
    if "mpc" in data:
        scen.mpc_config()
    return scen


def loads(text, source=None):
    """Parse scenario JSON text."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno, column=exc.colno, location=source) from None
    return validate(data, source)


def shipped_path(name):
    return resources.files("potgame").joinpath("data").joinpath(f"{name}.json")


def load(path_or_name):
    """Load a scenario from a file path or the name of a shipped scenario."""
    p = Path(str(path_or_name))
    if p.is_file():
        return loads(p.read_text(), str(p))
    if str(path_or_name) in SHIPPED:
        res = shipped_path(str(path_or_name))
        return loads(res.read_text(), str(path_or_name))
    raise ScenarioError(f"no such scenario file or shipped scenario: {path_or_name}", location=str(path_or_name))


def dump(scenario, path):
    Path(path).write_text(scenario.dumps())


# ---------------------------------------------------------------------------
# benchmark configuration

@dataclass
class BenchmarkConfig:
    """Randomized initial conditions around a base scenario.

    Each agent's position entries are perturbed uniformly within
    ``+- position_box`` of the base initial state; headings are drawn
    uniformly from ``heading_range``.
    """

    scenario: Scenario
    trials: int = 200
    position_box: float = 0.5
    heading_range: tuple = (-math.pi, math.pi)
    seed: int = 0
    bins: int = 20
    certify: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.trials) != self.trials or self.trials < 1:
            raise ScenarioError(f"trials must be a positive integer, got {self.trials!r}", location="benchmark.trials")
        if not self.position_box > 0:
            raise ScenarioError("position_box must be > 0", location="benchmark.position_box")
        lo, hi = self.heading_range
        if not hi > lo:
            raise ScenarioError("heading_range must satisfy low < high", location="benchmark.heading_range")
        if int(self.bins) != self.bins or self.bins < 1:
            raise ScenarioError("bins must be a positive integer", location="benchmark.bins")
        self.trials = int(self.trials)
        self.bins = int(self.bins)
        self.heading_range = (float(lo), float(hi))

    @classmethod
    def from_scenario(cls, scenario, trials=None, seed=None):
        block = dict(scenario.data.get("benchmark", {}))
        if trials is not None:
            block["trials"] = trials
        if seed is not None:
            block["seed"] = seed
        elif "seed" not in block:
            block["seed"] = scenario.seed
        if "heading_range" in block:
            block["heading_range"] = tuple(_vector(block["heading_range"], "benchmark.heading_range", 2))
        return cls(scenario, **block)

    def to_dict(self):
        return {
            "scenario": self.scenario.name,
            "scenario_hash": self.scenario.hash(),
            "trials": self.trials,
            "position_box": self.position_box,
            "heading_range": list(self.heading_range),
            "seed": self.seed,
            "bins": self.bins,
            "certify": self.certify,
        }

    def trial_seed(self, t):
        return int(np.random.SeedSequence([int(self.seed), int(t)]).generate_state(1)[0])

    def initial_state(self, t, spec):
        """Randomized initial joint state of trial ``t`` (bit-exact for a fixed seed)."""
        rng = np.random.default_rng(self.trial_seed(t))
        x0 = np.array(spec.x0, dtype=float)
        dyn = spec.dynamics
        for i, mdl in enumerate(dyn.models):
            base = dyn.state_slices[i].start
            pos = [base + p for p in mdl.position_indices[:2]]
            x0[pos] += rng.uniform(-self.position_box, self.position_box, size=len(pos))
            if mdl.heading_index is not None:
                x0[base + mdl.heading_index] = rng.uniform(*self.heading_range)
        return x0


def load_benchmark(path):
    """Benchmark config file: ``{"scenario": <path or shipped name>, ...benchmark fields}``."""
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, line=exc.lineno, column=exc.colno, location=str(p)) from None
    if not isinstance(data, dict) or "scenario" not in data:
        raise ScenarioError("benchmark config needs a 'scenario' field", location=str(p))
    fields = dict(BENCH_FIELDS, scenario=True)
    _check_fields(data, fields, "")
    ref = data.pop("scenario")
    ref_path = p.parent / ref
    scen = load(ref_path if ref_path.is_file() else ref)
    merged = scen.to_dict()
    merged["benchmark"] = dict(merged.get("benchmark", {}), **data)
    return BenchmarkConfig.from_scenario(validate(merged, scen.source))
