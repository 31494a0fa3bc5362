"""Command-line interface: ``potgame {solve,bench,mpc,verify,export}``.

Exit codes: 0 success, 1 solver or verification failure, 2 input error.
Every JSON output embeds the scenario and its hash together with the
solver options, so a result file is enough to reproduce or verify a run.
Wall-clock fields live under ``timing`` or end in ``_ms``; everything else
is deterministic for a fixed seed.
"""

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from potgame import __version__, scenarios
from potgame.bench import run_benchmark
from potgame.exceptions import MissingMultipliersError, PotgameError, ScenarioError
from potgame.game import evaluate_trajectory
from potgame.mpc import run_mpc
from potgame.nash import certify
from potgame.potential import PotentialOCP
from potgame.solver import MultiplierState, SolveResult, solve

logger = logging.getLogger("potgame")

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2

SOLVE_FORMAT = "potgame.solve/1"
BENCH_FORMAT = "potgame.bench/1"
MPC_FORMAT = "potgame.mpc/1"
VERIFY_FORMAT = "potgame.verify/1"

TRAJECTORY_COLUMNS = ["k", "agent", "p", "q", "z", "theta", "min_pair_dist", "max_violation"]
HISTOGRAM_COLUMNS = ["bin_lo", "bin_hi", "count"]


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# serialization helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc):
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


def strip_timing(doc):
    """Copy of ``doc`` without ``timing`` blocks and ``*_ms`` fields."""
    if isinstance(doc, dict):
        return {k: strip_timing(v) for k, v in doc.items() if k != "timing" and not k.endswith("_ms")}
    if isinstance(doc, list):
        return [strip_timing(v) for v in doc]
    return doc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    """``key=value`` pairs split into solver, ``mpc.`` and ``bench.`` groups."""
    groups = {"solver": {}, "mpc": {}, "bench": {}}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InputError(f"--opts expects key=value, got {item!r}")
        group, dot, name = key.partition(".")
        if dot and group in ("mpc", "bench"):
            groups[group][name] = _parse_value(value)
        else:
            groups["solver"][key] = _parse_value(value)
    return groups


def _load_scenario(ref, args, overrides):
    scen = scenarios.load(ref)
    try:
        return scen.with_overrides(seed=args.seed, solver=overrides["solver"] or None)
    except ValueError as exc:
        raise ScenarioError(str(exc), location="solver") from None


def _multipliers_dict(m):
    return {
        "stage": m.stage,
        "stage_penalty": m.stage_penalty,
        "terminal": m.terminal,
        "terminal_penalty": m.terminal_penalty,
        "costates": m.costates,
    }


def _multipliers_from(d):
    try:
        arr = {k: np.asarray(d[k], dtype=float) for k in ("stage", "stage_penalty", "terminal", "terminal_penalty")}
        costates = d.get("costates")
    except (KeyError, TypeError, ValueError) as exc:
        raise MissingMultipliersError(f"malformed multipliers: {exc}") from None
    if costates is None:
        raise MissingMultipliersError("stored result has no costates")
    return MultiplierState(
        arr["stage"], arr["stage_penalty"], arr["terminal"], arr["terminal_penalty"],
        np.asarray(costates, dtype=float),
    )


# ---------------------------------------------------------------------------
# solve

def _diagnostics(spec, res):
    """Where and by how much the returned iterate violates the constraints."""
    cs = spec.constraints
    X, U = res.trajectory.states, res.trajectory.controls
    T = U.shape[0]
    rows = []
    if cs.num_stage_rows:
        viol = cs.violation(cs.stage_values(X[:-1], U, np.arange(T)), cs.stage_is_eq)
        labels = cs.stage_labels()
        for k, r in zip(*np.nonzero(viol > 0)):
            rows.append({"k": int(k), "constraint": labels[r], "violation": float(viol[k, r])})
    if cs.num_terminal_rows:
        viol = cs.violation(cs.terminal_values(X[-1], T), cs.terminal_is_eq)
        for r, lbl in enumerate(cs.terminal_labels()):
            if viol[r] > 0:
                rows.append({"k": T, "constraint": lbl, "violation": float(viol[r])})
    rows.sort(key=lambda r: (-r["violation"], r["k"], r["constraint"]))
    return {
        "status": res.status,
        "max_violation": res.max_violation,
        "violated_rows": len(rows),
        "worst": rows[:50],
        "step_violation": res.trajectory.violation,
        "history": res.history,
    }


def _solve_document(scen, spec, opts, res, cert, timing):
    traj = res.trajectory
    return {
        "format": SOLVE_FORMAT,
        "version": __version__,
        "scenario": scen.to_dict(),
        "scenario_hash": scen.hash(),
        "solver_options": opts.to_dict(),
        "agents": list(spec.names),
        "result": {
            "converged": res.converged,
            "status": res.status,
            "outer_iterations": res.outer_iterations,
            "inner_iterations": res.inner_iterations,
            "max_violation": res.max_violation,
            "objective": res.objective,
            "polished": res.polished,
            "polish_warning": res.polish_warning,
        },
        "timing": timing,
        "trajectory": {
            "states": traj.states,
            "controls": traj.controls,
            "step_violation": traj.violation,
            "cost_per_agent": traj.cost_per_agent,
            "potential_value": traj.potential_value,
        },
        "multipliers": _multipliers_dict(res.multipliers),
        "certificate": None if cert is None else cert.to_dict(),
        "history": res.history,
    }


def cmd_solve(args):
    groups = parse_overrides(args.opts)
    scen = _load_scenario(args.scenario, args, groups)
    spec = scen.build()
    opts = scen.solver_options()
    t0 = time.perf_counter()
    res = solve(PotentialOCP(spec), opts)
    timing = {"solve_ms": 1e3 * (time.perf_counter() - t0)}
    cert = None
    if res.converged:
        t0 = time.perf_counter()
        cert = certify(spec, res, opts)
        timing["certify_ms"] = 1e3 * (time.perf_counter() - t0)
    write_json(args.out, _solve_document(scen, spec, opts, res, cert, timing))
    if res.converged and cert.passed:
        logger.info("converged in %d outer iterations; certificate passed", res.outer_iterations)
        return EXIT_OK
    diag = _diagnostics(spec, res)
    if cert is not None:
        diag["certificate"] = cert.to_dict()
    diag_path = Path(str(args.out) + ".diagnostics.json")
    write_json(diag_path, diag)
    reason = "certificate failed" if res.converged else f"solver status {res.status}"
    logger.error("%s (max violation %.3e); diagnostics in %s", reason, res.max_violation, diag_path)
    return EXIT_FAILURE


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args):
    groups = parse_overrides(args.opts)
    if bool(args.config) == bool(args.scenario):
        raise InputError("bench needs exactly one of --config or --scenario")
    if args.config:
        config = scenarios.load_benchmark(args.config)
        scen = config.scenario.with_overrides(solver=groups["solver"] or None)
    else:
        scen = _load_scenario(args.scenario, args, groups)
    bench = dict(scen.data.get("benchmark", {}))
    if args.config:
        bench.update(config.to_dict() | {"heading_range": list(config.heading_range)})
        for k in ("scenario", "scenario_hash"):
            bench.pop(k)
    bench.update(groups["bench"])
    if args.trials is not None:
        bench["trials"] = args.trials
    if args.seed is not None:
        bench["seed"] = args.seed
    if args.certify:
        bench["certify"] = True
    data = scen.to_dict()
    data["benchmark"] = bench
    scen = scenarios.validate(data, scen.source)
    config = scenarios.BenchmarkConfig.from_scenario(scen)

    def progress(rec):
        logger.info("trial %d: %s in %.1f ms", rec["trial"], rec.get("status"), rec["solve_ms"])

    records, summary = run_benchmark(config, progress if args.verbose else None)
    doc = {
        "format": BENCH_FORMAT,
        "version": __version__,
        "scenario": scen.to_dict(),
        "scenario_hash": scen.hash(),
        "solver_options": scen.solver_options().to_dict(),
        "config": config.to_dict(),
        "summary": {k: v for k, v in summary.items() if k != "timing"},
        "timing": summary["timing"],
        "trials": records,
    }
    write_json(args.out, doc)
    logger.info("%d/%d trials converged", summary["converged"], summary["trials"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# mpc

def cmd_mpc(args):
    groups = parse_overrides(args.opts)
    scen = _load_scenario(args.scenario, args, groups)
    mpc_over = dict(groups["mpc"])
    if args.steps is not None:
        mpc_over["total_steps"] = args.steps
    if args.warm_start is not None:
        mpc_over["warm_start"] = args.warm_start
    if args.script:
        try:
            script = json.loads(Path(args.script).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read script {args.script}: {exc}") from None
        if not isinstance(script, dict):
            raise InputError("script file must map agent index to a control list")
        mpc_over["scripted"] = script
    if mpc_over:
        data = scen.to_dict()
        data["mpc"] = dict(data.get("mpc", {}), **mpc_over)
        scen = scenarios.validate(data, scen.source)
    config = scen.mpc_config()
    spec = scen.build()
    log = run_mpc(spec, config)
    body = log.to_dict()
    doc = {
        "format": MPC_FORMAT,
        "version": __version__,
        "scenario": scen.to_dict(),
        "scenario_hash": scen.hash(),
        "solver_options": config.solver.to_dict(),
        "mpc": config.to_dict(),
        "agents": list(spec.names),
        "step_size": config.step_size,
        **body,
        "timing": {"total_solve_ms": float(sum(r.solve_time_ms for r in log.records))},
    }
    write_json(args.out, doc)
    if log.failed:
        logger.error("receding-horizon run failed at step %s: %s", log.failure["step"], log.failure.get("message"))
        return EXIT_FAILURE
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify

def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc.msg} (line {exc.lineno}, column {exc.colno})") from None


def result_from_document(doc):
    """Rebuild ``(scenario, spec, opts, SolveResult)`` from a solve output."""
    if not isinstance(doc, dict) or doc.get("format") != SOLVE_FORMAT:
        raise InputError(f"expected a {SOLVE_FORMAT} document")
    try:
        scen = scenarios.validate(doc["scenario"])
        opts = scen.solver_options()
        spec = scen.build()
        traj = doc["trajectory"]
        X = np.asarray(traj["states"], dtype=float).reshape(-1, spec.n)
        U = np.asarray(traj["controls"], dtype=float).reshape(-1, spec.m)
        info = doc["result"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed solve output: {exc}") from None
    if U.shape[0] != spec.horizon or X.shape[0] != spec.horizon + 1:
        raise InputError("stored trajectory does not match the embedded scenario horizon")
    if "multipliers" not in doc or doc["multipliers"] is None:
        raise MissingMultipliersError("stored result carries no multipliers")
    mult = _multipliers_from(doc["multipliers"])
    res = SolveResult(
        trajectory=evaluate_trajectory(spec, X, U),
        states=X,
        controls=U,
        multipliers=mult,
        converged=bool(info.get("converged", False)),
        status=str(info.get("status", "")),
        outer_iterations=int(info.get("outer_iterations", 0)),
        inner_iterations=int(info.get("inner_iterations", 0)),
        max_violation=float(info.get("max_violation", np.nan)),
        objective=float(info.get("objective", np.nan)),
        solve_time_ms=0.0,
    )
    return scen, spec, opts, res


def cmd_verify(args):
    doc = _read_json(args.input)
    scen, spec, opts, res = result_from_document(doc)
    if doc.get("scenario_hash") not in (None, scen.hash()):
        raise InputError("scenario hash does not match the embedded scenario")
    t0 = time.perf_counter()
    cert = certify(spec, res, opts, best_responses=not args.no_best_response)
    out = {
        "format": VERIFY_FORMAT,
        "version": __version__,
        "source": Path(args.input).name,
        "scenario_hash": scen.hash(),
        "solver_options": opts.to_dict(),
        "certificate": cert.to_dict(),
        "timing": {"verify_ms": 1e3 * (time.perf_counter() - t0)},
    }
    if args.out:
        write_json(args.out, out)
    logger.info("certificate %s (max stationarity %.3e)", "passed" if cert.passed else "failed", cert.max_stationarity)
    return EXIT_OK if cert.passed else EXIT_FAILURE


# ---------------------------------------------------------------------------
# export

def _trajectory_rows(spec, X, U):
    dyn = spec.dynamics
    if X.shape[0] == 0:
        return []
    T = U.shape[0]
    pair = np.full(X.shape[0], np.nan)
    for i in range(spec.num_agents):
        for j in range(i + 1, spec.num_agents):
            pi, pj = dyn.models[i].position_indices, dyn.models[j].position_indices
            d = min(len(pi), len(pj))
            if d:
                a = X[:, dyn.state_slices[i].start + np.array(pi[:d])]
                b = X[:, dyn.state_slices[j].start + np.array(pj[:d])]
                pair = np.fmin(pair, np.linalg.norm(a - b, axis=1))
    viol = spec.step_violations(X, U) if X.shape[0] == T + 1 else np.zeros(X.shape[0])
    rows = []
    for k in range(X.shape[0]):
        for i, mdl in enumerate(dyn.models):
            xi = X[k, dyn.state_slices[i]]
            pos = [xi[p] for p in mdl.position_indices]
            pos += [None] * (3 - len(pos))
            theta = xi[mdl.heading_index] if mdl.heading_index is not None else None
            rows.append([k, spec.names[i], *pos, theta,
                         None if np.isnan(pair[k]) else pair[k], viol[k]])
    return rows


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def cmd_export(args):
    doc = _read_json(args.input)
    fmt = doc.get("format") if isinstance(doc, dict) else None
    try:
        if fmt == BENCH_FORMAT:
            hist = doc["timing"]["histogram"]
            edges, counts = hist["edges_ms"], hist["counts"]
            rows = [[edges[b], edges[b + 1], int(c)] for b, c in enumerate(counts)]
            _write_csv(args.out, HISTOGRAM_COLUMNS, rows)
            return EXIT_OK
        if fmt not in (SOLVE_FORMAT, MPC_FORMAT):
            raise InputError(f"unrecognized input format {fmt!r}")
        scen = scenarios.validate(doc["scenario"])
        spec = scen.build()
        if fmt == SOLVE_FORMAT:
            X, U = doc["trajectory"]["states"], doc["trajectory"]["controls"]
        else:
            X, U = doc["states"], doc["controls"]
        X = np.asarray(X, dtype=float).reshape(-1, spec.n)
        U = np.asarray(U, dtype=float).reshape(-1, spec.m)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed {fmt} document: {exc}") from None
    _write_csv(args.out, TRAJECTORY_COLUMNS, _trajectory_rows(spec, X, U))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    p = argparse.ArgumentParser(prog="potgame", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"potgame {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", help="scenario JSON path or shipped scenario name")
            sp.add_argument("--seed", type=int, help="override the scenario seed")
            sp.add_argument("--opts", nargs="*", default=[], metavar="KEY=VALUE",
                            help="solver option overrides; prefix mpc. or bench. for those blocks")
        sp.add_argument("--out", required=True, help="output path")

    s = sub.add_parser("solve", help="solve a scenario and certify the result")
    common(s)
    b = sub.add_parser("bench", help="randomized-initial-condition benchmark")
    common(b)
    b.add_argument("--config", help="benchmark config JSON")
    b.add_argument("--trials", type=int)
    b.add_argument("--certify", action="store_true", help="certify every converged trial")
    m = sub.add_parser("mpc", help="receding-horizon run")
    common(m)
    m.add_argument("--steps", type=int, help="total closed-loop steps")
    m.add_argument("--warm-start", choices=("shift", "zero"))
    m.add_argument("--script", help="JSON mapping agent index to a scripted control list")
    v = sub.add_parser("verify", help="certify a stored solve output")
    v.add_argument("--input", required=True)
    v.add_argument("--out")
    v.add_argument("--no-best-response", action="store_true", help="skip the best-response re-solves")
    e = sub.add_parser("export", help="flatten a solve, mpc or bench output to CSV")
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    return p


COMMANDS = {"solve": cmd_solve, "bench": cmd_bench, "mpc": cmd_mpc, "verify": cmd_verify, "export": cmd_export}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("solve", "mpc") and not args.scenario:
        print(f"potgame {args.command}: --scenario is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](args)
    except (InputError, ScenarioError, MissingMultipliersError) as exc:
        print(f"potgame {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PotgameError as exc:
        print(f"potgame {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
