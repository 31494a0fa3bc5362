"""Randomized-initial-condition benchmark over a base scenario."""

import logging
import time

import numpy as np

from potgame.exceptions import PotgameError
from potgame.nash import certify
from potgame.potential import PotentialOCP

logger = logging.getLogger(__name__)


def _pair_min_distance(spec, X):
    dyn = spec.dynamics
    best = np.inf
    for i in range(spec.num_agents):
        for j in range(i + 1, spec.num_agents):
            pi, pj = dyn.models[i].position_indices, dyn.models[j].position_indices
            d = min(len(pi), len(pj))
            if d:
                a = X[:, dyn.state_slices[i].start + np.array(pi[:d])]
                b = X[:, dyn.state_slices[j].start + np.array(pj[:d])]
                best = min(best, float(np.linalg.norm(a - b, axis=1).min()))
    return best if np.isfinite(best) else None


def run_trial(config, t, spec=None, opts=None):
    """Solve one randomized trial; failures are recorded instead of raised."""
    from potgame.solver import solve

    spec = spec or config.scenario.build()
    opts = opts or config.scenario.solver_options()
    x0 = config.initial_state(t, spec)
    trial = spec.with_initial_state(x0)
    rec = {"trial": t, "seed": config.trial_seed(t), "initial_state": x0.tolist()}
    start = time.perf_counter()
    try:
        res = solve(PotentialOCP(trial), opts)
    except (PotgameError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        rec["solve_ms"] = 1e3 * (time.perf_counter() - start)
        rec.update(converged=False, status="error", error=f"{type(exc).__name__}: {exc}")
        logger.warning("trial %d failed: %s", t, exc)
        return rec, None
    rec["solve_ms"] = 1e3 * (time.perf_counter() - start)
    rec.update(
        converged=bool(res.converged),
        status=res.status,
        max_violation=float(res.max_violation),
        outer_iterations=int(res.outer_iterations),
        inner_iterations=int(res.inner_iterations),
        objective=float(res.objective),
        min_pair_distance=_pair_min_distance(trial, res.trajectory.states),
    )
    if config.certify and res.converged:
        cert = certify(trial, res, opts)
        rec["certificate"] = {
            "max_kkt_residual": cert.max_stationarity,
            "best_response_gaps": [None if not np.isfinite(g) else float(g) for g in cert.best_response_gaps],
            "gap_bounds": cert.gap_bounds().tolist(),
            "passed": cert.passed,
        }
    return rec, res


def summarize(records, bins):
    """Aggregate timing statistics and a histogram whose counts sum to the trial count."""
    ms = np.array([r["solve_ms"] for r in records], dtype=float)
    conv = np.array([r.get("converged", False) for r in records], dtype=bool)
    counts, edges = np.histogram(ms, bins=bins)
    return {
        "trials": len(records),
        "converged": int(conv.sum()),
        "convergence_rate": float(conv.mean()) if len(records) else 0.0,
        "timing": {
            "mean_ms": float(ms.mean()),
            "std_ms": float(ms.std()),
            "median_ms": float(np.median(ms)),
            "histogram": {"edges_ms": edges.tolist(), "counts": counts.astype(int).tolist()},
        },
    }


def run_benchmark(config, progress=None):
    """Run every trial of ``config`` sequentially.

    Returns ``(records, summary)``; each record holds the trial seed, the
    sampled initial state, convergence status, solve time in milliseconds,
    max violation and iteration counts.
    """
    spec = config.scenario.build()
    opts = config.scenario.solver_options()
    records = []
    for t in range(config.trials):
        rec, _ = run_trial(config, t, spec, opts)
        records.append(rec)
        if progress is not None:
            progress(rec)
    return records, summarize(records, config.bins)
