"""Uncertainty sweep, scaling study and cross-module validation as tabular results."""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import lmi
from .graphs import UndirectedGraph, build_triangle, laplacian, spectrum
from .loss import (
    INDEPENDENT_BERNOULLI,
    SYMMETRIC_MARKOV,
    EdgeChain,
    LossModel,
    OracleIntractableError,
    conditional_moments,
    mode_bits,
    mode_laplacian,
    random_model,
)
from .loss import validate as validate_loss
from .montecarlo import SimConfig, estimate_h2
from .oracle import InconclusiveError, _modes, h2_deterministic, h2_exact, impulse_energy, ms_stable_exact
from .robust import RobustOptions, robust_h2, robust_stability
from .system import DecomposableSystem, assemble, consensus_basis

__all__ = [
    "INDEPENDENT",
    "SHARED_X",
    "SHARED_X_CAP",
    "SCALING_ROWS",
    "Check",
    "corner_models",
    "corner_max",
    "sweep",
    "scaling",
    "validate",
]

INDEPENDENT = "independent"
SHARED_X = "shared-x"
SHARED_X_CAP = 1024  # corners x modes above which the joint corner program is not built
SCALING_ROWS = (2, 3, 5, 9, 15, 25, 44, 77, 140)  # N = 3, 6, 15, 45, 120, 325, 990, 3003, 9870
FAILURES = (lmi.NUMERICAL_ERROR, lmi.ITERATION_LIMIT)


def corner_models(g: UndirectedGraph, rho_l: float):
    """All Bernoulli assignments with ``p = q = eta`` in ``{rho_l, 1}`` per edge."""
    values = sorted({float(rho_l), 1.0})
    for combo in itertools.product(values, repeat=g.edge_count):
        chains = tuple(EdgeChain(p, p, p) for p in combo)
        yield LossModel(g, chains, INDEPENDENT_BERNOULLI, (min(values), 1.0))


def _corner_h2(sys, g, model, consensus):
    ps = [c.p for c in model.chains]
    if all(p in (0.0, 1.0) for p in ps):
        # deterministic links: a single fixed mode
        mode = sum(1 << k for k, p in enumerate(ps) if p == 1.0)
        basis = consensus_basis(g.vertex_count) if consensus else None
        return h2_deterministic(assemble(sys, g, mode, basis))
    try:
        res = h2_exact(sys, g, model, consensus=consensus)
    except InconclusiveError:
        return math.inf  # spectral radius numerically at one
    return res.h2 if res.stable else math.inf


def _corner_independent(sys, g, rho_l, consensus):
    worst = 0.0
    for model in corner_models(g, rho_l):  # the all-rho_l corner comes first
        worst = max(worst, _corner_h2(sys, g, model, consensus))
        if math.isinf(worst):
            break
    return worst


def _corner_shared_x(sys, g, rho_l, consensus, settings):
    """Smallest ``gamma`` with ``tr Z_c < gamma^2`` for every corner and one set of ``X_i``."""
    models = list(corner_models(g, rho_l))
    chain0, full = _modes(sys, g, models[0], consensus, g.edge_count)
    modes = chain0.mode_count
    if modes * len(models) > SHARED_X_CAP:
        raise OracleIntractableError(
            f"shared-x corner program needs {modes * len(models)} mode/corner pairs (cap {SHARED_X_CAP})"
        )
    A, B, C, D = full.A, full.B, full.C, full.D
    n, nw = A.shape[1], B.shape[2]
    prog = lmi.LmiProgram()
    xs = [prog.add_variable(f"X{i}", n) for i in range(modes)]
    t = prog.add_variable("t", 1)
    eps = lmi.EPS_CHECK
    for i in range(modes):
        prog.add_constraint(f"X{i}>0", [lmi.Term(xs[i], np.eye(n))], sense=">>", margin=eps)
    for c, model in enumerate(models):
        chain, _ = _modes(sys, g, model, consensus, g.edge_count)
        mu = chain.mu
        # p = q = eta makes every row of the transition matrix equal to mu
        gram = [lmi.Term(xs[j], math.sqrt(mu[j]) * A[j]) for j in range(modes) if mu[j] > 0]
        ctc = sum(mu[j] * C[j].T @ C[j] for j in range(modes))
        for i in range(modes):
            prog.add_constraint(
                f"corner{c}:gramian{i}", gram + [lmi.Term(xs[i], np.eye(n), -1.0)], constant=ctc, margin=eps
            )
        z = prog.add_variable(f"Z{c}", nw)
        trace = [lmi.Term(xs[j], math.sqrt(mu[j]) * B[j]) for j in range(modes) if mu[j] > 0]
        dtd = sum(mu[j] * D[j].T @ D[j] for j in range(modes))
        prog.add_constraint(f"corner{c}:trace", trace + [lmi.Term(z, np.eye(nw), -1.0)], constant=dtd, margin=eps)
        eye = np.eye(nw)
        prog.add_constraint(
            f"corner{c}:tr<=t", [lmi.Term(z, eye[:, [k]]) for k in range(nw)] + [lmi.Term(t, np.eye(1), -1.0)]
        )
    prog.minimize({t: np.eye(1)})
    report = lmi.solve(prog, settings)
    if report.status == lmi.INFEASIBLE:
        return math.inf, report.status
    if not report.ok:
        return math.nan, report.status
    return math.sqrt(max(float(report.values[t][0, 0]), 0.0)), report.status


def corner_max(sys, g, rho_l, consensus=True, mode=INDEPENDENT, settings=None):
    """Comparison value for the sweep: ``(value, status)``."""
    if mode == INDEPENDENT:
        return _corner_independent(sys, g, rho_l, consensus), lmi.OPTIMAL
    if mode == SHARED_X:
        return _corner_shared_x(sys, g, rho_l, consensus, settings or lmi.SolverSettings())
    raise ValueError(f"unknown corner mode {mode!r}")


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # results keep the input order


@dataclass(frozen=True)
class _SweepPoint:
    sys: DecomposableSystem
    g: UndirectedGraph
    rho_l: float
    opts: RobustOptions
    corner_mode: str


def _sweep_point(pt: _SweepPoint) -> dict:
    cert = robust_h2(pt.sys, pt.g, (pt.rho_l, 1.0), pt.opts)
    status = cert.status
    try:
        corner, corner_status = corner_max(pt.sys, pt.g, pt.rho_l, pt.opts.consensus, pt.corner_mode, pt.opts.settings)
        if corner_status in FAILURES:
            status = f"{status};corner:{corner_status}"
    except OracleIntractableError:
        corner, status = math.nan, f"{status};corner:skipped"
    return {
        "rho_l": pt.rho_l,
        "N": pt.g.vertex_count,
        "gamma_robust": cert.gamma,
        "h2_corner_max": corner,
        "solver_status": status,
    }


def sweep(sys, graphs, grid, opts: RobustOptions, corner_mode=INDEPENDENT, jobs=1) -> list[dict]:
    """Robust bound and corner comparison over ``rho_l`` for each graph (``rho_u = 1``)."""
    points = [_SweepPoint(sys, g, float(r), opts, corner_mode) for g in graphs for r in grid]
    return _map(_sweep_point, points, jobs)


def scaling(sys, rows, box, opts: RobustOptions, repeats=1) -> list[dict]:
    """Robust H2 analysis on triangular lattices; wall time covers the spectrum and the LMI solve."""
    out = []
    for r in rows:
        g = build_triangle(r)
        times = []
        for _ in range(max(1, repeats)):
            start = time.perf_counter()
            cert = robust_h2(sys, spectrum(laplacian(g), dedup_tol=opts.dedup_tol), box, opts)
            times.append(time.perf_counter() - start)
        out.append(
            {
                "N": g.vertex_count,
                "edge_count": g.edge_count,
                "gamma_robust": cert.gamma,
                "wall_time_s": float(np.mean(times)),
                "lmi_block_count": cert.lmi_block_count,
                "solver_status": cert.status,
            }
        )
    return out


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""


def _moment_error(model: LossModel) -> float:
    """Largest deviation of the analytic conditional moments from mode enumeration."""
    g = model.graph
    e = g.edge_count
    laps = np.array([mode_laplacian(g, m) for m in range(2**e)], dtype=float)
    worst = 0.0
    for prev in range(2**e):
        pb = mode_bits(prev, e)
        probs = np.ones(2**e)
        for m in range(2**e):
            for b, (c, bit) in enumerate(zip(model.chains, mode_bits(m, e))):
                a = c.p if pb[b] else c.q
                probs[m] *= a if bit else 1.0 - a
        mean = np.tensordot(probs, laps, axes=1)
        second = np.tensordot(probs, np.einsum("mki,mkj->mij", laps, laps), axes=1)
        var = np.tensordot(probs, (laps - mean) ** 2, axes=1)
        mom = conditional_moments(model, prev)
        off = ~np.eye(g.vertex_count, dtype=bool)
        diag = np.diag(np.diag(mom.variance))
        worst = max(
            worst,
            float(np.max(np.abs(mom.expectation - mean))),
            float(np.max(np.abs(mom.expected_product - second))),
            float(np.max(np.abs(-mom.variance[off] - var[off]))),
            float(np.max(np.abs(diag - np.diag(np.diag(var))))),
        )
    return worst


def validate(
    sys, g, model, box, opts: RobustOptions, seed=0, trials=20_000, samples=10, dump_traces=None
) -> list[Check]:
    """Cross-module property checks on one instance; deterministic for a fixed seed."""
    checks = []
    issues = validate_loss(model)
    checks.append(Check("loss-model", not issues, float(len(issues)), 0.0, "; ".join(issues)))
    rng = np.random.default_rng(seed)

    if g.edge_count <= 6:
        err = max(
            _moment_error(random_model(g, (0.0, 1.0), corr, rng))
            for corr in (SYMMETRIC_MARKOV, INDEPENDENT_BERNOULLI)
            for _ in range(2)
        )
        checks.append(Check("laplacian-moments", err <= 1e-12, err, 1e-12, "analytic vs enumeration"))

    consensus = opts.consensus
    exact = h2_exact(sys, g, model, consensus=consensus)
    if exact.stable:
        energy, tail = impulse_energy(sys, g, model, 200, consensus=consensus)
        err = abs(energy + tail - exact.h2**2) / max(exact.h2**2, 1.0)
        checks.append(Check("impulse-energy", err <= 1e-9, err, 1e-9, "truncated energy + remainder vs h2^2"))
        mc = estimate_h2(sys, g, model, SimConfig(trials=trials, seed=seed, consensus=consensus, dump_traces=dump_traces))
        dev = abs(mc.estimate - exact.h2)
        tol = 2.0 * mc.ci95
        checks.append(Check("oracle-vs-montecarlo", dev <= tol, dev, tol, f"h2={exact.h2:.9g} mc={mc.estimate:.9g}"))
    else:
        checks.append(Check("oracle-stable", False, exact.iterations, 0.0, "instance is not mean-square stable"))

    cert = robust_h2(sys, g, box, opts)
    feasible, _ = robust_stability(sys, g, box, opts)
    worst, bad = -math.inf, []
    for k in range(samples):
        corr = SYMMETRIC_MARKOV if k % 2 == 0 else INDEPENDENT_BERNOULLI
        m = random_model(g, box, corr, rng)
        stable = ms_stable_exact(sys, g, m, consensus=consensus).stable
        if feasible and not stable:
            bad.append(f"sample {k} unstable")
        if cert.feasible:
            h2 = h2_exact(sys, g, m, consensus=consensus, check_stability=False).h2 if stable else math.inf
            excess = h2 - (cert.gamma * (1 + 1e-6) + 1e-6)
            worst = max(worst, excess)
            if excess > 0:
                bad.append(f"sample {k} exceeds the bound")
    measured = worst if cert.feasible else math.nan
    detail = f"gamma={cert.gamma:.9g} status={cert.status}"
    checks.append(Check("robust-soundness", not bad, measured, 0.0, "; ".join(bad) or detail))
    return checks

