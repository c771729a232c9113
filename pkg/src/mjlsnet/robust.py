"""Robust stability and H2 bounds over a box of link transition probabilities.

The per-link uncertainty ``Delta = [[a, 0], [b, 0], [0, a]]`` with
``a^2 in [rho_l, rho_u]`` and ``b^2 = 1 - a^2`` enters an LFT and is handled by
a full-block multiplier ``P = [[Q, S], [S^T, R]]``. The multiplier inclusion is
enforced on the vertices of a polygon covering the (a, b) arc together with
``Q << 0``, which makes the quadratic form concave in Delta. After a modal
decomposition of the nominal Laplacian one LMI per distinct non-zero
eigenvalue remains, with ``Y`` and ``P`` shared across all of them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import ConvexHull

from . import lmi
from .graphs import SpectralData, UndirectedGraph, laplacian, spectrum
from .system import DecomposableSystem

log = logging.getLogger(__name__)

__all__ = [
    "UncertaintyBox",
    "DeltaVertexSet",
    "RobustOptions",
    "RobustCertificate",
    "BisectionError",
    "delta_vertices",
    "delta_matrix",
    "multiplier_feasibility_constraints",
    "multiplier_arc_margin",
    "robust_stability",
    "robust_h2",
    "robust_h2_feasible",
    "bisection_gamma",
    "certificate_report",
]

VERTEX = "vertex"
GRID = "grid"


@dataclass(frozen=True)
class UncertaintyBox:
    rho_l: float
    rho_u: float

    def __post_init__(self):
        object.__setattr__(self, "rho_l", float(self.rho_l))
        object.__setattr__(self, "rho_u", float(self.rho_u))
        if not 0.0 <= self.rho_l <= self.rho_u <= 1.0:
            raise ValueError(f"need 0 <= rho_l <= rho_u <= 1, got ({self.rho_l}, {self.rho_u})")

    @classmethod
    def of(cls, box) -> "UncertaintyBox":
        return box if isinstance(box, cls) else cls(*box)

    def angles(self) -> tuple[float, float]:
        """Arc angles ``phi`` with ``(a, b) = (cos phi, sin phi)``, increasing."""
        return math.acos(math.sqrt(self.rho_u)), math.acos(math.sqrt(self.rho_l))


@dataclass(frozen=True)
class DeltaVertexSet:
    """Points ``(a, b)`` whose convex hull contains the uncertainty arc."""

    points: np.ndarray  # (n, 2)
    box: UncertaintyBox
    K: int
    method: str = VERTEX

    @property
    def vertices(self) -> list[np.ndarray]:
        return [delta_matrix(a, b) for a, b in self.points]

    @property
    def certifying(self) -> bool:
        return self.method == VERTEX

    def arc_samples(self, count: int = 1000) -> np.ndarray:
        lo, hi = self.box.angles()
        phi = np.linspace(lo, hi, count)
        return np.column_stack([np.cos(phi), np.sin(phi)])

    def covers_arc(self, samples: int = 1000, tol: float = 1e-12) -> bool:
        """Hull-membership test for ``samples`` points along the arc."""
        arc = self.arc_samples(samples)
        pts = self.points
        if len(pts) == 1:
            return bool(np.all(np.abs(arc - pts[0]) <= 1e-12))
        if len(pts) == 2:
            # segment hull: arc must collapse onto it
            d = pts[1] - pts[0]
            t = np.clip((arc - pts[0]) @ d / (d @ d), 0.0, 1.0)
            return bool(np.all(np.linalg.norm(pts[0] + t[:, None] * d - arc, axis=1) <= tol))
        hull = ConvexHull(pts)
        return bool(np.all(arc @ hull.equations[:, :2].T + hull.equations[:, 2] <= tol))

    @property
    def coverage_certificate(self) -> dict:
        lo, hi = self.box.angles()
        step = 0.5 * math.pi / (self.K - 1)
        return {
            "method": self.method,
            "K": self.K,
            "angular_step": step,
            "inflation": 1.0 / math.cos(0.5 * step),
            "arc_angles": [lo, hi],
            "vertex_count": len(self.points),
            "hull_covers_arc": self.covers_arc(),
        }


def delta_matrix(a: float, b: float) -> np.ndarray:
    return np.array([[a, 0.0], [b, 0.0], [0.0, a]])


def delta_vertices(box, K: int = 17, method: str = VERTEX) -> DeltaVertexSet:
    """Polygon vertices whose hull contains the arc ``{(cos phi, sin phi)}`` of the box.

    Tangent lines are drawn at the two arc endpoints and at every point of a
    fixed angular grid on ``[0, pi/2]`` (step ``pi/2/(K-1)``) that falls
    strictly inside the arc. The vertices are the two endpoints and the
    intersections of consecutive tangents, which sit at radius
    ``1/cos(delta/2)`` on the bisecting angle. Because the grid does not depend
    on the box, a sub-box yields a polygon contained in the larger one.

    ``method="grid"`` instead returns K exact arc points; that relaxation is
    not certifying.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    box = UncertaintyBox.of(box)
    lo, hi = box.angles()
    if hi - lo <= 1e-15:
        pts = np.array([[math.sqrt(box.rho_l), math.sqrt(1.0 - box.rho_l)]])
        return DeltaVertexSet(pts, box, K, method)
    if method == GRID:
        phi = np.linspace(lo, hi, K)
        return DeltaVertexSet(np.column_stack([np.cos(phi), np.sin(phi)]), box, K, GRID)
    if method != VERTEX:
        raise ValueError(f"unknown relaxation {method!r}")
    grid = np.arange(K) * (0.5 * math.pi / (K - 1))
    eps = 1e-12
    tangent = np.concatenate([[lo], grid[(grid > lo + eps) & (grid < hi - eps)], [hi]])
    mids = 0.5 * (tangent[:-1] + tangent[1:])
    radii = 1.0 / np.cos(0.5 * np.diff(tangent))
    corners = np.column_stack([radii * np.cos(mids), radii * np.sin(mids)])
    pts = np.vstack([[math.cos(lo), math.sin(lo)], corners, [math.cos(hi), math.sin(hi)]])
    return DeltaVertexSet(np.maximum(pts, 0.0), box, K, VERTEX)


def _vertex_factor(a, b, alpha):
    return np.vstack([np.kron(delta_matrix(a, b), np.eye(alpha)), np.eye(2 * alpha)])


def _strict_margin(eps, *factors):
    scale = max(1.0, float(np.linalg.norm(np.vstack(factors), 2)) ** 2)
    return eps * scale


def multiplier_feasibility_constraints(
    prog: lmi.LmiProgram, var: str, vertices: DeltaVertexSet, alpha: int, eps_lmi: float = 1e-7
) -> list[str]:
    """Add the multiplier-set constraints on the 5*alpha square variable ``var``.

    Emits one strict positivity constraint per vertex and, for the certifying
    relaxation, the concavity constraint ``Q << 0`` (also kept strict so that
    a rescaled certificate stays concave). Returns the names.
    """
    names = []
    for k, (a, b) in enumerate(vertices.points):
        f = _vertex_factor(a, b, alpha)
        name = f"{var}:vertex{k}"
        prog.add_constraint(name, [lmi.Term(var, f)], sense=">>", margin=_strict_margin(eps_lmi, f))
        names.append(name)
    if vertices.certifying:
        sel = np.vstack([np.eye(3 * alpha), np.zeros((2 * alpha, 3 * alpha))])
        prog.add_constraint(f"{var}:Q", [lmi.Term(var, sel)], sense="<<", margin=eps_lmi)
        names.append(f"{var}:Q")
    return names


def multiplier_arc_margin(P: np.ndarray, box, alpha: int, samples: int = 1000) -> float:
    """Smallest eigenvalue of the multiplier quadratic form along the exact arc."""
    box = UncertaintyBox.of(box)
    lo, hi = box.angles()
    worst = math.inf
    for phi in np.linspace(lo, hi, samples):
        f = _vertex_factor(math.cos(phi), math.sin(phi), alpha)
        worst = min(worst, float(np.linalg.eigvalsh(f.T @ P @ f)[0]))
    return worst


@dataclass
class RobustOptions:
    """Settings shared by the robust tests.

    ``multiplier_penalty`` adds ``penalty * t`` with ``-t I << P << t I`` to the
    objective for every multiplier. The underlying S-procedure infimum is
    typically approached only as ``P`` grows without bound, so this keeps the
    program well posed; the reported bound includes the penalty and is
    therefore still a valid bound. ``normalize`` rescales outputs and the
    uncertainty channel before solving (the certificate is reported and
    re-verified in the original coordinates).
    """

    vertices: int = 17
    consensus: bool = False
    eps_lmi: float = 1e-7
    relaxation: str = VERTEX
    dedup_tol: float = 1e-9
    multiplier_penalty: float = 1e-5
    normalize: bool = True
    settings: lmi.SolverSettings = field(default_factory=lmi.SolverSettings)


@dataclass
class RobustCertificate:
    """Solution of a robust test in the original coordinates.

    ``margins`` holds, per constraint, the smallest eigenvalue of the strict
    form (``-M`` for ``M << 0``, ``M`` for ``M >> 0``) recomputed at the
    reported matrices; all must be positive for a certificate.
    """

    status: str
    gamma: float
    Y: np.ndarray | None
    P1: np.ndarray | None
    P2: np.ndarray | None
    Z_blocks: list[np.ndarray]
    eigenvalues_used: list[tuple[float, int]]
    solver_stats: dict
    lmi_block_count: int
    margins: dict[str, float]
    metadata: dict

    @property
    def feasible(self) -> bool:
        return self.status in (lmi.OPTIMAL, lmi.FEASIBLE)

    @property
    def P(self) -> np.ndarray | None:
        """The stability multiplier (alias of ``P1``)."""
        return self.P1


class BisectionError(RuntimeError):
    def __init__(self, message, bracket):
        super().__init__(f"{message}; bracket={bracket}")
        self.bracket = bracket


@dataclass(frozen=True)
class _Scaling:
    sigma: float = 1.0  # output energy scale, Y = sigma * Y'
    c1: float = 1.0  # uncertainty channel scale of the first multiplier
    c2: float = 1.0


STABILITY = "stability"
H2 = "h2"


def _spectral(spec, dedup_tol) -> SpectralData:
    if isinstance(spec, SpectralData):
        return spec
    if isinstance(spec, UndirectedGraph):
        return spectrum(laplacian(spec), dedup_tol=dedup_tol)
    return spectrum(np.asarray(spec), dedup_tol=dedup_tol)


def _modal_groups(spec: SpectralData, consensus: bool):
    """Return (zero multiplicity to enforce nominally, [(lambda, multiplicity)] non-zero)."""
    zeros = spec.zero_count
    if consensus:
        if zeros < 1:
            raise ValueError("consensus deflation requires a zero Laplacian eigenvalue")
        zeros -= 1
    return zeros, list(spec.nonzero_groups)


def _selectors(alpha):
    eye = np.eye(3 * alpha)
    return [eye[j * alpha : (j + 1) * alpha] for j in range(3)]


def _schur(A) -> bool:
    return bool(np.max(np.abs(np.linalg.eigvals(A))) < 1.0) if A.size else True


def _channel(lam_max, coupling):
    c = math.sqrt(lam_max) * float(np.linalg.norm(coupling, 2))
    return c if c > 0 else 1.0


def _couplings(sys, kind):
    """Multiplier name -> coupling block that feeds its uncertainty channel."""
    if kind == STABILITY:
        return {"P": sys.Ac}
    return {"P1": np.vstack([sys.Ac, sys.Cc]), "P2": np.vstack([sys.Bc, sys.Dc])}


def _scaling(sys, zeros, groups, opts, kind) -> _Scaling:
    """Box-independent normalization from the mean modal systems at ``a^2 = 1/2``."""
    if not opts.normalize:
        return _Scaling()
    lam_max = max((lam for lam, _ in groups), default=0.0)
    cs = [_channel(lam_max, c) for c in _couplings(sys, kind).values()]
    if kind == STABILITY:
        return _Scaling(1.0, cs[0])
    lams = ([0.0] if zeros else []) + [lam for lam, _ in groups]
    sigma = 0.0
    for a2 in (0.5, 1.0, 0.0):
        A = [sys.Ad + lam * (sys.Ap + a2 * sys.Ac) for lam in lams]
        if all(_schur(a) for a in A):
            for lam, a in zip(lams, A):
                C = sys.Cd + lam * (sys.Cp + a2 * sys.Cc)
                wo = scipy.linalg.solve_discrete_lyapunov(a.T, C.T @ C)
                sigma = max(sigma, float(np.linalg.norm(wo, 2)))
            break
    if not math.isfinite(sigma) or sigma <= 0.0:
        sigma = 1.0
    return _Scaling(sigma, cs[0], cs[1])


def _stats(report: lmi.SolveReport) -> dict:
    return {
        "status": report.status,
        "solver_status": report.solver_status,
        "iterations": report.iterations,
        "solve_time": report.solve_time,
        "min_margin": min(report.margins.values(), default=None),
    }


def _bound_multiplier(prog, var):
    """Add a scalar ``t`` with ``-t I << var << t I``; returns its name."""
    n = prog.variables[var]
    t = prog.add_variable(f"{var}:norm", 1)
    eye = np.eye(n)
    rows = [lmi.Term(t, eye[[k]]) for k in range(n)]
    prog.add_constraint(f"{var}:upper", [lmi.Term(var, eye)] + [lmi.Term(r.var, r.factor, -1.0) for r in rows])
    prog.add_constraint(f"{var}:lower", [lmi.Term(var, eye)] + rows, sense=">>")
    return t


def _modal_lmi(prog, name, lead_var, nominal_x, nominal_z, lam, coupling, mult, c, sigma, eps):
    """One modal LMI in normalized coordinates.

    The columns are the leading signal (state or input) followed, if ``mult``
    is given, by the 3*alpha uncertainty channel. Rows: leading block with
    ``-lead_var``; the nominal state map with ``Y``; the nominal output map
    with ``I``; the variance rows with ``2Y`` / ``2I``; and the multiplier rows.
    """
    n = nominal_x.shape[1]
    nx, nz = nominal_x.shape[0], nominal_z.shape[0]
    root = math.sqrt(sigma)
    if mult is None:
        rows = [np.eye(n), nominal_x, nominal_z / root]
        terms = [lmi.Term(lead_var, rows[0], -1.0), lmi.Term("Y", rows[1])]
        constant = rows[2].T @ rows[2]
    else:
        alpha = nx + nz
        B1, B2, B3 = _selectors(alpha)
        s = math.sqrt(lam)
        zero = np.zeros((3 * alpha, n))
        lead = np.hstack([np.eye(n), zero.T[:n]])
        rx = np.hstack([nominal_x, c * s * B1[:nx]])
        rz = np.hstack([nominal_z, c * s * B1[nx:]]) / root
        vx = np.hstack([np.zeros((nx, n)), c * B2[:nx]])
        vz = np.hstack([np.zeros((nz, n)), c * B2[nx:]]) / root
        pf = np.vstack(
            [
                np.hstack([zero, np.eye(3 * alpha)]),
                np.hstack([np.zeros((alpha, n)), B3]),
                np.hstack([s / c * coupling, np.zeros((alpha, 3 * alpha))]),
            ]
        )
        rows = [lead, rx, rz, vx, vz, pf]
        terms = [
            lmi.Term(lead_var, lead, -1.0),
            lmi.Term("Y", rx),
            lmi.Term("Y", vx, 2.0),
            lmi.Term(mult, pf),
        ]
        constant = rz.T @ rz + 2.0 * vz.T @ vz
    prog.add_constraint(name, terms, constant=constant, margin=_strict_margin(eps, *rows))


def _build(sys, zeros, groups, verts, opts, sc: _Scaling, kind, gamma=None, penalty=True, reduce=True):
    """Assemble the robust program.

    With ``reduce`` a multiplier whose coupling block is identically zero is
    dropped together with its uncertainty columns (its channel never carries a
    signal); :func:`_lossless_multiplier` supplies it afterwards.

    Returns ``(program, strict names, [(Z name, lambda, multiplicity)], active multipliers)``.
    """
    nx, nw, nz = sys.dims
    couplings = _couplings(sys, kind)
    active = [v for v, c in couplings.items() if not reduce or np.any(c)]
    scale = {v: c for v, c in zip(couplings, (sc.c1, sc.c2))}
    eps = opts.eps_lmi
    sigma = sc.sigma if kind == H2 else 1.0
    prog = lmi.LmiProgram()
    prog.add_variable("Y", nx)
    for v in active:
        prog.add_variable(v, 5 * (nx if kind == STABILITY else nx + nz))
    prog.add_constraint("Y>0", [lmi.Term("Y", np.eye(nx))], sense=">>", margin=eps)
    z_names = []
    if kind == STABILITY:
        empty = np.zeros((0, nx))
        if zeros:
            _modal_lmi(prog, "nominal", "Y", sys.Ad, empty, 0.0, None, None, 1.0, 1.0, eps)
        m = "P" if "P" in active else None
        for k, (lam, _) in enumerate(groups):
            _modal_lmi(
                prog, f"modal{k}", "Y", sys.Ad + lam * sys.Ap, empty, lam, sys.Ac, m, scale["P"], 1.0, eps
            )
    else:
        m1 = "P1" if "P1" in active else None
        m2 = "P2" if "P2" in active else None
        if zeros:
            prog.add_variable("Z0", nw)
            z_names.append(("Z0", 0.0, zeros))
            _modal_lmi(prog, "nominal:gramian", "Y", sys.Ad, sys.Cd, 0.0, None, None, 1.0, sigma, eps)
            _modal_lmi(prog, "nominal:trace", "Z0", sys.Bd, sys.Dd, 0.0, None, None, 1.0, sigma, eps)
        for k, (lam, mult) in enumerate(groups):
            zname = prog.add_variable(f"Z{k + 1}", nw)
            z_names.append((zname, lam, mult))
            _modal_lmi(
                prog,
                f"modal{k}:gramian",
                "Y",
                sys.Ad + lam * sys.Ap,
                sys.Cd + lam * sys.Cp,
                lam,
                couplings["P1"],
                m1,
                sc.c1,
                sigma,
                eps,
            )
            _modal_lmi(
                prog,
                f"modal{k}:trace",
                zname,
                sys.Bd + lam * sys.Bp,
                sys.Dd + lam * sys.Dp,
                lam,
                couplings["P2"],
                m2,
                sc.c2,
                sigma,
                eps,
            )
    alpha = nx if kind == STABILITY else nx + nz
    for v in active:
        boost = max(1.0, scale[v] ** 2 / sigma)
        multiplier_feasibility_constraints(prog, v, verts, alpha, eps * boost)
    strict = {c.name for c in prog.constraints}
    weights = {zn: mult * np.eye(nw) for zn, _, mult in z_names}
    if penalty:
        w = opts.multiplier_penalty if kind == H2 else 1.0
        if w > 0:
            for v in active:
                weights[_bound_multiplier(prog, v)] = w * np.ones((1, 1))
    if gamma is None:
        if weights:
            prog.minimize(weights)
    else:
        terms = [
            lmi.Term(name, math.sqrt(w[i, i]) * np.eye(w.shape[0])[:, [i]])
            for name, w in weights.items()
            for i in range(w.shape[0])
        ]
        if terms:
            prog.add_constraint("objective<=gamma^2", terms, constant=[[-(gamma**2) / sigma]])
    return prog, strict, z_names, active


def _lossless_multiplier(verts: DeltaVertexSet, alpha: int) -> np.ndarray:
    """A multiplier that is negative definite on the channel input when its output is zero.

    ``Q = diag(-I, -I, -q I)``, ``S = 0``, ``R = diag(rho I, r I)`` with
    ``max(a^2 + b^2) < rho < q`` and ``r > q max(a^2)`` is in the relaxed
    multiplier set; scaled up it certifies an LMI whose coupling block is zero.
    """
    pts = verts.points
    r2 = float(np.max(np.sum(pts**2, axis=1)))
    a2 = float(np.max(pts[:, 0] ** 2))
    rho, q = 1.5 * r2, 2.0 * r2
    diag = np.concatenate(
        [-np.ones(2 * alpha), -q * np.ones(alpha), rho * np.ones(alpha), (2.0 * q * a2 + 1.0) * np.ones(alpha)]
    )
    return np.diag(diag)


def _certify(prog_paper, values, strict, eps_check):
    """Unshifted margins at ``values``; (ok, margins).

    Multiplier-set constraints must keep their full margin so that the
    reported multiplier is interior; the modal LMIs need only be strict.
    """
    shifted = lmi.verify(prog_paper, values)
    margins = {}
    ok = True
    for con in prog_paper.constraints:
        m = shifted[con.name] + con.margin
        margins[con.name] = m
        if con.name.startswith(("P:", "P1:", "P2:")) and shifted[con.name] < 0.0:
            ok = False
        elif con.name in strict and m <= 0.0:
            ok = False
        elif m < -eps_check:
            ok = False
    return ok, margins


@dataclass
class _Outcome:
    status: str
    report: lmi.SolveReport | None
    values: dict  # original coordinates
    margins: dict
    scaling: _Scaling
    z_names: list
    verts: DeltaVertexSet
    objective: float | None = None  # penalized objective in original units
    centered: float | None = None  # backoff of the re-centering solve, if one was needed


BACKOFFS = (1e-3, 1e-2, 1e-1, 1.0)  # relative objective slack tried in turn when re-centering


def _add_slack(prog, strict):
    """Maximize a common slack ``s <= 1`` on every strict constraint."""
    s = prog.add_variable("slack", 1)
    for con in prog.constraints:
        if con.name in strict:
            sign = 1.0 if con.sense == "<<" else -1.0
            eye = np.eye(con.size)
            con.terms.extend(lmi.Term(s, eye[[k]], sign) for k in range(con.size))
    prog.add_constraint("slack<=1", [lmi.Term(s, np.eye(1))], constant=-np.eye(1))
    prog.objective.clear()
    prog.minimize({s: -np.eye(1)})


def _run(sys, zeros, groups, box, opts, kind, gamma=None) -> _Outcome:
    """Solve in normalized coordinates and re-certify in the original ones.

    If the re-check fails the program is solved again with the objective
    capped at ``(1 + backoff)`` times its optimum while a common slack on all
    strict constraints is maximized, for each backoff in ``BACKOFFS`` until a
    point passes (the stability test has no meaningful objective and is
    re-centered uncapped). The centered point absorbs solver inaccuracy at the
    price of a larger bound; ``centered`` records the backoff used.
    """
    verts = delta_vertices(box, opts.vertices, opts.relaxation)
    sc = _scaling(sys, zeros, groups, opts, kind)
    sigma = sc.sigma if kind == H2 else 1.0
    prog, strict, z_names, active = _build(sys, zeros, groups, verts, opts, sc, kind, gamma=gamma)
    report = lmi.solve(prog, opts.settings)
    log.info("robust %s solve: %s (%s) in %d iterations", kind, report.status, report.solver_status, report.iterations)
    if not (report.ok or report.downgraded):
        return _Outcome(report.status, report, {}, {}, sc, z_names, verts)
    paper, paper_strict, _, _ = _build(sys, zeros, groups, verts, opts, _Scaling(), kind, penalty=False, reduce=False)
    ok, values, margins = _certified(sys, groups, verts, kind, sc, active, z_names, report.values, paper, paper_strict, opts)
    ok = ok and report.ok  # a downgraded point always goes through re-centering
    objective = sigma * prog.objective_value(report.values) if prog.objective else None
    centered = None
    optimum = objective
    # the stability objective is only a regularizer, so it is left uncapped
    backoffs = BACKOFFS if kind == H2 and gamma is None else (math.inf,)
    for backoff in backoffs if not ok else ():
        cap = gamma
        if cap is None and kind == H2 and optimum is not None:
            cap = math.sqrt(max(optimum, 0.0) * (1.0 + backoff))
        prog2, strict2, _, _ = _build(sys, zeros, groups, verts, opts, sc, kind, gamma=cap)
        _add_slack(prog2, strict2)
        second = lmi.solve(prog2, opts.settings)
        slack = float(second.values["slack"][0, 0]) if "slack" in second.values else math.nan
        log.info("re-centering (backoff %g): %s (%s), slack %.3g", backoff, second.status, second.solver_status,
                 slack)
        if second.ok or second.downgraded:  # the re-check below is the deciding test
            ok, values, margins = _certified(
                sys, groups, verts, kind, sc, active, z_names, second.values, paper, paper_strict, opts
            )
            if prog.objective:
                objective = sigma * prog.objective_value(second.values)
            report = second
            centered = backoff
        if ok:
            break
    if not ok:
        bad = min(margins, key=margins.get)
        log.warning("certificate re-check failed: %s has margin %.3g", bad, margins[bad])
    status = (report.status if report.ok else lmi.FEASIBLE) if ok else lmi.NUMERICAL_ERROR
    return _Outcome(status, report, values, margins, sc, z_names, verts, objective, centered)


def _certified(sys, groups, verts, kind, sc, active, z_names, v, paper, strict, opts):
    """Map a normalized solution back, complete dropped multipliers and re-check it."""
    sigma = sc.sigma if kind == H2 else 1.0
    values = {"Y": sigma * v["Y"], **{zn: sigma * v[zn] for zn, _, _ in z_names}}
    scale = dict(zip(_couplings(sys, kind), (sc.c1, sc.c2)))
    for m in active:
        values[m] = sigma / scale[m] ** 2 * v[m]
    lossless = [m for m in scale if m not in active]
    alpha = sys.dims[0] if kind == STABILITY else sys.dims[0] + sys.dims[2]
    base = _lossless_multiplier(verts, alpha)
    lam_max = max((lam for lam, _ in groups), default=0.0)
    t = 4.0 * (1.0 + lam_max) * max(1.0, float(np.linalg.norm(values["Y"], 2)))
    for _ in range(40):
        for m in lossless:
            values[m] = t * base
        ok, margins = _certify(paper, values, strict, opts.settings.eps_check)
        if ok or not lossless:
            break
        t *= 4.0
    return ok, values, margins


def _metadata(opts, box, zeros, groups):
    return {
        "rho_l": box.rho_l,
        "rho_u": box.rho_u,
        "K": opts.vertices,
        "eps_lmi": opts.eps_lmi,
        "relaxation": opts.relaxation,
        "consensus": opts.consensus,
        "multiplier_penalty": opts.multiplier_penalty,
        "zero_eigenvalues_enforced": zeros,
        "zero_block_excluded": bool(opts.consensus),
        "modal_lmis": len(groups),
    }


def _used(zeros, groups):
    return ([(0.0, zeros)] if zeros else []) + [(float(l), int(m)) for l, m in groups]


def _setup(spec, box, opts):
    box = UncertaintyBox.of(box)
    spec = _spectral(spec, opts.dedup_tol)
    zeros, groups = _modal_groups(spec, opts.consensus)
    return box, zeros, groups


def _stability_cert(status, out, used, groups, meta):
    v = out.values if out else {}
    return RobustCertificate(
        status,
        math.nan,
        v.get("Y"),
        v.get("P"),
        None,
        [],
        used,
        _stats(out.report) if out and out.report else {},
        len(groups),
        out.margins if out else {},
        meta,
    )


def robust_stability(sys: DecomposableSystem, spec, box, options: RobustOptions | None = None):
    """Sufficient robust mean-square stability test.

    Returns ``(feasible, certificate)``. ``feasible`` is True only if the
    solver's point, mapped back to the original coordinates, passes an
    independent eigenvalue re-check of every strict constraint.
    """
    opts = options or RobustOptions()
    box, zeros, groups = _setup(spec, box, opts)
    meta = _metadata(opts, box, zeros, groups)
    used = _used(zeros, groups)
    if zeros and not _schur(sys.Ad):
        meta["diagnosis"] = "Ad is not Schur; nominal LMI for the zero eigenvalue is infeasible"
        return False, _stability_cert(lmi.INFEASIBLE, None, used, groups, meta)
    out = _run(sys, zeros, groups, box, opts, STABILITY)
    meta["coverage"] = out.verts.coverage_certificate
    meta["scaling"] = {"c": out.scaling.c1}
    meta["centered"] = out.centered
    cert = _stability_cert(out.status, out, used, groups, meta)
    return cert.feasible and out.verts.certifying, cert


def robust_h2(sys: DecomposableSystem, spec, box, options: RobustOptions | None = None) -> RobustCertificate:
    """Smallest certifiable H2 bound by direct minimization.

    ``gamma^2 = sum_i mult_i tr(Z_i) + penalty terms`` bounds the squared H2
    norm for every admissible probability assignment in the box; the
    penalty-free value ``sqrt(sum_i mult_i tr(Z_i))`` is stored as
    ``metadata["gamma_trace"]``. If nothing can be certified the returned
    certificate has ``gamma = inf`` and a non-success status. With
    ``options.consensus`` one zero eigenvalue is dropped together with its Z
    block, i.e. the bound applies to the disagreement dynamics.
    """
    opts = options or RobustOptions()
    box, zeros, groups = _setup(spec, box, opts)
    meta = _metadata(opts, box, zeros, groups)
    used = _used(zeros, groups)
    if zeros and not _schur(sys.Ad):
        meta["diagnosis"] = "Ad is not Schur; nominal LMIs for the zero eigenvalue are infeasible"
        return RobustCertificate(lmi.INFEASIBLE, math.inf, None, None, None, [], used, {}, len(groups), {}, meta)
    out = _run(sys, zeros, groups, box, opts, H2)
    meta["coverage"] = out.verts.coverage_certificate
    meta["scaling"] = {"sigma": out.scaling.sigma, "c1": out.scaling.c1, "c2": out.scaling.c2}
    stats = _stats(out.report)
    if out.status not in (lmi.OPTIMAL, lmi.FEASIBLE):
        return RobustCertificate(out.status, math.inf, None, None, None, [], used, stats, len(groups), out.margins, meta)
    v = out.values
    Z = [v[zn] for zn, _, _ in out.z_names]
    trace = sum(m * float(np.trace(z)) for z, (_, _, m) in zip(Z, out.z_names))
    meta["gamma_trace"] = math.sqrt(max(trace, 0.0))
    if not out.verts.certifying:
        meta["warning"] = "grid relaxation is not certifying"
    penalized = out.objective or 0.0
    meta["centered"] = out.centered
    gamma = math.sqrt(max(penalized, trace, 0.0))
    return RobustCertificate(
        out.status, gamma, v["Y"], v["P1"], v["P2"], Z, used, stats, len(groups), out.margins, meta
    )


def robust_h2_feasible(sys, spec, box, gamma: float, options: RobustOptions | None = None) -> bool:
    """Feasibility form of :func:`robust_h2`: is the penalized bound ``<= gamma^2`` certifiable?"""
    opts = options or RobustOptions()
    box, zeros, groups = _setup(spec, box, opts)
    if zeros and not _schur(sys.Ad):
        return False
    out = _run(sys, zeros, groups, box, opts, H2, gamma=gamma)
    return out.status in (lmi.OPTIMAL, lmi.FEASIBLE) and out.verts.certifying


def bisection_gamma(
    feasible_fn, lo: float, hi: float, rel_tol: float = 1e-3, abs_tol: float = 1e-9, max_steps: int = 200
) -> float:
    """Smallest ``gamma`` in ``[lo, hi]`` accepted by a monotone feasibility callback.

    Returns the feasible end of the final bracket. ``hi`` is doubled (within
    the overall ``max_steps`` budget) until it is feasible.
    """
    if lo < 0 or hi <= lo:
        raise ValueError("need 0 <= lo < hi")
    steps = 0
    while not feasible_fn(hi):
        lo, hi = hi, 2.0 * hi
        steps += 1
        if steps >= max_steps:
            raise BisectionError("no feasible gamma found", ())
    while hi - lo > max(abs_tol, rel_tol * hi):
        mid = 0.5 * (lo + hi)
        if feasible_fn(mid):
            hi = mid
        else:
            lo = mid
        steps += 1
        if steps >= max_steps:
            raise BisectionError("bisection did not reach tolerance", (lo, hi))
    return hi


def certificate_report(cert: RobustCertificate) -> str:
    """JSON text with gamma, eigenvalues, solver status and the certificate matrices."""

    def mat(m):
        return None if m is None else np.asarray(m).tolist()

    def num(x):
        return x if x is None or math.isfinite(x) else str(x)

    payload = {
        "status": cert.status,
        "gamma": num(cert.gamma),
        "eigenvalues_used": [[lam, k] for lam, k in cert.eigenvalues_used],
        "lmi_block_count": cert.lmi_block_count,
        "solver": cert.solver_stats,
        "metadata": cert.metadata,
        "Y": mat(cert.Y),
        "P1": mat(cert.P1),
        "P2": mat(cert.P2),
        "Z": [mat(z) for z in cert.Z_blocks],
        "min_margin": min(cert.margins.values(), default=None),
    }
    return json.dumps(payload, indent=2, sort_keys=True)
