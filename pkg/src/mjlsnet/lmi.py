"""Small LMI modelling layer with a Clarabel backend.

A program holds symmetric matrix variables and constraints of the form

    constant + sum_t coef_t * F_t^T V_t F_t   (<< or >>) 0,

i.e. every variable enters through a congruence. Strictness is expressed by a
per-constraint ``margin``: ``M << 0`` is enforced as ``-M - margin*I >> 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

__all__ = [
    "Term",
    "Constraint",
    "LmiProgram",
    "SolveReport",
    "SolverSettings",
    "solve",
    "verify",
    "write_sdpa",
]

OPTIMAL = "optimal"
FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NUMERICAL_ERROR = "numerical-error"
ITERATION_LIMIT = "iteration-limit"

EPS_CHECK = 1e-7


@dataclass(frozen=True)
class Term:
    """``coef * factor.T @ V @ factor`` for the variable named ``var``."""

    var: str
    factor: np.ndarray
    coef: float = 1.0


@dataclass
class Constraint:
    name: str
    terms: list[Term]
    constant: np.ndarray
    sense: str  # "<<" or ">>"
    margin: float = 0.0

    @property
    def size(self) -> int:
        return self.constant.shape[0]


@dataclass
class LmiProgram:
    variables: dict[str, int] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[str, np.ndarray] = field(default_factory=dict)

    def add_variable(self, name: str, dim: int) -> str:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already declared")
        self.variables[name] = int(dim)
        return name

    def add_constraint(self, name, terms, constant=None, sense="<<", margin=0.0) -> Constraint:
        terms = [t if isinstance(t, Term) else Term(*t) for t in terms]
        size = None
        for t in terms:
            if t.var not in self.variables:
                raise ValueError(f"constraint {name!r} references undeclared variable {t.var!r}")
            f = np.atleast_2d(np.asarray(t.factor, dtype=float))
            if f.shape[0] != self.variables[t.var]:
                raise ValueError(f"constraint {name!r}: factor rows do not match {t.var!r}")
            size = f.shape[1] if size is None else size
            if f.shape[1] != size:
                raise ValueError(f"constraint {name!r}: inconsistent term sizes")
        if constant is None:
            if size is None:
                raise ValueError(f"constraint {name!r} has neither terms nor a constant")
            constant = np.zeros((size, size))
        constant = np.atleast_2d(np.asarray(constant, dtype=float))
        if size is not None and constant.shape != (size, size):
            raise ValueError(f"constraint {name!r}: constant has wrong shape")
        if not np.allclose(constant, constant.T, atol=1e-12):
            raise ValueError(f"constraint {name!r}: constant is not symmetric")
        if sense not in ("<<", ">>"):
            raise ValueError("sense must be '<<' or '>>'")
        terms = [Term(t.var, np.atleast_2d(np.asarray(t.factor, dtype=float)), float(t.coef)) for t in terms]
        con = Constraint(name, terms, 0.5 * (constant + constant.T), sense, float(margin))
        self.constraints.append(con)
        return con

    def minimize(self, weights: dict[str, np.ndarray]) -> None:
        """Objective ``sum_v tr(W_v V)``."""
        for name, w in weights.items():
            if name not in self.variables:
                raise ValueError(f"objective references undeclared variable {name!r}")
            self.objective[name] = np.atleast_2d(np.asarray(w, dtype=float))

    def evaluate(self, con: Constraint, values: dict[str, np.ndarray]) -> np.ndarray:
        out = con.constant.copy()
        for t in con.terms:
            out += t.coef * (t.factor.T @ values[t.var] @ t.factor)
        return out

    def magnitude(self, con: Constraint, values) -> float:
        """Sum of the spectral norms of the summands; scales the acceptance tolerance."""
        total = float(np.linalg.norm(con.constant, 2))
        for t in con.terms:
            total += abs(t.coef) * float(np.linalg.norm(t.factor.T @ values[t.var] @ t.factor, 2))
        return total

    def psd_form(self, con: Constraint, values) -> np.ndarray:
        """The matrix that must be positive semidefinite (margin shift included)."""
        m = self.evaluate(con, values)
        if con.sense == "<<":
            m = -m
        return m - con.margin * np.eye(con.size)

    def objective_value(self, values) -> float:
        return float(sum(np.sum(w * values[k]) for k, w in self.objective.items()))


@dataclass
class SolverSettings:
    tol_gap_abs: float = 1e-9
    tol_gap_rel: float = 1e-9
    tol_feas: float = 1e-9
    max_iter: int = 300
    eps_check: float = EPS_CHECK
    verbose: bool = False
    # Equilibration hurts accuracy on the large modal programs; refinement helps.
    clarabel_options: dict = field(
        default_factory=lambda: {
            "equilibrate_enable": False,
            "iterative_refinement_max_iter": 50,
            "iterative_refinement_reltol": 1e-15,
        }
    )  # passed through to clarabel.DefaultSettings


@dataclass
class SolveReport:
    """Outcome of :func:`solve`.

    ``margins`` maps each constraint to the smallest eigenvalue of its PSD
    form (margin shift included) at ``values``. A successful status implies
    every margin is at least ``-eps_check * max(1, magnitude)``, where the
    magnitude is the summed norm of the constraint's terms at the solution.
    """

    status: str
    values: dict[str, np.ndarray]
    objective_value: float | None
    margins: dict[str, float]
    solver_status: str = ""
    iterations: int = 0
    solve_time: float = 0.0
    downgraded: bool = False  # solver claimed success but the re-check failed

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE)


# --- svec helpers (Clarabel: upper triangle, column-major, sqrt(2) off-diagonal)


def _svec_index(n):
    j, i = np.triu_indices(n)[::-1]  # column-major upper: for j, for i <= j
    order = np.lexsort((i, j))
    i, j = i[order], j[order]
    scale = np.where(i == j, 1.0, np.sqrt(2.0))
    return i, j, scale


_SVEC_CACHE: dict[int, tuple] = {}


def _svec_meta(n):
    if n not in _SVEC_CACHE:
        _SVEC_CACHE[n] = _svec_index(n)
    return _SVEC_CACHE[n]


def _svec(mat):
    i, j, s = _svec_meta(mat.shape[0])
    return mat[i, j] * s


def _smat(vec, n):
    i, j, s = _svec_meta(n)
    out = np.zeros((n, n))
    out[i, j] = vec / s
    out[j, i] = vec / s
    return out


def _var_layout(prog):
    offsets, pos = {}, 0
    for name, d in prog.variables.items():
        offsets[name] = pos
        pos += d * (d + 1) // 2
    return offsets, pos


def _var_pairs(d):
    a, b = np.triu_indices(d)
    return a, b


def _term_columns(term, sign):
    """Sparse svec-columns of ``sign*coef*F^T E_ab F`` for every (a <= b)."""
    f = term.factor
    d, n = f.shape
    i, j, s = _svec_meta(n)
    fi, fj = f[:, i], f[:, j]
    a, b = _var_pairs(d)
    vals = fi[a] * fj[b] + fi[b] * fj[a]
    vals[a == b] *= 0.5
    vals *= s * (sign * term.coef)
    return vals  # shape (n_pairs_var, svec_len)


def _compile(prog):
    offsets, nvar = _var_layout(prog)
    rows, cols, data = [], [], []
    b_parts, cones = [], []
    row0 = 0
    for con in prog.constraints:
        n = con.size
        sign = -1.0 if con.sense == "<<" else 1.0
        g0 = sign * con.constant - con.margin * np.eye(n)
        b_parts.append(_svec(g0))
        for t in con.terms:
            block = _term_columns(t, sign)
            vi, ri = np.nonzero(block)
            rows.append(row0 + ri)
            cols.append(offsets[t.var] + vi)
            data.append(-block[vi, ri])  # s = b - A x
        cones.append(n)
        row0 += n * (n + 1) // 2
    if rows:
        A = sp.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(row0, nvar)
        )
    else:
        A = sp.csc_matrix((row0, nvar))
    A.sum_duplicates()
    q = np.zeros(nvar)
    for name, w in prog.objective.items():
        d = prog.variables[name]
        a, b = _var_pairs(d)
        ws = 0.5 * (w + w.T)
        q[offsets[name] : offsets[name] + len(a)] = np.where(a == b, ws[a, b], 2.0 * ws[a, b])
    b = np.concatenate(b_parts) if b_parts else np.zeros(0)
    return A, b, q, cones, offsets


def _unpack(prog, x, offsets):
    values = {}
    for name, d in prog.variables.items():
        a, b = _var_pairs(d)
        v = np.zeros((d, d))
        chunk = x[offsets[name] : offsets[name] + len(a)]
        v[a, b] = chunk
        v[b, a] = chunk
        values[name] = v
    return values


def _status_of(raw: str, has_objective: bool) -> str:
    if raw == "Solved":
        return OPTIMAL if has_objective else FEASIBLE
    if raw == "AlmostSolved":
        return FEASIBLE
    if raw in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return INFEASIBLE
    if raw in ("MaxIterations", "MaxTime"):
        return ITERATION_LIMIT
    if raw in ("DualInfeasible", "AlmostDualInfeasible"):
        log.error("solver reports an unbounded program; treating as numerical error")
    return NUMERICAL_ERROR


def solve(prog: LmiProgram, settings: SolverSettings | None = None) -> SolveReport:
    """Solve with Clarabel and re-verify every constraint at the returned point."""
    import clarabel

    settings = settings or SolverSettings()
    A, b, q, sizes, offsets = _compile(prog)
    nvar = A.shape[1]
    if not prog.constraints:
        values = _unpack(prog, np.zeros(nvar), offsets)
        return SolveReport(FEASIBLE, values, prog.objective_value(values) if prog.objective else None, {})
    cones = [clarabel.NonnegativeConeT(1) if n == 1 else clarabel.PSDTriangleConeT(n) for n in sizes]
    st = clarabel.DefaultSettings()
    st.verbose = settings.verbose
    st.tol_gap_abs = settings.tol_gap_abs
    st.tol_gap_rel = settings.tol_gap_rel
    st.tol_feas = settings.tol_feas
    st.max_iter = settings.max_iter
    st.max_threads = 1
    for key, value in settings.clarabel_options.items():
        setattr(st, key, value)
    solver = clarabel.DefaultSolver(sp.csc_matrix((nvar, nvar)), q, A, b, cones, st)
    sol = solver.solve()
    raw = str(sol.status)
    status = _status_of(raw, bool(prog.objective))
    x = np.asarray(sol.x, dtype=float)
    values = _unpack(prog, x, offsets)
    margins = {}
    if status in (OPTIMAL, FEASIBLE, ITERATION_LIMIT):
        s = np.asarray(sol.s, dtype=float)
        pos = 0
        for con, n in zip(prog.constraints, sizes):
            k = n * (n + 1) // 2
            margins[con.name] = float(np.linalg.eigvalsh(_smat(s[pos : pos + k], n))[0])
            pos += k
    report = SolveReport(
        status,
        values,
        prog.objective_value(values) if prog.objective and status != INFEASIBLE else None,
        margins,
        solver_status=raw,
        iterations=int(sol.iterations),
        solve_time=float(sol.solve_time),
    )
    if report.ok:
        checked = verify(prog, values)
        for con in prog.constraints:
            tol = settings.eps_check * max(1.0, prog.magnitude(con, values))
            if checked[con.name] < -tol:
                log.warning(
                    "solution violates %s by %.3g; downgrading status", con.name, -checked[con.name]
                )
                report.status = NUMERICAL_ERROR
                report.downgraded = True
                break
        report.margins = checked
    return report


def verify(prog: LmiProgram, values: dict[str, np.ndarray]) -> dict[str, float]:
    """Minimum eigenvalue of every constraint's PSD form, recomputed directly."""
    return {c.name: float(np.linalg.eigvalsh(prog.psd_form(c, values))[0]) for c in prog.constraints}


def write_sdpa(prog: LmiProgram, path) -> None:
    """Dump in SDPA sparse format: min c^T x s.t. sum_k F_k x_k - F_0 >> 0."""
    A, b, q, sizes, _ = _compile(prog)
    A = A.tocsc()
    lines = [
        f"* LMI program with {len(sizes)} blocks",
        str(A.shape[1]),
        str(len(sizes)),
        " ".join(str(n) for n in sizes),
        " ".join(repr(float(v)) for v in q) if q.size else "",
    ]
    starts = np.cumsum([0] + [n * (n + 1) // 2 for n in sizes])

    def emit(mat_no, vec):
        for blk, n in enumerate(sizes):
            seg = vec[starts[blk] : starts[blk + 1]]
            i, j, s = _svec_meta(n)
            for k in np.nonzero(seg)[0]:
                lines.append(f"{mat_no} {blk + 1} {i[k] + 1} {j[k] + 1} {float(seg[k] / s[k])!r}")

    emit(0, -b)
    for k in range(A.shape[1]):
        col = np.zeros(A.shape[0])
        lo, hi = A.indptr[k], A.indptr[k + 1]
        col[A.indices[lo:hi]] = -A.data[lo:hi]
        emit(k + 1, col)
    Path(path).write_text("\n".join(lines) + "\n")
