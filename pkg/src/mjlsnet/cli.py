"""Command-line front end: ``sweep``, ``scaling`` and ``validate`` emitting CSV."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import subprocess
import sys
from pathlib import Path

from . import experiments, lmi
from .graphs import build_triangle, parse_graph_spec
from .loss import parse_loss_spec
from .robust import RobustOptions
from .system import parse_system_spec

__all__ = ["main", "build_parser", "parse_grid", "format_value"]

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3

SWEEP_COLUMNS = ["rho_l", "N", "gamma_robust", "h2_corner_max", "solver_status"]
SCALING_COLUMNS = ["N", "edge_count", "gamma_robust", "wall_time_s", "lmi_block_count", "solver_status"]
VALIDATE_COLUMNS = ["check", "passed", "measured", "tolerance", "detail"]


def format_value(v) -> str:
    """Fixed numeric formatting (9 significant digits) for diffable CSV."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.9g}"
    return str(v)


def parse_grid(spec: str) -> list[float]:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    if ":" in spec:
        start, step, stop = (float(x) for x in spec.split(":"))
        if step <= 0 or stop < start:
            raise ValueError(f"bad grid {spec!r}")
        count = int(round((stop - start) / step)) + 1
        return [round(start + k * step, 12) for k in range(count)]
    return [float(x) for x in spec.split(",") if x]


def parse_box(spec: str) -> tuple[float, float]:
    lo, hi = (float(x) for x in spec.split(","))
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"box {spec!r} is not an ordered sub-interval of [0, 1]")
    return lo, hi


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--graph", action="append", help="cycle:N, triangle:ROWS or file:PATH (repeatable)")
    common.add_argument("--system", default="consensus", help="consensus[:KAPPA] or file:PATH")
    common.add_argument("--kappa", type=float, default=0.1, help="consensus gain (default 0.1)")
    common.add_argument("--loss", default="uniform:0.8", help="uniform:p, box:lo,hi,seed or file:PATH")
    common.add_argument("--box", default="0.4,0.6", help="uncertainty box rho_l,rho_u")
    common.add_argument("--vertices", type=int, default=17, help="angular grid size K of the vertex relaxation")
    common.add_argument("--eps-lmi", type=float, default=1e-7)
    common.add_argument("--dedup-tol", type=float, default=1e-9)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output CSV path (default stdout)")
    common.add_argument(
        "--consensus",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="drop one zero Laplacian eigenvalue (disagreement dynamics)",
    )
    common.add_argument("--corner-mode", choices=[experiments.INDEPENDENT, experiments.SHARED_X], default="independent")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mjlsnet", description="Robust H2 analysis of networked MJLS")
    sub = parser.add_subparsers(dest="command", required=True)
    sw = sub.add_parser("sweep", parents=[common], help="bound versus uncertainty interval [rho_l, 1]")
    sw.add_argument("--grid", default="0:0.05:1", help="rho_l grid start:step:stop")
    sc = sub.add_parser("scaling", parents=[common], help="bound and wall time on triangular lattices")
    sc.add_argument("--max-n", type=int, default=10_000)
    sc.add_argument("--rows", default=None, help="comma-separated lattice rows (default: a fixed ladder)")
    sc.add_argument("--repeats", type=int, default=1)
    va = sub.add_parser("validate", parents=[common], help="cross-module property checks")
    va.add_argument("--trials", type=int, default=20_000, help="Monte Carlo trials")
    va.add_argument("--samples", type=int, default=10, help="random assignments for the soundness check")
    va.add_argument("--dump-traces", default=None, help="CSV of the mean Monte Carlo energy per step")
    return parser


def _options(args) -> RobustOptions:
    return RobustOptions(
        vertices=args.vertices,
        consensus=args.consensus,
        eps_lmi=args.eps_lmi,
        dedup_tol=args.dedup_tol,
        settings=lmi.SolverSettings(),
    )


def _metadata(args, extra=()) -> list[tuple[str, str]]:
    meta = [
        ("command", args.command),
        ("system", args.system),
        ("kappa", format_value(args.kappa)),
        ("K", str(args.vertices)),
        ("eps_lmi", format_value(args.eps_lmi)),
        ("dedup_tol", format_value(args.dedup_tol)),
        ("seed", str(args.seed)),
        ("consensus", format_value(bool(args.consensus))),
        ("corner_mode", args.corner_mode),
        ("git", _git_describe()),
    ]
    return meta + list(extra)


def _write(args, columns, rows, meta):
    buf = io.StringIO()
    for key, value in meta:
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _system(args):
    return parse_system_spec(args.system, args.kappa)


def cmd_sweep(args) -> int:
    graphs = [parse_graph_spec(s) for s in (args.graph or ["cycle:4", "cycle:6"])]
    grid = parse_grid(args.grid)
    rows = experiments.sweep(_system(args), graphs, grid, _options(args), args.corner_mode, args.jobs)
    meta = _metadata(args, [("graphs", " ".join(args.graph or ["cycle:4", "cycle:6"])), ("rho_u", "1")])
    _write(args, SWEEP_COLUMNS, rows, meta)
    return EXIT_SOLVER if any(_failed(r["solver_status"]) for r in rows) else EXIT_OK


def _failed(status: str) -> bool:
    return any(f in status for f in experiments.FAILURES)


def cmd_scaling(args) -> int:
    if args.rows:
        rows = [int(r) for r in args.rows.split(",") if r]
    else:
        rows = list(experiments.SCALING_ROWS)
    rows = [r for r in rows if r * (r + 1) // 2 <= args.max_n]
    if not rows:
        raise ValueError("no lattice fits within --max-n")
    for r in rows:
        build_triangle(r)  # validate before the long run
    box = parse_box(args.box)
    result = experiments.scaling(_system(args), rows, box, _options(args), args.repeats)
    meta = _metadata(args, [("box", args.box), ("repeats", str(args.repeats)), ("rows", ",".join(map(str, rows)))])
    _write(args, SCALING_COLUMNS, result, meta)
    return EXIT_SOLVER if any(_failed(r["solver_status"]) for r in result) else EXIT_OK


def cmd_validate(args) -> int:
    graph_spec = (args.graph or ["cycle:4"])[0]
    g = parse_graph_spec(graph_spec)
    model = parse_loss_spec(args.loss, g)
    box = parse_box(args.box)
    checks = experiments.validate(
        _system(args),
        g,
        model,
        box,
        _options(args),
        seed=args.seed,
        trials=args.trials,
        samples=args.samples,
        dump_traces=args.dump_traces,
    )
    rows = [
        {"check": c.name, "passed": c.passed, "measured": c.measured, "tolerance": c.tolerance, "detail": c.detail}
        for c in checks
    ]
    meta = _metadata(args, [("graph", graph_spec), ("loss", args.loss), ("box", args.box), ("trials", str(args.trials))])
    _write(args, VALIDATE_COLUMNS, rows, meta)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_PROPERTY


COMMANDS = {"sweep": cmd_sweep, "scaling": cmd_scaling, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
