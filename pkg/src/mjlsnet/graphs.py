"""Nominal communication graphs: generators, incidence/Laplacian matrices and spectra."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

__all__ = [
    "UndirectedGraph",
    "SpectralData",
    "build_cycle",
    "build_triangle",
    "incidence",
    "laplacian",
    "spectrum",
    "read_edge_list",
    "write_edge_list",
    "parse_graph_spec",
]

DENSE_EIG_THRESHOLD = 4096


class EigensolverError(RuntimeError):
    """Raised when the symmetric eigensolver fails to converge."""


@dataclass(frozen=True)
class UndirectedGraph:
    """Simple undirected graph on vertices ``1..vertex_count``.

    ``edges`` is an ordered tuple of ``(i, j)`` pairs with ``i < j``. The order
    matters: it fixes the column order of the incidence matrix and the bit
    order of the joint loss modes.
    """

    vertex_count: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.vertex_count < 1:
            raise ValueError("vertex_count must be positive")
        normalized = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            for v in (i, j):
                if not 1 <= v <= self.vertex_count:
                    raise ValueError(f"vertex {v} outside [1, {self.vertex_count}]")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            normalized.append(key)
        object.__setattr__(self, "edges", tuple(normalized))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def with_edge_order(self, order) -> "UndirectedGraph":
        """Return the same graph with edges permuted by ``order``."""
        return UndirectedGraph(self.vertex_count, tuple(self.edges[k] for k in order))


@dataclass(frozen=True)
class SpectralData:
    """Sorted Laplacian eigenvalues plus a tolerance-based grouping.

    ``dedup_groups`` holds ``(representative, multiplicity)`` pairs in
    increasing order; the first group(s) with ``|lambda| <= threshold`` are the
    zero eigenvalues counted by ``zero_count``.
    """

    eigenvalues: np.ndarray
    zero_count: int
    dedup_groups: tuple[tuple[float, int], ...]
    threshold: float

    @property
    def nonzero_groups(self) -> tuple[tuple[float, int], ...]:
        return tuple((lam, k) for lam, k in self.dedup_groups if abs(lam) > self.threshold)


def build_cycle(n: int) -> UndirectedGraph:
    """N-cycle with edges ``{i, i+1}`` and the closing edge ``{1, N}``."""
    if n < 3:
        raise ValueError("a cycle needs at least 3 vertices")
    edges = [(i, i + 1) for i in range(1, n)] + [(1, n)]
    return UndirectedGraph(n, tuple(edges))


def build_triangle(rows: int) -> UndirectedGraph:
    """Triangular lattice with ``rows`` rows; row ``r`` holds ``r`` vertices.

    Vertices are numbered row by row from the apex. Vertex ``k`` of row ``r``
    connects to its right neighbour in the same row and to vertices ``k`` and
    ``k+1`` of row ``r+1``.
    """
    if rows < 1:
        raise ValueError("rows must be >= 1")

    def vid(r, k):  # r, k zero-based
        return r * (r + 1) // 2 + k + 1

    edges = []
    for r in range(rows):
        for k in range(r + 1):
            v = vid(r, k)
            if k < r:
                edges.append((v, vid(r, k + 1)))
            if r + 1 < rows:
                edges.append((v, vid(r + 1, k)))
                edges.append((v, vid(r + 1, k + 1)))
    edges.sort()
    return UndirectedGraph(rows * (rows + 1) // 2, tuple(edges))


def incidence(g: UndirectedGraph) -> np.ndarray:
    """Oriented incidence matrix, +1 at the smaller endpoint and -1 at the larger."""
    phi = np.zeros((g.vertex_count, g.edge_count), dtype=np.int64)
    for col, (i, j) in enumerate(g.edges):
        phi[i - 1, col] = 1
        phi[j - 1, col] = -1
    return phi


def laplacian(g: UndirectedGraph, weights=None) -> np.ndarray:
    """Graph Laplacian, optionally with per-edge weights in edge order.

    Without weights the result is an integer matrix.
    """
    n = g.vertex_count
    if weights is None:
        lap = np.zeros((n, n), dtype=np.int64)
        w = np.ones(g.edge_count, dtype=np.int64)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (g.edge_count,):
            raise ValueError("need one weight per edge")
        lap = np.zeros((n, n))
    for (i, j), wk in zip(g.edges, w):
        lap[i - 1, j - 1] -= wk
        lap[j - 1, i - 1] -= wk
        lap[i - 1, i - 1] += wk
        lap[j - 1, j - 1] += wk
    return lap


def _banded_eigvals(lap: np.ndarray) -> np.ndarray:
    perm = reverse_cuthill_mckee(csr_matrix(lap), symmetric_mode=True)
    lp = lap[np.ix_(perm, perm)]
    rows, cols = np.nonzero(lp)
    bw = int(np.max(np.abs(rows - cols))) if rows.size else 0
    n = lp.shape[0]
    band = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        band[d, : n - d] = np.diagonal(lp, -d)
    return scipy.linalg.eigvals_banded(band, lower=True)


def spectrum(lap, dedup_tol: float = 1e-9, dense_threshold: int = DENSE_EIG_THRESHOLD) -> SpectralData:
    """Eigenvalues of a symmetric matrix, grouped within a relative tolerance.

    Matrices larger than ``dense_threshold`` go through a bandwidth-reducing
    permutation and a banded (tridiagonalizing) eigensolver.
    """
    lap = np.asarray(lap, dtype=float)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(lap, lap.T, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    try:
        if lap.shape[0] <= dense_threshold:
            eig = scipy.linalg.eigvalsh(lap)
        else:
            eig = _banded_eigvals(lap)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(str(exc)) from exc
    eig = np.sort(eig)
    scale = max(1.0, float(eig[-1])) if eig.size else 1.0
    thr = dedup_tol * scale
    zero_count = int(np.sum(np.abs(eig) <= thr))

    groups: list[list] = []
    for lam in eig:
        if groups and abs(lam - groups[-1][0]) <= thr and (abs(lam) <= thr) == (abs(groups[-1][0]) <= thr):
            groups[-1][1] += 1
        else:
            groups.append([float(lam), 1])
    # zero group represented by exact zero
    dedup = tuple((0.0 if abs(rep) <= thr else rep, k) for rep, k in groups)
    return SpectralData(eig, zero_count, dedup, thr)


def write_edge_list(g: UndirectedGraph, path) -> None:
    lines = [f"{g.vertex_count} {g.edge_count}"] + [f"{i} {j}" for i, j in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> UndirectedGraph:
    """Read the ``N M`` header plus ``M`` lines of 1-indexed ``i j`` pairs."""
    tokens = [ln.split() for ln in Path(path).read_text().splitlines()]
    tokens = [t for t in tokens if t and not t[0].startswith("#")]
    if not tokens:
        raise ValueError(f"{path}: empty edge list")
    n, m = int(tokens[0][0]), int(tokens[0][1])
    body = tokens[1:]
    if len(body) != m:
        raise ValueError(f"{path}: header declares {m} edges, found {len(body)}")
    return UndirectedGraph(n, tuple((int(a), int(b)) for a, b, *_ in body))


def parse_graph_spec(spec: str) -> UndirectedGraph:
    """Parse ``cycle:N``, ``triangle:ROWS`` or ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "cycle":
        return build_cycle(int(arg))
    if kind == "triangle":
        return build_triangle(int(arg))
    if kind == "file":
        return read_edge_list(arg)
    raise ValueError(f"unknown graph spec {spec!r}")
