"""Decomposable jump systems ``I (x) M^d + L_sigma (x) M^c + L^0 (x) M^p``."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.linalg

from .graphs import UndirectedGraph, incidence, laplacian
from .loss import mode_bits

__all__ = [
    "DecomposableSystem",
    "FullModeSystem",
    "assemble",
    "assemble_modes",
    "consensus_basis",
    "consensus_example",
    "read_system",
    "write_system",
    "parse_system_spec",
]

BLOCKS = ("Ad", "Ac", "Ap", "Bd", "Bc", "Bp", "Cd", "Cc", "Cp", "Dd", "Dc", "Dp")


@dataclass(frozen=True)
class DecomposableSystem:
    Ad: np.ndarray
    Ac: np.ndarray
    Ap: np.ndarray
    Bd: np.ndarray
    Bc: np.ndarray
    Bp: np.ndarray
    Cd: np.ndarray
    Cc: np.ndarray
    Cp: np.ndarray
    Dd: np.ndarray
    Dc: np.ndarray
    Dp: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=float, ndmin=2)
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        nx, nw = self.Bd.shape
        nz = self.Cd.shape[0]
        expected = {"A": (nx, nx), "B": (nx, nw), "C": (nz, nx), "D": (nz, nw)}
        for name in BLOCKS:
            shape = getattr(self, name).shape
            if shape != expected[name[0]]:
                raise ValueError(f"{name} has shape {shape}, expected {expected[name[0]]}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(n_x, n_w, n_z)`` of a single agent."""
        return self.Bd.shape[0], self.Bd.shape[1], self.Cd.shape[0]

    @classmethod
    def from_blocks(cls, dims, **blocks) -> "DecomposableSystem":
        """Build a system, filling missing blocks with zeros."""
        nx, nw, nz = dims
        shapes = {"A": (nx, nx), "B": (nx, nw), "C": (nz, nx), "D": (nz, nw)}
        unknown = set(blocks) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown blocks {sorted(unknown)}")
        return cls(**{k: blocks.get(k, np.zeros(shapes[k[0]])) for k in BLOCKS})

    def replace(self, **blocks) -> "DecomposableSystem":
        data = {k: getattr(self, k) for k in BLOCKS}
        data.update(blocks)
        return DecomposableSystem(**data)


@dataclass(frozen=True)
class FullModeSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def consensus_basis(n: int) -> np.ndarray:
    """Orthonormal ``n x (n-1)`` basis of the complement of the all-ones vector."""
    return scipy.linalg.null_space(np.ones((1, n)))


def _patterns(g: UndirectedGraph, basis):
    n = g.vertex_count
    l0 = laplacian(g).astype(float)
    eye = np.eye(n)
    if basis is not None:
        l0 = basis.T @ l0 @ basis
        eye = np.eye(basis.shape[1])
    return eye, l0


def assemble(sys: DecomposableSystem, g: UndirectedGraph, mode: int, basis=None) -> FullModeSystem:
    """Full network matrices for one mode.

    With ``basis`` (e.g. :func:`consensus_basis`) every Laplacian is
    compressed to ``basis^T L basis`` before the Kronecker expansion.
    """
    eye, l0 = _patterns(g, basis)
    lm = laplacian(g, mode_bits(mode, g.edge_count).astype(float))
    if basis is not None:
        lm = basis.T @ lm @ basis
    parts = {}
    for letter in "ABCD":
        parts[letter] = (
            np.kron(eye, getattr(sys, letter + "d"))
            + np.kron(lm, getattr(sys, letter + "c"))
            + np.kron(l0, getattr(sys, letter + "p"))
        )
    return FullModeSystem(**parts)


def assemble_modes(sys: DecomposableSystem, g: UndirectedGraph, basis=None) -> FullModeSystem:
    """Stacked matrices for all ``2^|E|`` modes (leading axis is the mode index)."""
    eye, l0 = _patterns(g, basis)
    e = g.edge_count
    phi = incidence(g).astype(float)
    if basis is not None:
        phi = basis.T @ phi
    outer = np.einsum("ie,je->eij", phi, phi)
    bits = ((np.arange(2**e)[:, None] >> np.arange(e)) & 1).astype(float)
    lms = np.tensordot(bits, outer, axes=([1], [0]))
    parts = {}
    for letter in "ABCD":
        xd, xc, xp = (getattr(sys, letter + s) for s in "dcp")
        const = np.kron(eye, xd) + np.kron(l0, xp)
        coupled = np.einsum("mij,ab->miajb", lms, xc).reshape(
            len(lms), lms.shape[1] * xc.shape[0], lms.shape[2] * xc.shape[1]
        )
        parts[letter] = const[None] + coupled
    return FullModeSystem(**parts)


def consensus_example(kappa: float = 0.1) -> DecomposableSystem:
    """Double-integrator-with-friction agents under a sampled consensus protocol.

    The disturbance enters with the control input; the performance output is
    ``z = L^0 y`` with ``y`` the agent position.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    b_agent = np.array([[0.0], [1.0]])
    c_agent = np.array([[1.0, 0.0]])
    return DecomposableSystem.from_blocks(
        (2, 1, 1),
        Ad=np.array([[1.0, 1.0], [0.0, 0.1]]),
        Ac=-kappa * b_agent @ c_agent,
        Bd=b_agent,
        Cp=c_agent,
    )


def write_system(sys: DecomposableSystem, path) -> None:
    nx, nw, nz = sys.dims
    lines = [f"dims {nx} {nw} {nz}"]
    for name in BLOCKS:
        mat = getattr(sys, name)
        if not np.any(mat):
            continue
        lines.append(name)
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_system(path) -> DecomposableSystem:
    """Read ``dims nx nw nz`` followed by labeled row-major matrix blocks."""
    dims = None
    blocks: dict[str, list[list[float]]] = {}
    current = None
    for raw in Path(path).read_text().splitlines():
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "dims":
            dims = tuple(int(t) for t in tok[1:4])
        elif tok[0] in BLOCKS:
            current = tok[0]
            if current in blocks:
                raise ValueError(f"{path}: block {current} given twice")
            blocks[current] = []
        elif current is None:
            raise ValueError(f"{path}: matrix row before any block label")
        else:
            blocks[current].append([float(t) for t in tok])
    if dims is None:
        raise ValueError(f"{path}: missing 'dims' line")
    return DecomposableSystem.from_blocks(dims, **{k: np.array(v) for k, v in blocks.items()})


def parse_system_spec(spec: str, kappa: float | None = None) -> DecomposableSystem:
    """Parse ``consensus:KAPPA`` (or bare ``consensus``) and ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "consensus":
        k = float(arg) if arg else (kappa if kappa is not None else 0.1)
        return consensus_example(k)
    if kind == "file":
        return read_system(arg)
    raise ValueError(f"unknown system spec {spec!r}")
