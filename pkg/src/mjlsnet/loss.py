"""Per-edge packet-loss Markov chains and the moments of the stochastic Laplacian."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import UndirectedGraph, incidence, laplacian

__all__ = [
    "SYMMETRIC_MARKOV",
    "INDEPENDENT_BERNOULLI",
    "EdgeChain",
    "LossModel",
    "JointChain",
    "LaplacianMoments",
    "OracleIntractableError",
    "alpha",
    "mode_bits",
    "joint_chain",
    "mode_laplacian",
    "conditional_moments",
    "validate",
    "uniform_model",
    "random_model",
    "read_loss_model",
    "write_loss_model",
    "parse_loss_spec",
]

SYMMETRIC_MARKOV = "symmetric-markov"
INDEPENDENT_BERNOULLI = "independent-bernoulli"
CORRELATIONS = (SYMMETRIC_MARKOV, INDEPENDENT_BERNOULLI)

MODE_CAP = 14
DENSE_TRANSITION_CAP = 12


class OracleIntractableError(ValueError):
    """The joint mode space is too large to enumerate."""


@dataclass(frozen=True)
class EdgeChain:
    """Two-state success/failure chain of one link.

    p: P(success | success), q: P(success | failure), eta: P(initial success).
    """

    p: float
    q: float
    eta: float

    def __post_init__(self):
        for name in ("p", "q", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")

    def transition(self) -> np.ndarray:
        """2x2 transition matrix with state order (failure, success)."""
        return np.array([[1.0 - self.q, self.q], [1.0 - self.p, self.p]])

    def initial(self) -> np.ndarray:
        return np.array([1.0 - self.eta, self.eta])


@dataclass(frozen=True)
class LossModel:
    graph: UndirectedGraph
    chains: tuple[EdgeChain, ...]
    correlation: str = SYMMETRIC_MARKOV
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        if len(self.chains) != self.graph.edge_count:
            raise ValueError("need exactly one chain per edge")
        if self.correlation not in CORRELATIONS:
            raise ValueError(f"unknown correlation mode {self.correlation!r}")

    def with_edge_order(self, order) -> "LossModel":
        return LossModel(
            self.graph.with_edge_order(order),
            tuple(self.chains[k] for k in order),
            self.correlation,
            self.box,
        )


@dataclass(frozen=True)
class LaplacianMoments:
    """Conditional moments of the next-step Laplacian.

    ``variance`` is the weighted Laplacian ``Phi diag(alpha(1-alpha)) Phi^T``;
    its off-diagonal entries are the negated elementwise variances.
    """

    expectation: np.ndarray
    variance: np.ndarray
    expected_product: np.ndarray


@dataclass(frozen=True)
class JointChain:
    """Joint mode chain over all links, kept in factored (Kronecker) form.

    Mode ``sigma`` has bit ``b`` equal to the state of edge ``b`` (LSB first).
    """

    factors: tuple[np.ndarray, ...]
    initial_factors: tuple[np.ndarray, ...]
    mode_count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "mode_count", 2 ** len(self.factors))

    @property
    def edge_count(self) -> int:
        return len(self.factors)

    @property
    def mu(self) -> np.ndarray:
        out = np.ones(1)
        for f in self.initial_factors:  # edge 0 is least significant
            out = np.kron(f, out)
        return out

    def transition_matrix(self) -> np.ndarray:
        if self.edge_count > DENSE_TRANSITION_CAP:
            raise OracleIntractableError(
                f"dense transition matrix with 2^{self.edge_count} modes is not materialized"
            )
        out = np.ones((1, 1))
        for f in self.factors:
            out = np.kron(f, out)
        return out

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Return ``out[i] = sum_j t[i, j] values[j]`` for a stack over modes."""
        e = self.edge_count
        tail = values.shape[1:]
        arr = values.reshape((2,) * e + tail)
        for b, f in enumerate(self.factors):
            axis = e - 1 - b
            arr = np.moveaxis(np.tensordot(f, arr, axes=([1], [axis])), 0, axis)
        return arr.reshape(values.shape)

    def apply_initial(self, values: np.ndarray) -> np.ndarray:
        """Return ``sum_j mu[j] values[j]``."""
        return np.tensordot(self.mu, values, axes=([0], [0]))


def alpha(chain: EdgeChain, prev: int) -> float:
    """Conditional success probability of the next step given the current link state."""
    return chain.p if prev else chain.q


def mode_bits(mode: int, edge_count: int) -> np.ndarray:
    if not 0 <= mode < 2**edge_count:
        raise ValueError(f"mode {mode} outside [0, 2^{edge_count})")
    return (mode >> np.arange(edge_count)) & 1


def joint_chain(model: LossModel, mode_cap: int = MODE_CAP) -> JointChain:
    if model.graph.edge_count > mode_cap:
        raise OracleIntractableError(
            f"oracle intractable: {model.graph.edge_count} edges exceed mode_cap={mode_cap}"
        )
    return JointChain(
        tuple(c.transition() for c in model.chains),
        tuple(c.initial() for c in model.chains),
    )


def mode_laplacian(g: UndirectedGraph, mode: int) -> np.ndarray:
    """Laplacian of the subgraph of edges whose mode bit is set."""
    return laplacian(g, mode_bits(mode, g.edge_count).astype(float)).astype(np.int64)


def conditional_moments(model: LossModel, prev_mode: int) -> LaplacianMoments:
    bits = mode_bits(prev_mode, model.graph.edge_count)
    a = np.array([alpha(c, b) for c, b in zip(model.chains, bits)])
    phi = incidence(model.graph).astype(float)
    expectation = (phi * a) @ phi.T
    variance = (phi * (a * (1.0 - a))) @ phi.T
    product = expectation.T @ expectation + 2.0 * variance
    return LaplacianMoments(expectation, variance, product)


def validate(model: LossModel, tol: float = 1e-12) -> list[str]:
    """List violations of the symmetric-loss and box assumptions (empty if none)."""
    out = []
    lo, hi = model.box
    if not 0.0 <= lo <= hi <= 1.0:
        out.append(f"box ({lo}, {hi}) is not an ordered sub-interval of [0, 1]")
    for (i, j), c in zip(model.graph.edges, model.chains):
        if model.correlation == INDEPENDENT_BERNOULLI and abs(c.p - c.q) > tol:
            out.append(f"edge {i}-{j}: independent-bernoulli requires p == q (p={c.p}, q={c.q})")
        for name in ("p", "q", "eta"):
            v = getattr(c, name)
            if v < lo - tol or v > hi + tol:
                out.append(f"edge {i}-{j}: {name}={v} outside box [{lo}, {hi}]")
    return out


def uniform_model(g: UndirectedGraph, p: float) -> LossModel:
    """Homogeneous Bernoulli loss, success probability ``p`` on every edge."""
    chain = EdgeChain(p, p, p)
    return LossModel(g, (chain,) * g.edge_count, INDEPENDENT_BERNOULLI, (p, p))


def random_model(g: UndirectedGraph, box, correlation=SYMMETRIC_MARKOV, rng=None) -> LossModel:
    """Heterogeneous chains with p, q, eta drawn uniformly from the box."""
    rng = np.random.default_rng(rng)
    lo, hi = box
    chains = []
    for _ in g.edges:
        p, q, eta = rng.uniform(lo, hi, size=3)
        if correlation == INDEPENDENT_BERNOULLI:
            q = p
        chains.append(EdgeChain(float(p), float(q), float(eta)))
    return LossModel(g, tuple(chains), correlation, (lo, hi))


def write_loss_model(model: LossModel, path) -> None:
    lines = [f"correlation {model.correlation}", f"box {model.box[0]!r} {model.box[1]!r}"]
    for (i, j), c in zip(model.graph.edges, model.chains):
        lines.append(f"{i} {j} {c.p!r} {c.q!r} {c.eta!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_model(path, g: UndirectedGraph) -> LossModel:
    """Read a loss file; its edges must coincide with the edges of ``g``."""
    correlation, box = SYMMETRIC_MARKOV, (0.0, 1.0)
    by_edge = {}
    for raw in Path(path).read_text().splitlines():
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "correlation":
            correlation = tok[1]
        elif tok[0] == "box":
            box = (float(tok[1]), float(tok[2]))
        else:
            i, j = int(tok[0]), int(tok[1])
            by_edge[(min(i, j), max(i, j))] = EdgeChain(float(tok[2]), float(tok[3]), float(tok[4]))
    missing = [e for e in g.edges if e not in by_edge]
    extra = [e for e in by_edge if e not in set(g.edges)]
    if missing or extra:
        raise ValueError(f"{path}: edge mismatch (missing {missing}, extra {extra})")
    return LossModel(g, tuple(by_edge[e] for e in g.edges), correlation, box)


def parse_loss_spec(spec: str, g: UndirectedGraph) -> LossModel:
    """Parse ``uniform:p``, ``box:rho_l,rho_u,seed`` or ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "uniform":
        return uniform_model(g, float(arg))
    if kind == "box":
        lo, hi, seed = arg.split(",")
        return random_model(g, (float(lo), float(hi)), SYMMETRIC_MARKOV, int(seed))
    if kind == "file":
        return read_loss_model(arg, g)
    raise ValueError(f"unknown loss spec {spec!r}")
