"""Monte Carlo estimation of the MJLS H2 norm from sampled impulse responses.

Each trial draws an initial link pattern from the per-edge initial
probabilities, applies a unit impulse at every (or a sampled subset of) input
channel at time zero and propagates the network under freshly sampled
per-edge loss chains. The squared H2 norm is the expected total output energy.

The network matrices are never formed: every step applies
``I (x) X_d + L_sigma (x) X_c + L_0 (x) X_p`` through the incidence matrix, so
the cost per step is linear in the number of edges.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graphs import UndirectedGraph, incidence, laplacian
from .loss import LossModel
from .system import DecomposableSystem, consensus_basis

__all__ = [
    "SimConfig",
    "MonteCarloResult",
    "DivergenceError",
    "parse_input_sampling",
    "step",
    "sample_modes",
    "estimate_h2",
]

log = logging.getLogger(__name__)

ALL_INPUTS = "all-inputs"
CHUNK = 4096  # trials per RNG stream; fixed so results do not depend on scheduling
TAIL_FRACTION = 1e-6
STOP_RATIO = 1e-32  # state energy, relative to the energy so far, that ends a chunk early
GROWTH = 1.5  # per-step energy growth factor between dyadic windows flagged as divergence
GROWTH_WINDOWS = 3


class DivergenceError(RuntimeError):
    """Impulse-response energy grows across successive dyadic checkpoints."""


def parse_input_sampling(spec: str) -> int | None:
    """``all-inputs`` -> None, ``sampled:k`` -> k."""
    if spec == ALL_INPUTS:
        return None
    kind, _, arg = spec.partition(":")
    if kind != "sampled" or not arg.isdigit() or int(arg) < 1:
        raise ValueError(f"input sampling must be {ALL_INPUTS!r} or 'sampled:k', got {spec!r}")
    return int(arg)


@dataclass(frozen=True)
class SimConfig:
    horizon: int = 500
    trials: int = 10_000
    seed: int = 0
    input_sampling: str = ALL_INPUTS
    consensus: bool = False  # restrict inputs to the disagreement subspace
    dump_traces: str | None = None  # CSV path with columns k, trial, energy

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        parse_input_sampling(self.input_sampling)


@dataclass
class MonteCarloResult:
    estimate: float  # H2 norm
    ci95: float  # half-width of the normal-approximation 95% interval for the norm
    h2_squared: float
    std: float  # sample standard deviation of the per-trial energy
    trials: int
    horizon: int
    steps: int  # largest number of steps actually simulated
    tail_fraction: float  # share of the energy produced in the last tenth of the horizon
    input_weight: float  # reweighting factor of sampled inputs (1 for all inputs)
    warnings: list = field(default_factory=list)


class _Network:
    """Structured action of the mode-dependent network matrices on a batch.

    Signals are stored as ``(N, n, trials, columns)``.
    """

    def __init__(self, sys: DecomposableSystem, g: UndirectedGraph):
        self.sys = sys
        self.n = g.vertex_count
        self.phi = incidence(g).astype(float)
        self.l0 = laplacian(g).astype(float)

    def apply(self, letter, theta, v):
        """``(I (x) Xd + L_theta (x) Xc + L0 (x) Xp) v`` per trial; ``theta`` is ``(E, trials)``."""
        xd, xc, xp = (getattr(self.sys, letter + s) for s in "dcp")
        n, _, t, m = v.shape
        out = np.matmul(xd, v.reshape(n, xd.shape[1], t * m)).reshape(n, xd.shape[0], t, m)
        if np.any(xp):
            y = np.matmul(xp, v.reshape(n, xp.shape[1], t * m))
            out = out + (self.l0 @ y.reshape(n, -1)).reshape(out.shape)
        if np.any(xc) and self.phi.shape[1]:
            y = np.matmul(xc, v.reshape(n, xc.shape[1], t * m)).reshape(n, -1)
            edge = (self.phi.T @ y).reshape(-1, xc.shape[0], t, m) * theta[:, None, :, None]
            out = out + (self.phi @ edge.reshape(edge.shape[0], -1)).reshape(out.shape)
        return out


def step(state, theta, sys: DecomposableSystem, g: UndirectedGraph, w):
    """One transition ``x+ = A x + B w``, ``z = C x + D w`` of a single trajectory.

    ``state`` is ``(N, nx)``, ``w`` is ``(N, nw)`` and ``theta`` holds the
    current link states (one per edge).
    """
    net = _Network(sys, g)
    th = np.asarray(theta, dtype=float).reshape(-1, 1)
    x = np.asarray(state, dtype=float)[:, :, None, None]
    u = np.asarray(w, dtype=float)[:, :, None, None]
    nxt = net.apply("A", th, x) + net.apply("B", th, u)
    out = net.apply("C", th, x) + net.apply("D", th, u)
    return nxt[:, :, 0, 0], out[:, :, 0, 0]


class _Chains:
    def __init__(self, model: LossModel):
        self.p = np.array([c.p for c in model.chains])[:, None]
        self.q = np.array([c.q for c in model.chains])[:, None]
        self.eta = np.array([c.eta for c in model.chains])[:, None]

    def initial(self, rng, trials):
        return rng.random((len(self.p), trials)) < self.eta

    def advance(self, rng, theta):
        u = rng.random(theta.shape)
        return np.where(theta, u < self.p, u < self.q)


def sample_modes(model: LossModel, horizon: int, trials: int = 1, seed: int = 0) -> np.ndarray:
    """Sampled link states, shape ``(horizon, E, trials)``; ``theta[k]`` is the state at step k."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    chains = _Chains(model)
    theta = chains.initial(rng, trials)
    out = np.empty((horizon, len(chains.p), trials), dtype=bool)
    for k in range(horizon):
        out[k] = theta
        theta = chains.advance(rng, theta)
    return out


def _input_columns(sys, g, consensus):
    """Orthonormal impulse directions, shape ``(N, nw, m)``."""
    n = g.vertex_count
    nw = sys.dims[1]
    basis = consensus_basis(n) if consensus else np.eye(n)
    cols = np.einsum("ia,st->isat", basis, np.eye(nw))
    return cols.reshape(n, nw, -1)


def _chunk(net, chains, cols, k_sample, cfg, seq, trials):
    """Per-trial energies and per-step energy sums for one chunk of trials."""
    rng = np.random.Generator(np.random.Philox(seq))
    n, nw, m_all = cols.shape
    theta = chains.initial(rng, trials)
    if k_sample is None:
        w = np.broadcast_to(cols[:, :, None, :], (n, nw, trials, m_all))
        weight = 1.0
    else:
        k = min(k_sample, m_all)
        pick = np.argsort(rng.random((trials, m_all)), axis=1)[:, :k]
        w = cols[:, :, pick]
        weight = m_all / k
    th = theta.astype(float)
    z = net.apply("D", th, w)
    x = net.apply("B", th, w)
    energy = weight * np.einsum("ijtm,ijtm->t", z, z)
    per_step = [float(energy.sum())]
    for _ in range(1, cfg.horizon):
        theta = chains.advance(rng, theta)
        th = theta.astype(float)
        z = net.apply("C", th, x)
        e = weight * np.einsum("ijtm,ijtm->t", z, z)
        energy += e
        per_step.append(float(e.sum()))
        x = net.apply("A", th, x)
        size = float(np.max(np.einsum("ijtm,ijtm->t", x, x))) if x.size else 0.0
        if not math.isfinite(size):
            raise DivergenceError(f"state became non-finite after {len(per_step)} steps")
        if size <= STOP_RATIO * max(float(energy.sum()), np.finfo(float).tiny):
            break
    return energy, per_step


def _check_growth(per_step):
    """Raise if the mean per-step energy grows over consecutive dyadic windows."""
    means = []
    j = 1
    while j < len(per_step):
        window = per_step[j : 2 * j]
        means.append(sum(window) / len(window))
        j *= 2
    run = 0
    for prev, cur in zip(means, means[1:]):
        run = run + 1 if cur > GROWTH * prev and cur > 0 else 0
        if run >= GROWTH_WINDOWS:
            raise DivergenceError("impulse-response energy grows across dyadic checkpoints")


def estimate_h2(sys: DecomposableSystem, g: UndirectedGraph, model: LossModel, cfg: SimConfig) -> MonteCarloResult:
    """Monte Carlo estimate of the H2 norm with a 95% confidence half-width.

    The per-trial energy ``E`` is averaged to ``h2^2``; the half-width for
    ``h2 = sqrt(mean E)`` follows from the delta method,
    ``1.96 std(E) / sqrt(trials) / (2 h2)``. Trials are split into chunks of
    fixed size, each with its own Philox stream spawned from ``cfg.seed``, so
    results are bit-identical for a given seed.
    """
    if model.graph.edges != g.edges:
        raise ValueError("loss model and graph have different edge lists")
    net = _Network(sys, g)
    chains = _Chains(model)
    cols = _input_columns(sys, g, cfg.consensus)
    k_sample = parse_input_sampling(cfg.input_sampling)
    sizes = [CHUNK] * (cfg.trials // CHUNK) + ([cfg.trials % CHUNK] if cfg.trials % CHUNK else [])
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    energies = []
    per_step = np.zeros(cfg.horizon)
    steps = 0
    for size, seq in zip(sizes, seqs):
        e, trace = _chunk(net, chains, cols, k_sample, cfg, seq, size)
        energies.append(e)
        per_step[: len(trace)] += trace
        steps = max(steps, len(trace))
    _check_growth(list(per_step[:steps]))
    energy = np.concatenate(energies)
    mean = math.fsum(energy) / cfg.trials
    std = float(np.std(energy, ddof=1)) if cfg.trials > 1 else 0.0
    estimate = math.sqrt(max(mean, 0.0))
    ci95 = 1.96 * std / math.sqrt(cfg.trials) / (2.0 * estimate) if estimate > 0 else 0.0
    total = math.fsum(per_step)
    last = math.fsum(per_step[cfg.horizon - max(1, cfg.horizon // 10) :])
    tail = last / total if total > 0 else 0.0
    warnings = []
    if tail >= TAIL_FRACTION:
        warnings.append(f"last tenth of the horizon carries {tail:.3g} of the energy; increase the horizon")
    weight = 1.0 if k_sample is None else cols.shape[2] / min(k_sample, cols.shape[2])
    if k_sample is not None:
        warnings.append(f"inputs subsampled: {min(k_sample, cols.shape[2])} of {cols.shape[2]}, weight {weight:.6g}")
    if cfg.dump_traces:
        _dump(cfg.dump_traces, per_step[:steps], cfg.trials)
    return MonteCarloResult(estimate, ci95, mean, std, cfg.trials, cfg.horizon, steps, tail, weight, warnings)


def _dump(path, per_step, trials):
    """Write the trial-averaged energy per step (trial column ``-1`` marks the average)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["k", "trial", "energy"])
        for k, e in enumerate(per_step):
            out.writerow([k, -1, f"{e / trials:.9g}"])
