import math

import numpy as np
import pytest

from mjlsnet.graphs import UndirectedGraph, build_cycle, build_triangle, laplacian
from mjlsnet.loss import (
    SYMMETRIC_MARKOV,
    EdgeChain,
    LossModel,
    joint_chain,
    random_model,
    uniform_model,
)
from mjlsnet.oracle import _arnoldi_radius, closed_modes, h2_deterministic, h2_exact, impulse_energy, ms_stable_exact
from mjlsnet.system import DecomposableSystem, assemble, assemble_modes, consensus_basis, consensus_example

LONE = UndirectedGraph(1, ())

# Frozen exact values (consensus example, kappa = 0.1, disagreement dynamics),
# cross-checked against the dense linear solve below and Monte Carlo.
FROZEN = {
    ("cycle4", "uniform0.8"): 9.379800128535441,
    ("cycle4", "markov7"): 11.193015783847631,
    ("cycle6", "uniform0.8"): 11.493716387005406,
    ("triangle3", "uniform0.8"): 15.873300275118886,
}
GRAPHS = {"cycle4": build_cycle(4), "cycle6": build_cycle(6), "triangle3": build_triangle(3)}


def model_for(g, tag):
    if tag == "uniform0.8":
        return uniform_model(g, 0.8)
    return random_model(g, (0.4, 0.6), SYMMETRIC_MARKOV, 7)


def dense_h2(sys, g, model):
    """Independent reference: solve the coupled Lyapunov equations as one linear system."""
    full = assemble_modes(sys, g, consensus_basis(g.vertex_count))
    chain = joint_chain(model)
    t = chain.transition_matrix()
    m, n = full.A.shape[0], full.A.shape[1]
    big = np.zeros((m * n * n, m * n * n))
    rhs = np.zeros(m * n * n)
    for i in range(m):
        for j in range(m):
            if t[i, j]:
                big[i * n * n : (i + 1) * n * n, j * n * n : (j + 1) * n * n] = t[i, j] * np.kron(
                    full.A[j].T, full.A[j].T
                )
        rhs[i * n * n : (i + 1) * n * n] = sum(t[i, j] * (full.C[j].T @ full.C[j]).ravel() for j in range(m))
    x = np.linalg.solve(np.eye(m * n * n) - big, rhs).reshape(m, n, n)
    total = sum(chain.mu[j] * np.trace(full.B[j].T @ x[j] @ full.B[j] + full.D[j].T @ full.D[j]) for j in range(m))
    return math.sqrt(total)


def scalar(a=0.5, b=1.0, c=1.0, d=0.0):
    return DecomposableSystem.from_blocks((1, 1, 1), Ad=[[a]], Bd=[[b]], Cd=[[c]], Dd=[[d]])


def test_scalar_geometric_series():
    res = h2_exact(scalar(), LONE, LossModel(LONE, ()))
    assert res.stable
    assert abs(res.h2 - 2 / math.sqrt(3)) <= 1e-9


def test_feedthrough_only():
    res = h2_exact(scalar(0.0, 0.0, 0.0, -1.7), LONE, LossModel(LONE, ()))
    assert abs(res.h2 - 1.7) <= 1e-12


def test_decoupled_scalar_agents():
    g = build_cycle(3)
    verdict = ms_stable_exact(scalar(), g, uniform_model(g, 0.3))
    assert verdict.stable
    assert abs(verdict.spectral_estimate - 0.25) <= 1e-9


def test_unstable_detected():
    g = build_cycle(4)
    res = h2_exact(consensus_example(3.0), g, uniform_model(g, 0.5), consensus=True)
    assert not res.stable
    assert res.h2 is None


def test_deterministic_matches_schur():
    s = consensus_example(0.1)
    g = build_cycle(4)
    verdict = ms_stable_exact(s, g, uniform_model(g, 1.0), consensus=True)
    A = assemble(s, g, 2**4 - 1, consensus_basis(4)).A
    rho = max(abs(np.linalg.eigvals(A)))
    assert verdict.stable == (rho < 1)
    chain = joint_chain(uniform_model(g, 1.0))
    full = assemble_modes(s, g, consensus_basis(4))
    assert abs(_arnoldi_radius(chain, full.A, closed_modes(chain)) - rho**2) <= 1e-8


@pytest.mark.parametrize("g", [build_cycle(4), build_cycle(5), build_triangle(3)], ids=["c4", "c5", "t3"])
@pytest.mark.parametrize("kappa", [0.05, 0.1, 0.2])
def test_deterministic_h2(g, kappa):
    s = consensus_example(kappa)
    exact = h2_exact(s, g, uniform_model(g, 1.0), consensus=True)
    gram = h2_deterministic(assemble(s, g, 2**g.edge_count - 1, consensus_basis(g.vertex_count)))
    if math.isinf(gram):  # kappa = 0.2 destabilizes the triangle lattice
        assert not exact.stable
    else:
        assert abs(exact.h2 - gram) <= 1e-8


@pytest.mark.parametrize("key", sorted(FROZEN))
def test_frozen_values(key):
    g = GRAPHS[key[0]]
    model = model_for(g, key[1])
    res = h2_exact(consensus_example(0.1), g, model, consensus=True)
    assert res.h2 == pytest.approx(FROZEN[key], rel=1e-10)


@pytest.mark.parametrize("key", [("cycle4", "uniform0.8"), ("cycle4", "markov7")])
def test_dense_reference(key):
    g = GRAPHS[key[0]]
    assert dense_h2(consensus_example(0.1), g, model_for(g, key[1])) == pytest.approx(FROZEN[key], rel=1e-10)


def test_impulse_energy_converges():
    s = consensus_example(0.1)
    g = build_cycle(4)
    m = uniform_model(g, 0.8)
    h2 = h2_exact(s, g, m, consensus=True).h2
    for horizon in (1, 5, 40):
        energy, tail = impulse_energy(s, g, m, horizon, consensus=True)
        assert energy + tail == pytest.approx(h2**2, rel=1e-11)
    energy, tail = impulse_energy(s, g, m, 200, consensus=True)
    assert tail <= 1e-12 * energy
    short, _ = impulse_energy(s, g, m, 10, consensus=True)
    assert short < energy


def test_edge_order_invariance():
    s = consensus_example(0.1)
    g = build_cycle(4)
    m = random_model(g, (0.2, 0.9), SYMMETRIC_MARKOV, 5)
    order = [2, 0, 3, 1]
    a = h2_exact(s, g, m, consensus=True).h2
    b = h2_exact(s, g.with_edge_order(order), m.with_edge_order(order), consensus=True).h2
    assert a == pytest.approx(b, rel=1e-11)


def test_single_edge_absorbing_success():
    g = UndirectedGraph(2, ((1, 2),))
    m = LossModel(g, (EdgeChain(1.0, 0.0, 1.0),))
    s = consensus_example(0.1)
    a = h2_exact(s, g, m, consensus=True).h2
    b = h2_deterministic(assemble(s, g, 1, consensus_basis(2)))
    assert a == pytest.approx(b, rel=1e-10)


def test_laplacian_sanity():
    assert laplacian(build_cycle(4)).trace() == 8


def test_closed_modes():
    g = build_cycle(3)
    chains = (EdgeChain(1.0, 0.0, 1.0), EdgeChain(0.5, 0.5, 0.5), EdgeChain(0.9, 0.0, 0.0))
    mask = closed_modes(joint_chain(LossModel(g, chains)))
    # edge 0 stuck up, edge 1 free, edge 2 starts down but can never recover
    assert sorted(np.flatnonzero(mask)) == [1, 3]
    assert closed_modes(joint_chain(uniform_model(g, 0.5))).all()
