import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mjlsnet.graphs import (
    UndirectedGraph,
    build_cycle,
    build_triangle,
    incidence,
    laplacian,
    parse_graph_spec,
    read_edge_list,
    spectrum,
    write_edge_list,
)


def test_cycle_edges():
    assert set(build_cycle(4).edges) == {(1, 2), (2, 3), (3, 4), (1, 4)}
    assert build_cycle(3).edge_count == 3


def test_cycle_rejects_small():
    with pytest.raises(ValueError):
        build_cycle(2)


def test_six_cycle_spectrum():
    eig = spectrum(laplacian(build_cycle(6))).eigenvalues
    np.testing.assert_allclose(eig, [0, 1, 1, 3, 3, 4], atol=1e-12)


@pytest.mark.parametrize("n", [3, 4, 5, 8, 11])
def test_cycle_spectrum_closed_form(n):
    eig = spectrum(laplacian(build_cycle(n))).eigenvalues
    expected = np.sort(2 - 2 * np.cos(2 * np.pi * np.arange(n) / n))
    np.testing.assert_allclose(eig, expected, atol=1e-12)


def test_triangle_small():
    g = build_triangle(2)
    assert g.vertex_count == 3
    assert set(g.edges) == {(1, 2), (1, 3), (2, 3)}
    g1 = build_triangle(1)
    assert g1.vertex_count == 1 and g1.edge_count == 0
    g3 = build_triangle(3)
    assert g3.vertex_count == 6 and g3.edge_count == 9


@pytest.mark.parametrize("rows", [2, 3, 4, 9, 20])
def test_triangle_counts(rows):
    g = build_triangle(rows)
    assert g.vertex_count == rows * (rows + 1) // 2
    assert g.edge_count == 3 * rows * (rows - 1) // 2


def test_incidence_single_edge():
    phi = incidence(UndirectedGraph(2, ((1, 2),)))
    np.testing.assert_array_equal(phi[:, 0] * phi[0, 0], [1, -1])
    np.testing.assert_array_equal(phi @ phi.T, [[1, -1], [-1, 1]])


def test_incidence_cycle_degrees():
    phi = incidence(build_cycle(4))
    np.testing.assert_array_equal(np.diag(phi @ phi.T), [2, 2, 2, 2])


def test_laplacian_cases():
    np.testing.assert_array_equal(laplacian(UndirectedGraph(3, ())), np.zeros((3, 3)))
    np.testing.assert_array_equal(laplacian(build_triangle(2)), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])


def test_spectrum_groups():
    sp = spectrum(laplacian(build_triangle(2)))
    assert sp.zero_count == 1
    assert len(sp.dedup_groups) == 2
    assert sp.dedup_groups[0] == (0.0, 1)
    assert sp.dedup_groups[1][1] == 2
    assert abs(sp.dedup_groups[1][0] - 3.0) < 1e-12
    np.testing.assert_allclose(spectrum(laplacian(build_cycle(4))).eigenvalues, [0, 2, 2, 4], atol=1e-12)
    assert spectrum(np.zeros((2, 2))).zero_count == 2


def test_spectrum_banded_path_matches_dense():
    lap = laplacian(build_triangle(12))
    dense = spectrum(lap).eigenvalues
    banded = spectrum(lap, dense_threshold=10).eigenvalues
    np.testing.assert_allclose(banded, dense, atol=1e-10)


def test_spectrum_rejects_asymmetric():
    with pytest.raises(ValueError):
        spectrum(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_graph_validation():
    with pytest.raises(ValueError):
        UndirectedGraph(2, ((1, 1),))
    with pytest.raises(ValueError):
        UndirectedGraph(2, ((1, 2), (2, 1)))
    with pytest.raises(ValueError):
        UndirectedGraph(2, ((1, 3),))


def test_edge_list_roundtrip(tmp_path):
    g = build_triangle(4)
    path = tmp_path / "g.txt"
    write_edge_list(g, path)
    assert read_edge_list(path) == g
    assert parse_graph_spec(f"file:{path}") == g
    assert parse_graph_spec("cycle:5") == build_cycle(5)
    with pytest.raises(ValueError):
        parse_graph_spec("star:4")


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=3, max_value=9), st.data())
def test_laplacian_properties(n, data):
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    chosen = data.draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)))
    g = UndirectedGraph(n, tuple(chosen))
    lap = laplacian(g)
    phi = incidence(g)
    np.testing.assert_array_equal(lap, phi @ phi.T)
    np.testing.assert_array_equal(lap.sum(axis=1), 0)
    sp = spectrum(lap)
    assert sp.eigenvalues[0] > -1e-9
    assert sum(k for _, k in sp.dedup_groups) == n
