import pytest
import numpy as np
from src.graph_core import Graph, build_spectral, erdos_renyi, load_graph, path_graph, save_graph
from src.utils import GraphError


@pytest.fixture
def triangle():
    return Graph.from_edges(3, [(0, 1), (1, 2), (2, 0)])


def test_two_node_path_operators():
    # Ruční rozklad Laplaciánu cesty 0-1
    ops = build_spectral(path_graph(2))
    assert np.allclose(ops.laplacian, [[1, -1], [-1, 1]])
    assert ops.lambda_max == pytest.approx(2.0, abs=1e-6)
    assert np.allclose(ops.scaled_laplacian, [[0, -1], [-1, 0]], atol=1e-6)


def test_edgeless_graph_operators():
    ops = build_spectral(Graph.from_edges(3, []))
    assert np.all(ops.laplacian == 0)
    assert np.all(ops.sym_adjacency == 0)
    assert np.allclose(ops.scaled_laplacian, -np.eye(3))


def test_triangle_laplacian(triangle):
    ops = build_spectral(triangle)
    assert np.all(np.abs(ops.laplacian.sum(axis=1)) < 1e-10)
    assert np.allclose(ops.adjacency, ops.adjacency.T)
    assert np.all(np.diag(ops.adjacency) == 0)
    eig = np.linalg.eigvalsh(ops.scaled_laplacian)
    assert eig.min() >= -1 - 1e-8
    assert eig.max() <= 1 + 1e-8


def test_normalized_analytic_bound(triangle):
    ops = build_spectral(triangle, normalized=True, analytic_bound=True)
    assert ops.lambda_max == 2.0
    assert np.allclose(ops.scaled_laplacian, -ops.sym_adjacency)


def test_empty_graph_rejected():
    with pytest.raises(GraphError):
        build_spectral(Graph.from_edges(0, []))


def test_invalid_edges_rejected():
    with pytest.raises(GraphError):
        Graph(3, ((0, 0),))
    with pytest.raises(GraphError):
        Graph(3, ((2, 1),))
    with pytest.raises(GraphError):
        Graph(3, ((0, 1), (0, 1)))
    with pytest.raises(GraphError):
        Graph(3, ((0, 1),), weights=(1.0, 2.0))


def test_erdos_renyi_extremes():
    assert erdos_renyi(4, 1.0, seed=3).n_edges == 6
    assert erdos_renyi(5, 0.0, seed=3).n_edges == 0


def test_erdos_renyi_deterministic():
    # Stejný seed musí dát stejný seznam hran
    assert erdos_renyi(16, 0.3, seed=7).edges == erdos_renyi(16, 0.3, seed=7).edges


def test_erdos_renyi_invalid_probability():
    with pytest.raises(GraphError):
        erdos_renyi(4, 1.5, seed=0)


def test_permute_relabels_nodes():
    g = path_graph(3)
    permuted = g.permute([2, 0, 1])
    # staré uzly 2, 0, 1 jsou nové 0, 1, 2
    assert set(permuted.edges) == {(1, 2), (0, 2)}
    a = g.adjacency()
    order = np.array([2, 0, 1])
    assert np.allclose(permuted.adjacency(), a[np.ix_(order, order)])


def test_degrees_and_networkx(triangle):
    assert triangle.degrees().tolist() == [2, 2, 2]
    assert triangle.to_networkx().number_of_edges() == 3


def test_save_and_load_graph(tmp_path):
    g = Graph.from_edges(4, [(0, 1), (1, 3)], weights=[0.5, 2.0])
    path = tmp_path / "graph.txt"
    save_graph(g, str(path))
    assert load_graph(str(path)) == g


def test_load_graph_rejects_garbage(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("nodes: 3\nvertex 0 1\n", encoding="utf-8")
    with pytest.raises(GraphError):
        load_graph(str(path))


@pytest.fixture
def random_graphs():
    rng = np.random.default_rng(17)
    return [erdos_renyi(int(rng.integers(2, 11)), float(rng.uniform(0.2, 0.8)), rng) for _ in range(50)]


def test_laplacian_is_positive_semidefinite(random_graphs):
    rng = np.random.default_rng(0)
    for g in random_graphs:
        lap = build_spectral(g).laplacian
        for _ in range(100):
            x = rng.normal(size=g.n_nodes)
            assert x @ lap @ x >= -1e-9


def test_sym_adjacency_spectral_radius(random_graphs):
    for g in random_graphs:
        eig = np.linalg.eigvalsh(build_spectral(g).sym_adjacency)
        assert np.abs(eig).max() <= 1 + 1e-8


def test_scaled_laplacian_spectrum(random_graphs):
    # Vlastní čísla škálovaného Laplaciánu leží v [-1, 1]
    for g in random_graphs:
        for normalized in (False, True):
            eig = np.linalg.eigvalsh(build_spectral(g, normalized=normalized).scaled_laplacian)
            assert eig.min() >= -1 - 1e-8
            assert eig.max() <= 1 + 1e-8


def test_erdos_renyi_edge_count_distribution():
    rng = np.random.default_rng(5)
    counts = np.array([erdos_renyi(10, 0.3, rng).n_edges for _ in range(1000)])
    # 45 dvojic, každá s pravděpodobností 0.3; směrodatná odchylka průměru
    sigma = np.sqrt(45 * 0.3 * 0.7 / 1000)
    assert abs(counts.mean() - 13.5) <= 3 * sigma
