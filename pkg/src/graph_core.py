# src/graph_core.py

from dataclasses import dataclass
from typing import Optional, Tuple
import networkx as nx
import numpy as np
from src.utils import GraphError

"""
Graph representations, spectral operators and random-graph generation:
- Graph keeps the edge list; dense matrices are derived on demand.
- build_spectral produces A, D, L, A_sym and the scaled Laplacian.
- erdos_renyi samples G(n, p) deterministically under a seed.
"""

POWER_ITERATION_TOL = 1e-6
POWER_ITERATION_MAX = 200
CONNECT_RETRIES = 100


@dataclass(frozen=True)
class Graph:
    """
    Simple graph without self-loops or multi-edges.
    Undirected graphs store every edge once with u < v.
    """
    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    weights: Optional[Tuple[float, ...]] = None
    directed: bool = False

    def __post_init__(self):
        if self.n_nodes < 0:
            raise GraphError(f"n_nodes must be nonnegative, got {self.n_nodes}")
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise GraphError(f"edge ({u}, {v}) out of range for {self.n_nodes} nodes")
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            if not self.directed and u > v:
                raise GraphError(f"undirected edge ({u}, {v}) must be stored with u < v")
            if (u, v) in seen:
                raise GraphError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
        if self.weights is not None:
            if len(self.weights) != len(self.edges):
                raise GraphError(f"{len(self.weights)} weights for {len(self.edges)} edges")
            if any(w < 0 for w in self.weights):
                raise GraphError("edge weights must be nonnegative")

    @classmethod
    def from_edges(cls, n_nodes, edges, weights=None, directed=False):
        """
        Builds a graph from any edge iterable, ordering undirected endpoints.

        Args:
            n_nodes (int): Number of nodes.
            edges (iterable): (u, v) pairs.
            weights (iterable): Optional per-edge weights.
            directed (bool): Keep edge orientation.
        """
        edges = [(int(u), int(v)) for u, v in edges]
        if not directed:
            edges = [(min(u, v), max(u, v)) for u, v in edges]
        w = None if weights is None else tuple(float(x) for x in weights)
        return cls(int(n_nodes), tuple(edges), w, bool(directed))

    @property
    def n_edges(self):
        return len(self.edges)

    def adjacency(self):
        """Dense weighted adjacency; undirected graphs give a symmetric matrix."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        for k, (u, v) in enumerate(self.edges):
            w = 1.0 if self.weights is None else self.weights[k]
            a[u, v] = w
            if not self.directed:
                a[v, u] = w
        return a

    def support(self):
        """Boolean matrix of the undirected support (no self-loops)."""
        s = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for u, v in self.edges:
            s[u, v] = True
            s[v, u] = True
        return s

    def degrees(self):
        return self.support().sum(axis=1)

    def to_networkx(self):
        g = nx.DiGraph() if self.directed else nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        for k, (u, v) in enumerate(self.edges):
            g.add_edge(u, v, weight=1.0 if self.weights is None else self.weights[k])
        return g

    def permute(self, order):
        """
        Relabels nodes so that old node order[i] becomes new node i.

        Args:
            order (sequence): A permutation of range(n_nodes).

        Returns:
            Graph: The relabelled graph with edges in the same sequence.
        """
        order = np.asarray(order)
        new_label = np.empty(self.n_nodes, dtype=int)
        new_label[order] = np.arange(self.n_nodes)
        edges = [(int(new_label[u]), int(new_label[v])) for u, v in self.edges]
        return Graph.from_edges(self.n_nodes, edges, self.weights, self.directed)


@dataclass(frozen=True)
class SpectralOperators:
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    sym_adjacency: np.ndarray
    scaled_laplacian: np.ndarray
    lambda_max: float


def path_graph(n, weights=None):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], weights)


def power_iteration_lambda(matrix, tol=POWER_ITERATION_TOL, max_iter=POWER_ITERATION_MAX):
    """
    Largest eigenvalue of a symmetric positive semidefinite matrix.

    Stops when the eigen-residual ||Mx - lx|| falls below tol * l. The returned
    value is the Rayleigh quotient plus the residual norm, which does not
    underestimate the top eigenvalue once the iterate is dominated by it.

    Args:
        matrix (np.ndarray): Symmetric PSD matrix.
        tol (float): Relative tolerance.
        max_iter (int): Iteration cap.

    Returns:
        float: Estimate of the largest eigenvalue (0.0 for the zero matrix).
    """
    n = matrix.shape[0]
    x = np.random.default_rng(0).uniform(0.5, 1.5, size=n)
    x[::2] *= -1.0
    x /= np.linalg.norm(x)
    lam = 0.0
    residual = 0.0
    for _ in range(max_iter):
        y = matrix @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        lam = float(x @ y)
        residual = float(np.linalg.norm(y - lam * x))
        if lam > 0 and residual <= tol * lam:
            break
        x = y / norm
    return lam + residual


def build_spectral(graph, normalized=False, analytic_bound=False):
    """
    Builds the dense spectral operators of a graph.

    Args:
        graph (Graph): Input graph; directed graphs use their undirected support
            with the larger of the two orientation weights.
        normalized (bool): Scale I - A_sym instead of D - A.
        analytic_bound (bool): With normalized=True, use lambda_max = 2 instead of power iteration.

    Returns:
        SpectralOperators: A, D, L, A_sym, scaled Laplacian and lambda_max.
    """
    if graph.n_nodes == 0:
        raise GraphError("cannot build spectral operators of an empty graph")
    a = graph.adjacency()
    if graph.directed:
        a = np.maximum(a, a.T)
    deg = a.sum(axis=1)
    d = np.diag(deg)
    lap = d - a
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    a_sym = inv_sqrt[:, None] * a * inv_sqrt[None, :]

    base = np.eye(graph.n_nodes) - a_sym if normalized else lap
    if normalized and analytic_bound:
        lam = 2.0
    else:
        lam = power_iteration_lambda(base)
        if lam <= 1e-12:
            # edgeless graph: L = 0, scaled operator is -I
            lam = 2.0
    scaled = 2.0 * base / lam - np.eye(graph.n_nodes)
    return SpectralOperators(a, d, lap, a_sym, scaled, float(lam))


def erdos_renyi(n, p, seed, connect=None):
    """
    Samples an undirected G(n, p) graph.

    Args:
        n (int): Number of nodes.
        p (float): Edge probability.
        seed (int | np.random.Generator): Seed or generator.
        connect (tuple): Optional (source, sink); resample until they are connected.

    Returns:
        Graph: Edges in ascending (u, v) order.
    """
    if n < 1:
        raise GraphError(f"n must be positive, got {n}")
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"p must lie in [0, 1], got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)

    attempts = CONNECT_RETRIES if connect is not None else 1
    for _ in range(attempts):
        keep = rng.random(iu.size) < p
        graph = Graph.from_edges(n, zip(iu[keep].tolist(), ju[keep].tolist()))
        if connect is None or nx.has_path(graph.to_networkx(), connect[0], connect[1]):
            return graph
    raise GraphError(f"nodes {connect[0]} and {connect[1]} stayed disconnected after {CONNECT_RETRIES} samples")


def save_graph(graph, path):
    """
    Writes the graph as structured text: `nodes: N`, optional `directed: true`,
    then one `edge u v [w]` line per edge.
    """
    with open(path, 'w', encoding='utf-8') as f:
        f.write(f"nodes: {graph.n_nodes}\n")
        if graph.directed:
            f.write("directed: true\n")
        for k, (u, v) in enumerate(graph.edges):
            if graph.weights is None:
                f.write(f"edge {u} {v}\n")
            else:
                f.write(f"edge {u} {v} {graph.weights[k]!r}\n")


def load_graph(path):
    """Reads a graph written by save_graph."""
    n_nodes = None
    directed = False
    edges, weights = [], []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "nodes:":
                n_nodes = int(parts[1])
            elif parts[0] == "directed:":
                directed = parts[1].lower() == "true"
            elif parts[0] == "edge" and len(parts) in (3, 4):
                edges.append((int(parts[1]), int(parts[2])))
                if len(parts) == 4:
                    weights.append(float(parts[3]))
            else:
                raise GraphError(f"{path}:{line_no}: unrecognized line '{line.strip()}'")
    if n_nodes is None:
        raise GraphError(f"{path}: missing 'nodes:' header")
    if weights and len(weights) != len(edges):
        raise GraphError(f"{path}: either every edge or no edge carries a weight")
    return Graph(n_nodes, tuple(edges), tuple(weights) if weights else None, directed)
