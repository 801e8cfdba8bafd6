# src/maxflow.py

import itertools
import json
from dataclasses import dataclass, field
from typing import List
import numpy as np
from src.graph_core import Graph, erdos_renyi
from src.utils import ArtifactError, GraphError

"""
Exact Ford-Fulkerson with Bellman-Ford augmenting paths.
- Every subroutine application is recorded as a TrajectoryStep (the hints).
- The flow update signs follow the classical textbook listing verbatim:
  pushing c_p along u -> v does F[u][v] -= c_p and F[v][u] += c_p, so the
  max-flow value is the net flow recorded in the source column.
"""

PATH = "PATH"
AUGMENT = "AUGMENT"
MAX_BRUTEFORCE_NODES = 20
INSTANCE_ATTEMPTS = 20


@dataclass
class FlowInstance:
    """
    Capacitated max-flow problem on the undirected support of graph.
    capacity[u][v] is the capacity of arc u -> v.
    """
    graph: Graph
    capacity: np.ndarray
    source: int
    sink: int
    tie_weights: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        n = self.graph.n_nodes
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        self.tie_weights = np.asarray(self.tie_weights, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.capacity.shape != (n, n) or self.tie_weights.shape != (n, n):
            raise GraphError(f"capacity {self.capacity.shape} and tie weights {self.tie_weights.shape} must be ({n}, {n})")
        if self.positions.shape != (n,):
            raise GraphError(f"positions must have shape ({n},), got {self.positions.shape}")
        if not (0 <= self.source < n and 0 <= self.sink < n):
            raise GraphError(f"source {self.source} / sink {self.sink} out of range")
        if np.any(self.capacity < 0):
            raise GraphError("capacities must be nonnegative")
        if np.any(self.capacity[~self.graph.support()] != 0):
            raise GraphError("capacity must be zero on non-edges")
        if np.any(self.tie_weights <= 0):
            raise GraphError("tie weights must be positive")

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @classmethod
    def from_arcs(cls, n_nodes, arcs, source, sink, tie_weights=None):
        """
        Builds an instance from a {(u, v): capacity} mapping.

        Args:
            n_nodes (int): Number of nodes.
            arcs (dict): Arc capacities.
            source (int): Source node.
            sink (int): Sink node.
            tie_weights (np.ndarray): Optional shortest-path weights, ones by default.
        """
        capacity = np.zeros((n_nodes, n_nodes))
        for (u, v), c in arcs.items():
            capacity[u, v] = c
        support = sorted({(min(u, v), max(u, v)) for u, v in arcs})
        graph = Graph.from_edges(n_nodes, support)
        if tie_weights is None:
            tie_weights = np.ones((n_nodes, n_nodes))
        return cls(graph, capacity, source, sink, tie_weights, linear_positions(n_nodes))

    def location_indicator(self):
        """+1 at the source, -1 at the sink, 0 elsewhere."""
        x = np.zeros(self.n_nodes)
        x[self.source] = 1.0
        x[self.sink] = -1.0
        return x


@dataclass
class TrajectoryStep:
    subroutine: str
    path_mask: np.ndarray
    predecessors: np.ndarray
    c_p: float
    flow: np.ndarray
    capacity: np.ndarray


@dataclass
class Trajectory:
    instance: FlowInstance
    steps: List[TrajectoryStep] = field(default_factory=list)
    final_flow: np.ndarray = None
    max_flow_value: float = 0.0


def linear_positions(n):
    if n == 1:
        return np.zeros(1)
    return np.arange(n) / (n - 1)


def net_source_outflow(flow, source):
    """Max-flow value under the recorded sign convention: sum_v F[v][source]."""
    return float(np.sum(flow[:, source]))


def bellman_ford(residual, weights, source):
    """
    Shortest-path tree under `weights` over the arcs with positive residual.

    Arcs are relaxed in ascending (u, v) order for n - 1 rounds and only a
    strictly shorter distance replaces a predecessor, so ties resolve to the
    first arc seen.

    Args:
        residual (np.ndarray): n x n residual capacities.
        weights (np.ndarray): n x n positive arc weights.
        source (int): Start node.

    Returns:
        np.ndarray: Predecessor of every node; the source and unreachable nodes point to themselves.
    """
    n = residual.shape[0]
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    pred = np.arange(n)
    arcs = np.argwhere(residual > 0)
    for _ in range(n - 1):
        changed = False
        for u, v in arcs:
            if dist[u] + weights[u, v] < dist[v]:
                dist[v] = dist[u] + weights[u, v]
                pred[v] = u
                changed = True
        if not changed:
            break
    return pred


def extract_path(pred, source, sink):
    """
    Follows predecessors back from the sink.

    Returns:
        list: Nodes from source to sink, or None if the sink is unreachable.
    """
    if sink != source and pred[sink] == sink:
        return None
    path = [sink]
    v = sink
    while v != source:
        v = int(pred[v])
        if v in path:
            raise GraphError("predecessor cycle while extracting path")
        path.append(v)
    return path[::-1]


def ford_fulkerson(instance):
    """
    Runs Ford-Fulkerson and records its hint trajectory.

    Steps alternate PATH (path found on the current residual capacities, F/C as
    they stand) and AUGMENT (same path, F/C after augmentation). The run ends
    with a PATH step whose mask is all zero.

    Args:
        instance (FlowInstance): Problem instance.

    Returns:
        Trajectory: Steps, final flow and max-flow value.
    """
    s, t = instance.source, instance.sink
    if s == t:
        raise GraphError(f"source and sink must differ, both are {s}")
    n = instance.n_nodes
    C = instance.capacity.copy()
    F = np.zeros((n, n))
    steps = []
    while True:
        pred = bellman_ford(C, instance.tie_weights, s)
        path = extract_path(pred, s, t)
        mask = np.zeros(n)
        if path is None:
            steps.append(TrajectoryStep(PATH, mask, pred, 0.0, F.copy(), C.copy()))
            break
        arcs = list(zip(path[:-1], path[1:]))
        c_p = min(C[u, v] for u, v in arcs)
        mask[path] = 1.0
        steps.append(TrajectoryStep(PATH, mask, pred, float(c_p), F.copy(), C.copy()))
        for u, v in arcs:
            F[u, v] -= c_p
            F[v, u] += c_p
            C[u, v] -= c_p
            C[v, u] += c_p
        steps.append(TrajectoryStep(AUGMENT, mask.copy(), pred.copy(), float(c_p), F.copy(), C.copy()))
    return Trajectory(instance, steps, F, net_source_outflow(F, s))


def min_cut_bruteforce(instance):
    """
    Minimum s/t cut by enumerating all partitions of the internal nodes.

    Args:
        instance (FlowInstance): Problem instance with at most 20 nodes.

    Returns:
        float: Minimum total capacity of arcs leaving the source side.
    """
    n = instance.n_nodes
    if n > MAX_BRUTEFORCE_NODES:
        raise GraphError(f"brute-force min cut limited to {MAX_BRUTEFORCE_NODES} nodes, got {n}")
    s, t = instance.source, instance.sink
    if s == t:
        raise GraphError(f"source and sink must differ, both are {s}")
    internal = [v for v in range(n) if v not in (s, t)]
    cap = instance.capacity
    best = np.inf
    for bits in itertools.product((False, True), repeat=len(internal)):
        side = np.zeros(n, dtype=bool)
        side[s] = True
        side[[v for v, b in zip(internal, bits) if b]] = True
        best = min(best, float(cap[side][:, ~side].sum()))
    return best


def validate_trajectory(trajectory, tol_skew=1e-12, tol_conservation=1e-9):
    """
    Checks the trajectory invariants.

    Returns:
        list: Human-readable violations; empty when the trajectory is valid.
    """
    inst = trajectory.instance
    s, t = inst.source, inst.sink
    problems = []
    steps = trajectory.steps
    if not steps:
        return ["trajectory has no steps"]
    for k, step in enumerate(steps):
        expected = PATH if k % 2 == 0 else AUGMENT
        if step.subroutine != expected:
            problems.append(f"step {k}: expected {expected}, got {step.subroutine}")
        F = step.flow
        if np.max(np.abs(F + F.T)) > tol_skew:
            problems.append(f"step {k}: flow is not skew-symmetric")
        if np.any(F.T - inst.capacity > tol_conservation):
            problems.append(f"step {k}: flow exceeds capacity")
        if step.subroutine == PATH and step.path_mask.any():
            path = extract_path(step.predecessors, s, t)
            if path is None or sorted(path) != sorted(np.flatnonzero(step.path_mask).tolist()):
                problems.append(f"step {k}: predecessors do not trace the masked path")
            elif step.c_p <= 0 or any(step.capacity[u, v] <= 0 for u, v in zip(path[:-1], path[1:])):
                problems.append(f"step {k}: path has no positive residual bottleneck")
    last = steps[-1]
    if last.subroutine != PATH or last.path_mask.any():
        problems.append("trajectory does not end with an empty PATH step")
    inflow = trajectory.final_flow.sum(axis=0)
    for v in range(inst.n_nodes):
        if v not in (s, t) and abs(inflow[v]) > tol_conservation:
            problems.append(f"node {v}: flow not conserved ({inflow[v]:.3g})")
    if abs(net_source_outflow(trajectory.final_flow, s) - trajectory.max_flow_value) > tol_conservation:
        problems.append("max_flow_value disagrees with the final flow")
    return problems


def random_flow_instance(n, p, seed, max_capacity=10, require_connected=True):
    """
    Samples an Erdos-Renyi max-flow instance.

    Capacities are independent integers in [1, max_capacity] per arc orientation,
    tie weights are symmetric and uniform on (0, 1].

    Args:
        n (int): Number of nodes.
        p (float): Edge probability.
        seed (int | np.random.Generator): Randomness.
        max_capacity (int): Largest capacity.
        require_connected (bool): Resample until source and sink are connected.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for attempt in range(INSTANCE_ATTEMPTS):
        s, t = (int(x) for x in rng.choice(n, size=2, replace=False))
        try:
            graph = erdos_renyi(n, p, rng, connect=(s, t) if require_connected else None)
            break
        except GraphError:
            if p == 0.0 or attempt == INSTANCE_ATTEMPTS - 1:
                raise GraphError(f"no connected source/sink pair for n={n}, p={p} after {INSTANCE_ATTEMPTS} "
                                 f"source/sink draws") from None
    capacity = np.zeros((n, n))
    for u, v in graph.edges:
        capacity[u, v] = rng.integers(1, max_capacity + 1)
        capacity[v, u] = rng.integers(1, max_capacity + 1)
    w = 1.0 - rng.random((n, n))
    w = np.triu(w, 1)
    w = w + w.T
    np.fill_diagonal(w, 1.0)
    return FlowInstance(graph, capacity, s, t, w, linear_positions(n))


def _instance_record(trajectory):
    inst = trajectory.instance
    return {
        "record": "instance",
        "n_nodes": inst.n_nodes,
        "edges": [list(e) for e in inst.graph.edges],
        "capacity": inst.capacity.tolist(),
        "source": inst.source,
        "sink": inst.sink,
        "tie_weights": inst.tie_weights.tolist(),
        "positions": inst.positions.tolist(),
        "max_flow_value": trajectory.max_flow_value,
        "n_steps": len(trajectory.steps),
    }


def _step_record(index, step):
    return {
        "record": "step",
        "index": index,
        "subroutine": step.subroutine,
        "path_mask": step.path_mask.tolist(),
        "predecessors": [int(x) for x in step.predecessors],
        "c_p": step.c_p,
        "flow": step.flow.tolist(),
        "capacity": step.capacity.tolist(),
    }


def save_trajectories(path, trajectories):
    """
    Writes trajectories as NDJSON: one instance header followed by its steps.
    """
    with open(path, 'w', encoding='utf-8') as f:
        for trajectory in trajectories:
            f.write(json.dumps(_instance_record(trajectory)) + "\n")
            for k, step in enumerate(trajectory.steps):
                f.write(json.dumps(_step_record(k, step)) + "\n")


def load_trajectories(path):
    """Reads trajectories written by save_trajectories."""
    trajectories = []
    current = None
    try:
        f = open(path, 'r', encoding='utf-8')
    except OSError as e:
        raise ArtifactError(f"Cannot read trajectories '{path}': {e}. Run gen-trajectories first.") from e
    with f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") == "instance":
                graph = Graph(rec["n_nodes"], tuple(tuple(e) for e in rec["edges"]))
                inst = FlowInstance(graph, np.array(rec["capacity"]), rec["source"], rec["sink"],
                                    np.array(rec["tie_weights"]), np.array(rec["positions"]))
                current = Trajectory(inst, [], None, rec["max_flow_value"])
                trajectories.append(current)
            elif rec.get("record") == "step" and current is not None:
                current.steps.append(TrajectoryStep(
                    rec["subroutine"],
                    np.array(rec["path_mask"], dtype=np.float64),
                    np.array(rec["predecessors"], dtype=int),
                    rec["c_p"],
                    np.array(rec["flow"], dtype=np.float64),
                    np.array(rec["capacity"], dtype=np.float64),
                ))
            else:
                raise ArtifactError(f"{path}:{line_no}: unexpected record")
    for trajectory in trajectories:
        if not trajectory.steps:
            raise ArtifactError(f"{path}: instance without steps")
        trajectory.final_flow = trajectory.steps[-1].flow.copy()
    return trajectories
