# src/wdn_sim.py

import os
from dataclasses import dataclass, field, replace
from typing import List, Tuple
import networkx as nx
import numpy as np
import pandas as pd
from src.graph_core import Graph, load_graph, save_graph
from src.logger import logger
from src.utils import ArtifactError, GraphError, SolverError, read_json, write_json
from src.workers import run_jobs

"""
Synthetic water distribution networks and a steady-state hydraulic solver:
- Pipes follow a quadratic head-loss law h_u - h_v = sign(q) R q^2.
- Junction heads are found by damped Newton iteration, the reservoir head is fixed.
- Leaks are pressure-dependent emitters at the lower-index endpoint of a pipe.
"""

STEPS_PER_DAY = 288
SOLVER_TOL = 1e-8
SOLVER_MAX_ITER = 100
MAX_HALVINGS = 30
LINEAR_ZONE = 1e-6
TARGET_MEAN_DEGREE = 3.0
ROUGHNESS_RANGE = (0.5, 2.0)
ELEVATION_RANGE = (0.0, 10.0)
RESERVOIR_OFFSET = 0.05


@dataclass
class WdnTopology:
    """
    Junctions plus one reservoir node with fixed head.
    resistance is aligned with graph.edges; elevations and coordinates cover all nodes.
    """
    graph: Graph
    reservoir_node: int
    reservoir_head: float
    resistance: np.ndarray
    elevations: np.ndarray
    coordinates: np.ndarray

    def __post_init__(self):
        self.resistance = np.asarray(self.resistance, dtype=np.float64)
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        self.coordinates = np.asarray(self.coordinates, dtype=np.float64)
        n = self.graph.n_nodes
        if self.resistance.shape != (self.graph.n_edges,) or np.any(self.resistance <= 0):
            raise GraphError("every pipe needs a positive resistance")
        if self.elevations.shape != (n,):
            raise GraphError(f"elevations must have shape ({n},)")
        if not 0 <= self.reservoir_node < n or self.graph.degrees()[self.reservoir_node] < 1:
            raise GraphError("reservoir must be a node with at least one pipe")
        if not nx.is_connected(self.graph.to_networkx()):
            raise GraphError("network must be connected")

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def junctions(self):
        return np.array([v for v in range(self.n_nodes) if v != self.reservoir_node])

    def to_dict(self):
        return {
            "reservoir_node": self.reservoir_node,
            "reservoir_head": self.reservoir_head,
            "resistance": self.resistance.tolist(),
            "elevations": self.elevations.tolist(),
            "coordinates": self.coordinates.tolist(),
        }


@dataclass
class DemandScenario:
    base_demand: np.ndarray
    daily_pattern: np.ndarray
    noise_sigma: float
    duration: int

    def __post_init__(self):
        self.base_demand = np.asarray(self.base_demand, dtype=np.float64)
        self.daily_pattern = np.asarray(self.daily_pattern, dtype=np.float64)
        if np.any(self.base_demand < 0):
            raise ValueError("base demands must be nonnegative")
        if np.any(self.daily_pattern <= 0):
            raise ValueError("pattern multipliers must be positive")
        if self.duration < 1:
            raise ValueError("duration must be positive")


@dataclass
class LeakEvent:
    pipe: int
    start: int
    end: int
    emitter_coeff: float

    def active(self, t):
        return self.start <= t < self.end


@dataclass
class SensorConfig:
    sensor_nodes: Tuple[int, ...]
    noise_sigma: float

    def mask(self, n_nodes):
        m = np.zeros(n_nodes, dtype=bool)
        m[list(self.sensor_nodes)] = True
        return m


@dataclass
class SolveResult:
    head: np.ndarray
    pressure: np.ndarray
    flow: np.ndarray
    leak_outflow: np.ndarray
    iterations: int
    residual: float
    negative_pressure: bool


@dataclass
class SimulationResult:
    """Time series (duration x n) of one simulated split."""
    pressures: np.ndarray
    leak_free: np.ndarray
    measured: np.ndarray
    observed: np.ndarray
    sensor_mask: np.ndarray
    leaks: List[LeakEvent] = field(default_factory=list)
    sensor_noise: float = 0.0


def default_daily_pattern():
    """Diurnal demand multipliers at 5-minute resolution with morning and evening peaks."""
    hours = np.arange(STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    return 0.6 + 0.5 * np.exp(-((hours - 7.5) / 1.5) ** 2) + 0.4 * np.exp(-((hours - 19.0) / 2.0) ** 2)


def generate_topology(n_junctions, seed, reservoir_head=60.0, resistance_scale=0.01):
    """
    Random geometric network on the unit square.

    Args:
        n_junctions (int): Number of junctions (at least 8).
        seed (int): Randomness.
        reservoir_head (float): Fixed reservoir head (m).
        resistance_scale (float): Multiplier from pipe length to resistance.

    Returns:
        WdnTopology: Junctions 0..n-1 and the reservoir as node n.
    """
    if n_junctions < 8:
        raise GraphError(f"need at least 8 junctions, got {n_junctions}")
    rng = np.random.default_rng(seed)
    pts = rng.random((n_junctions, 2))
    radius = np.sqrt(TARGET_MEAN_DEGREE / (np.pi * n_junctions))
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    g = nx.Graph()
    g.add_nodes_from(range(n_junctions))
    iu, ju = np.triu_indices(n_junctions, k=1)
    close = dist[iu, ju] <= radius
    g.add_edges_from(zip(iu[close].tolist(), ju[close].tolist()))

    # bridge components with their shortest connecting edge
    while not nx.is_connected(g):
        components = sorted(nx.connected_components(g), key=min)
        first = np.array(sorted(components[0]))
        rest = np.array(sorted(set(range(n_junctions)) - set(first)))
        block = dist[np.ix_(first, rest)]
        a, b = np.unravel_index(np.argmin(block), block.shape)
        g.add_edge(int(first[a]), int(rest[b]))

    reservoir = n_junctions
    anchor = int(np.argmin(pts[:, 0]))
    coords = np.vstack([pts, [pts[anchor, 0] - RESERVOIR_OFFSET, pts[anchor, 1]]])
    edges = sorted((min(u, v), max(u, v)) for u, v in g.edges())
    edges.append((anchor, reservoir))
    lengths = np.array([np.linalg.norm(coords[u] - coords[v]) for u, v in edges])
    roughness = rng.uniform(*ROUGHNESS_RANGE, size=len(edges))
    elevations = np.append(rng.uniform(*ELEVATION_RANGE, size=n_junctions), 0.0)
    graph = Graph.from_edges(n_junctions + 1, edges)
    return WdnTopology(graph, reservoir, float(reservoir_head), lengths * roughness * resistance_scale,
                       elevations, coords)


def perturb_resistances(topology, fraction, seed):
    """Copy of the topology with every resistance scaled by U[1 - fraction, 1 + fraction]."""
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - fraction, 1.0 + fraction, size=topology.resistance.shape)
    return replace(topology, resistance=topology.resistance * factors)


def random_sensors(topology, count, seed):
    """Sorted random subset of junctions."""
    junctions = topology.junctions
    if not 1 <= count <= len(junctions):
        raise ValueError(f"sensor count must be in [1, {len(junctions)}], got {count}")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(v) for v in rng.choice(junctions, size=count, replace=False)))


def random_base_demand(topology, low, high, seed):
    rng = np.random.default_rng(seed)
    demand = rng.uniform(low, high, size=topology.n_nodes)
    demand[topology.reservoir_node] = 0.0
    return demand


def random_leaks(topology, count, duration, seed, emitter_coeff=0.5, start_after=576, min_duration=576):
    """
    Leak events on distinct pipes not attached to the reservoir.

    Returns:
        list: LeakEvent objects sorted by start.
    """
    if start_after + min_duration > duration:
        raise ValueError(f"duration {duration} too short for leaks starting after {start_after} "
                         f"and lasting {min_duration} steps")
    rng = np.random.default_rng(seed)
    candidates = [k for k, (u, v) in enumerate(topology.graph.edges)
                  if topology.reservoir_node not in (u, v)]
    pipes = rng.choice(candidates, size=count, replace=False)
    leaks = []
    for pipe in pipes:
        start = int(rng.integers(start_after, duration - min_duration + 1))
        end = int(rng.integers(start + min_duration, duration + 1))
        leaks.append(LeakEvent(int(pipe), start, end, float(emitter_coeff)))
    return sorted(leaks, key=lambda e: e.start)


def _pipe_law(dh, resistance):
    """Flow and its derivative; linear inside a tiny zone around dh = 0."""
    small = np.abs(dh) < LINEAR_ZONE
    safe = np.where(small, LINEAR_ZONE, np.abs(dh))
    q = np.where(small, dh / np.sqrt(resistance * LINEAR_ZONE), np.sign(dh) * np.sqrt(safe / resistance))
    dq = np.where(small, 1.0 / np.sqrt(resistance * LINEAR_ZONE), 0.5 / np.sqrt(resistance * safe))
    return q, dq


def _emitter_law(pressure, coeff):
    small = pressure < LINEAR_ZONE
    leak = np.where(small, coeff * np.maximum(pressure, 0.0) / np.sqrt(LINEAR_ZONE),
                    coeff * np.sqrt(np.maximum(pressure, LINEAR_ZONE)))
    dleak = np.where(pressure <= 0, 0.0, np.where(small, coeff / np.sqrt(LINEAR_ZONE),
                                                  0.5 * coeff / np.sqrt(np.maximum(pressure, LINEAR_ZONE))))
    return leak, dleak


def _balance(topology, head, demands, emitters):
    eu = np.array([u for u, _ in topology.graph.edges])
    ev = np.array([v for _, v in topology.graph.edges])
    q, dq = _pipe_law(head[eu] - head[ev], topology.resistance)
    n = topology.n_nodes
    inflow = np.zeros(n)
    np.add.at(inflow, ev, q)
    np.add.at(inflow, eu, -q)
    leak, dleak = _emitter_law(head - topology.elevations, emitters)
    residual = inflow - demands - leak
    jac = np.zeros((n, n))
    np.add.at(jac, (eu, eu), -dq)
    np.add.at(jac, (ev, ev), -dq)
    np.add.at(jac, (eu, ev), dq)
    np.add.at(jac, (ev, eu), dq)
    jac[np.diag_indices(n)] -= dleak
    return residual, jac, q, leak


def steady_state_solve(topology, demands, leaks=(), supply_bound=None, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER):
    """
    Solves nodal mass balance for the junction heads.

    Args:
        topology (WdnTopology): Network.
        demands (np.ndarray): Per-node demand (m3/h); the reservoir entry is ignored.
        leaks (iterable): Active LeakEvent objects.
        supply_bound (float): Optional bound on total demand.

    Returns:
        SolveResult: Heads, pressures, pipe flows (u -> v along graph.edges) and leak outflows.
    """
    n = topology.n_nodes
    res = topology.reservoir_node
    demands = np.asarray(demands, dtype=np.float64).copy()
    if demands.shape != (n,):
        raise SolverError(f"demands must have shape ({n},), got {demands.shape}")
    demands[res] = 0.0
    if supply_bound is not None and demands.sum() >= supply_bound:
        raise SolverError(f"total demand {demands.sum():.3f} exceeds the supply bound {supply_bound}")
    emitters = np.zeros(n)
    for leak in leaks:
        node = topology.graph.edges[leak.pipe][0]
        emitters[node] += leak.emitter_coeff
    emitters[res] = 0.0
    free = topology.junctions

    head = np.full(n, topology.reservoir_head)
    if demands.any() or emitters.any():
        # linearized start: unit-head-loss conductances
        g = 1.0 / np.sqrt(topology.resistance)
        lap = np.zeros((n, n))
        for (u, v), c in zip(topology.graph.edges, g):
            lap[u, u] += c
            lap[v, v] += c
            lap[u, v] -= c
            lap[v, u] -= c
        rhs = -demands[free] - lap[np.ix_(free, [res])][:, 0] * topology.reservoir_head
        head[free] = np.linalg.solve(lap[np.ix_(free, free)], rhs)

    residual, jac, q, leak = _balance(topology, head, demands, emitters)
    norm = np.max(np.abs(residual[free])) if len(free) else 0.0
    iterations = 0
    while norm >= tol:
        if iterations >= max_iter:
            raise SolverError(f"Newton solver did not converge after {max_iter} iterations "
                              f"(max nodal imbalance {norm:.3e} m3/h)")
        iterations += 1
        try:
            step = np.linalg.solve(jac[np.ix_(free, free)], -residual[free])
        except np.linalg.LinAlgError as e:
            raise SolverError(f"singular Jacobian at iteration {iterations}: {e}") from e
        alpha = 1.0
        for _ in range(MAX_HALVINGS):
            trial = head.copy()
            trial[free] += alpha * step
            t_res, t_jac, t_q, t_leak = _balance(topology, trial, demands, emitters)
            t_norm = np.max(np.abs(t_res[free]))
            if t_norm < norm:
                break
            alpha *= 0.5
        else:
            logger.warning(f"Newton iteration {iterations}: no step halving reduced the max nodal imbalance "
                           f"{norm:.3e} m3/h, keeping the shortest step")
        head, residual, jac, q, leak, norm = trial, t_res, t_jac, t_q, t_leak, t_norm

    pressure = head - topology.elevations
    negative = bool(np.any(pressure[free] < 0))
    if negative:
        logger.warning(f"Negative pressure at nodes {np.flatnonzero(pressure < 0).tolist()}")
    return SolveResult(head, pressure, q, leak, iterations, float(norm), negative)


def _simulate_step(topology, scenario, leaks, child, t, supply_bound):
    rng = np.random.default_rng(child)
    pattern = scenario.daily_pattern[t % len(scenario.daily_pattern)]
    noise = rng.standard_normal(topology.n_nodes)
    demands = np.maximum(scenario.base_demand * pattern * (1.0 + scenario.noise_sigma * noise), 0.0)
    sensor_noise = rng.standard_normal(topology.n_nodes)
    active = [leak for leak in leaks if leak.active(t)]
    try:
        clean = steady_state_solve(topology, demands, (), supply_bound)
        leaky = steady_state_solve(topology, demands, active, supply_bound) if active else clean
    except SolverError as e:
        raise SolverError(f"timestep {t}: {e}") from e
    return leaky.pressure, clean.pressure, sensor_noise


def simulate(topology, scenario, leaks, sensors, seed, jobs=1, supply_bound=None):
    """
    Simulates a pressure time series with leaks and noisy sensors.

    Every timestep draws its demand and sensor noise from its own seed stream,
    so results do not depend on the number of worker threads.

    Args:
        topology (WdnTopology): Network.
        scenario (DemandScenario): Demands and duration.
        leaks (list): LeakEvent objects.
        sensors (SensorConfig): Sensor placement and noise.
        seed (int): Scenario seed.
        jobs (int): Worker threads.

    Returns:
        SimulationResult: actual and leak-free pressures, noisy readings at all
        nodes and the sensor-masked observations.
    """
    n = topology.n_nodes
    for leak in leaks:
        if not 0 <= leak.start < leak.end <= scenario.duration:
            raise ValueError(f"leak interval [{leak.start}, {leak.end}) outside duration {scenario.duration}")
        if not 0 <= leak.pipe < topology.graph.n_edges:
            raise ValueError(f"leak pipe {leak.pipe} does not exist")
    if scenario.base_demand.shape != (n,):
        raise ValueError(f"base demand must have shape ({n},)")
    mask = sensors.mask(n)
    if not mask.any() or mask[topology.reservoir_node]:
        raise ValueError("sensors must be a nonempty set of junctions")
    children = np.random.SeedSequence(seed).spawn(scenario.duration)
    steps = run_jobs(lambda item: _simulate_step(topology, scenario, leaks, item[1], item[0], supply_bound),
                     list(enumerate(children)), jobs)
    pressures = np.array([s[0] for s in steps])
    leak_free = np.array([s[1] for s in steps])
    measured = pressures + sensors.noise_sigma * np.array([s[2] for s in steps])
    observed = np.where(mask, measured, 0.0)
    logger.info(f"Simulated {scenario.duration} steps on {n} nodes with {len(leaks)} leak(s)")
    return SimulationResult(pressures, leak_free, measured, observed, mask, list(leaks), sensors.noise_sigma)


def _frame(series):
    columns = [f"node_{i}" for i in range(series.shape[1])]
    frame = pd.DataFrame(series, columns=columns)
    frame.index.name = "t"
    return frame


def save_simulation(out_dir, result):
    """Writes the wide CSV series and labels.json."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("pressures", "leak_free", "measured", "observed"):
        _frame(getattr(result, name)).to_csv(os.path.join(out_dir, f"{name}.csv"))
    write_json(os.path.join(out_dir, "labels.json"), {
        "leaks": [vars(leak) for leak in result.leaks],
        "sensors": np.flatnonzero(result.sensor_mask).tolist(),
        "sensor_noise": result.sensor_noise,
    })


def load_simulation(out_dir):
    series = {}
    for name in ("pressures", "leak_free", "measured", "observed"):
        path = os.path.join(out_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise ArtifactError(f"Missing '{path}'. Run simulate first.")
        series[name] = pd.read_csv(path, index_col="t").to_numpy(dtype=np.float64)
    labels = read_json(os.path.join(out_dir, "labels.json"))
    mask = np.zeros(series["pressures"].shape[1], dtype=bool)
    mask[labels["sensors"]] = True
    leaks = [LeakEvent(**leak) for leak in labels["leaks"]]
    return SimulationResult(series["pressures"], series["leak_free"], series["measured"], series["observed"],
                            mask, leaks, labels.get("sensor_noise", 0.0))


def save_topology(out_dir, topology):
    os.makedirs(out_dir, exist_ok=True)
    save_graph(topology.graph, os.path.join(out_dir, "topology.txt"))
    write_json(os.path.join(out_dir, "topology.json"), topology.to_dict())


def load_topology(out_dir):
    path = os.path.join(out_dir, "topology.txt")
    if not os.path.exists(path):
        raise ArtifactError(f"Missing '{path}'. Run simulate first.")
    data = read_json(os.path.join(out_dir, "topology.json"))
    return WdnTopology(load_graph(path), data["reservoir_node"], data["reservoir_head"],
                       np.array(data["resistance"]), np.array(data["elevations"]), np.array(data["coordinates"]))
