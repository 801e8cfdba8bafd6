import pytest
import numpy as np
import networkx as nx
from unittest.mock import patch
import src.wdn_sim as wdn_sim
from src.graph_core import Graph
from src.logger import logger
from src.utils import GraphError, SolverError
from src.wdn_sim import (DemandScenario, LeakEvent, SensorConfig, WdnTopology, generate_topology, load_simulation,
                         load_topology, perturb_resistances, random_base_demand, random_leaks, random_sensors,
                         save_simulation, save_topology, simulate, steady_state_solve)


@pytest.fixture
def single_pipe():
    return WdnTopology(Graph.from_edges(2, [(0, 1)]), 0, 50.0, [0.01], [0.0, 0.0], np.zeros((2, 2)))


@pytest.fixture
def topology():
    return generate_topology(12, seed=1)


@pytest.fixture
def scenario(topology):
    return DemandScenario(random_base_demand(topology, 0.5, 1.5, seed=2), np.ones(288), 0.0, 6)


def _junction_imbalance(topology, demands, result):
    inflow = np.zeros(topology.n_nodes)
    for k, (u, v) in enumerate(topology.graph.edges):
        inflow[v] += result.flow[k]
        inflow[u] -= result.flow[k]
    free = topology.junctions
    return np.abs(inflow[free] - demands[free] - result.leak_outflow[free]).max()


def test_single_pipe_closed_form(single_pipe):
    result = steady_state_solve(single_pipe, np.array([0.0, 2.0]))
    # H1 = H0 - R d^2
    assert result.head[1] == pytest.approx(50.0 - 0.01 * 4.0, abs=1e-8)
    assert result.flow[0] == pytest.approx(2.0, abs=1e-8)


def test_zero_demand_equilibrium(topology):
    result = steady_state_solve(topology, np.zeros(topology.n_nodes))
    assert np.all(result.head == topology.reservoir_head)
    assert np.all(result.flow == 0)
    assert result.iterations == 0


def test_mass_balance(topology):
    demands = random_base_demand(topology, 0.5, 1.5, seed=3)
    leak = LeakEvent(0, 0, 1, 0.5)
    result = steady_state_solve(topology, demands, [leak])
    assert _junction_imbalance(topology, demands, result) < 1e-6
    assert result.leak_outflow.sum() > 0


def test_head_loss_law_on_every_pipe(topology):
    demands = random_base_demand(topology, 0.5, 1.5, seed=3)
    result = steady_state_solve(topology, demands, [LeakEvent(2, 0, 1, 0.5)])
    for k, (u, v) in enumerate(topology.graph.edges):
        dh = result.head[u] - result.head[v]
        q = result.flow[k]
        # mimo linearizovanou zónu platí h_u - h_v = R q |q|
        if abs(dh) >= 1e-6:
            assert topology.resistance[k] * q * abs(q) == pytest.approx(dh, rel=1e-9, abs=1e-12)
            assert np.sign(q) == np.sign(dh)


@pytest.mark.parametrize("seed", range(5))
def test_leak_lowers_every_junction_pressure(seed):
    topology = generate_topology(10, seed)
    demands = random_base_demand(topology, 0.5, 1.5, seed)
    pipe = random_leaks(topology, 1, 10, seed, start_after=0, min_duration=1)[0].pipe
    clean = steady_state_solve(topology, demands)
    leaky = steady_state_solve(topology, demands, [LeakEvent(pipe, 0, 1, 0.5)])
    free = topology.junctions
    assert np.all(leaky.pressure[free] < clean.pressure[free])


def test_supply_bound(topology):
    with pytest.raises(SolverError):
        steady_state_solve(topology, np.full(topology.n_nodes, 10.0), supply_bound=5.0)


def test_failed_halving_is_reported(topology):
    demands = random_base_demand(topology, 0.5, 1.5, seed=3)
    real_balance = wdn_sim._balance
    calls = []

    def worsening_balance(*args):
        # Každý zkušební krok zhorší bilanci
        res, jac, q, leak = real_balance(*args)
        calls.append(len(calls))
        return (res if len(calls) == 1 else res + 1e6), jac, q, leak

    with patch("src.wdn_sim._balance", side_effect=worsening_balance), \
            patch.object(logger, "warning") as warning, pytest.raises(SolverError, match="did not converge"):
        steady_state_solve(topology, demands, max_iter=1)
    assert len(calls) == 1 + wdn_sim.MAX_HALVINGS
    assert "no step halving" in warning.call_args[0][0]


def test_topology_connected_and_deterministic():
    first = generate_topology(40, seed=1)
    second = generate_topology(40, seed=1)
    assert first.graph == second.graph
    assert np.array_equal(first.resistance, second.resistance)
    assert nx.is_connected(first.graph.to_networkx())
    assert first.reservoir_node == 40


def test_topology_mean_degree():
    degrees = [generate_topology(40, seed).graph.degrees().mean() for seed in range(20)]
    assert 2.0 <= np.mean(degrees) <= 5.0


def test_topology_validation():
    with pytest.raises(GraphError):
        WdnTopology(Graph.from_edges(3, [(0, 1)]), 0, 50.0, [0.01], np.zeros(3), np.zeros((3, 2)))
    with pytest.raises(GraphError):
        WdnTopology(Graph.from_edges(2, [(0, 1)]), 0, 50.0, [0.0], np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(GraphError):
        generate_topology(4, seed=0)


def test_perturbed_resistances(topology):
    perturbed = perturb_resistances(topology, 0.1, seed=0)
    ratio = perturbed.resistance / topology.resistance
    assert np.all((ratio >= 0.9) & (ratio <= 1.1))
    assert perturbed.graph == topology.graph


def test_random_leaks_respect_constraints(topology):
    leaks = random_leaks(topology, 2, 2016, seed=4, start_after=576, min_duration=576)
    reservoir_pipes = {k for k, e in enumerate(topology.graph.edges) if topology.reservoir_node in e}
    assert len({leak.pipe for leak in leaks}) == 2
    for leak in leaks:
        assert leak.pipe not in reservoir_pipes
        assert leak.start >= 576
        assert leak.end - leak.start >= 576
        assert leak.end <= 2016
    with pytest.raises(ValueError):
        random_leaks(topology, 1, 1000, seed=4, start_after=576, min_duration=576)


def test_stationary_scenario(topology, scenario):
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.0)
    result = simulate(topology, scenario, [], sensors, seed=0)
    assert np.allclose(result.pressures, result.pressures[0])
    assert np.array_equal(result.pressures, result.leak_free)


def test_observed_only_at_sensors(topology, scenario):
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.1)
    result = simulate(topology, scenario, [], sensors, seed=0)
    assert np.all(result.observed[:, ~result.sensor_mask] == 0)
    assert np.all(result.observed[:, result.sensor_mask] != 0)
    assert not result.sensor_mask[topology.reservoir_node]


def test_simulation_deterministic(topology):
    scenario = DemandScenario(random_base_demand(topology, 0.5, 1.5, seed=2), np.linspace(0.7, 1.3, 288), 0.05, 8)
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.05)
    leaks = [LeakEvent(1, 2, 6, 0.5)]
    first = simulate(topology, scenario, leaks, sensors, seed=9)
    second = simulate(topology, scenario, leaks, sensors, seed=9, jobs=3)
    assert np.array_equal(first.measured, second.measured)
    # Během úniku je tlak nižší než bez úniku
    assert np.all(first.pressures[2:6] <= first.leak_free[2:6])
    assert np.array_equal(first.pressures[:2], first.leak_free[:2])


def test_leak_outside_duration_rejected(topology, scenario):
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.0)
    with pytest.raises(ValueError):
        simulate(topology, scenario, [LeakEvent(0, 3, 20, 0.5)], sensors, seed=0)


def test_artifacts(tmp_path, topology, scenario):
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.05)
    leaks = [LeakEvent(1, 2, 5, 0.5)]
    result = simulate(topology, scenario, leaks, sensors, seed=1)
    save_simulation(str(tmp_path / "test"), result)
    save_topology(str(tmp_path), topology)
    loaded = load_simulation(str(tmp_path / "test"))
    assert np.allclose(loaded.pressures, result.pressures)
    assert np.array_equal(loaded.sensor_mask, result.sensor_mask)
    assert loaded.leaks == leaks
    restored = load_topology(str(tmp_path))
    assert restored.graph == topology.graph
    assert np.allclose(restored.resistance, topology.resistance)


def test_leak_free_readings_are_pressure_plus_noise(topology, scenario):
    sensors = SensorConfig(random_sensors(topology, 4, seed=0), 0.0)
    exact = simulate(topology, scenario, [], sensors, seed=3)
    mask = exact.sensor_mask
    assert np.array_equal(exact.pressures, exact.leak_free)
    assert np.array_equal(exact.observed[:, mask], exact.leak_free[:, mask])
    # Stejný seed dává stejný šum, jen škálovaný směrodatnou odchylkou
    small = simulate(topology, scenario, [], SensorConfig(sensors.sensor_nodes, 0.1), seed=3)
    large = simulate(topology, scenario, [], SensorConfig(sensors.sensor_nodes, 0.2), seed=3)
    noise_small = small.observed[:, mask] - small.leak_free[:, mask]
    noise_large = large.observed[:, mask] - large.leak_free[:, mask]
    assert np.allclose(noise_large, 2.0 * noise_small)
    assert np.any(noise_small != 0)
