import pytest
import numpy as np
from src.config import DetectionConfig
from src.graph_core import Graph, path_graph
from src.leak_pipeline import (DetectionEvent, DetectionReport, ResidualSeries, calibrate_xi, detect, evaluate, flags,
                               leak_detected, load_node_series, moving_average, pipe_ranking, residuals,
                               save_node_series, save_report, xi_grid)
from src.utils import ArtifactError, ShapeError
from src.wdn_sim import LeakEvent


@pytest.fixture
def graph():
    return Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])


@pytest.fixture
def step_series():
    # Skok +10 sigma na trubce 1 mezi kroky 300 a 500
    rng = np.random.default_rng(0)
    r = np.abs(rng.normal(1.0, 0.1, size=(800, 3)))
    r[300:500, 1] += 10 * 0.1 * np.sqrt(12)
    return ResidualSeries.from_edge_residuals(r, [(0, 1), (1, 2), (2, 3)], window=12, reference_steps=288)


def test_identical_outputs_give_zero_residuals(graph):
    y = np.random.default_rng(0).normal(size=(20, 4))
    series = residuals(y, y, graph, window=3)
    assert np.all(series.edge_residuals == 0)
    assert np.all(series.std == 0)


def test_common_mode_rejected(graph):
    y_pred = np.full((10, 4), 5.0)
    y_recon = np.full((10, 4), 2.0)
    assert np.all(residuals(y_pred, y_recon, graph, window=3).edge_residuals == 0)


def test_edge_residual_and_moving_average():
    g = path_graph(2)
    y_pred = np.array([[1.0, 3.0]] * 4)
    series = residuals(y_pred, np.zeros((4, 2)), g, window=3)
    assert series.edge_residuals[:, 0].tolist() == [2.0] * 4
    assert series.moving_average[3, 0] == pytest.approx(2.0)
    assert moving_average(np.array([[1.0], [3.0], [5.0]]), 2)[:, 0].tolist() == [1.0, 2.0, 4.0]


def test_residuals_shape_checks(graph):
    with pytest.raises(ShapeError):
        residuals(np.zeros((5, 4)), np.zeros((4, 4)), graph)
    with pytest.raises(ShapeError):
        residuals(np.zeros((5, 3)), np.zeros((5, 3)), graph)


def test_step_change_gives_one_event(step_series):
    report = detect(step_series, xi=3.0, consecutive_steps=72)
    assert len(report.events) == 1
    event = report.events[0]
    assert event.pipe == 1
    assert 300 <= event.start <= 300 + 12 + 72


def test_unreachable_threshold(step_series):
    assert detect(step_series, xi=1e9, consecutive_steps=72).events == []


def test_lower_xi_flags_superset(step_series):
    # Nižší práh označí vše, co označí vyšší, a události se jen rozšíří
    reports = [detect(step_series, xi, consecutive_steps=24) for xi in (4.0, 3.0, 2.0, 1.0)]
    for higher, lower in zip(reports, reports[1:]):
        assert lower.flagged >= higher.flagged
        for event in higher.events:
            assert any(e.pipe == event.pipe and e.start <= event.start and e.end >= event.end for e in lower.events)
    for xi_high, xi_low in [(3.0, 2.0), (2.0, 0.5)]:
        assert np.all(flags(step_series, xi_low)[flags(step_series, xi_high)])


def test_stationary_noise_rarely_alarms():
    quiet = 0
    for seed in range(20):
        r = np.abs(np.random.default_rng(seed).normal(1.0, 0.1, size=(10000, 1)))
        series = ResidualSeries.from_edge_residuals(r, window=12, reference_steps=2016)
        quiet += not detect(series, xi=3.0, consecutive_steps=72).events
    assert quiet >= 19


def test_degenerate_pipes_reported():
    r = np.zeros((100, 2))
    r[:, 1] = np.linspace(0.0, 1.0, 100)
    series = ResidualSeries.from_edge_residuals(r, window=4)
    report = detect(series, xi=3.0, consecutive_steps=5)
    assert report.degenerate_pipes == [0]
    assert all(e.pipe == 1 for e in report.events)


def test_start_step_offsets_events(step_series):
    shifted = ResidualSeries.from_edge_residuals(step_series.edge_residuals, step_series.edges, 12, 288,
                                                 start_step=12)
    assert detect(shifted, 3.0, 72).events[0].start == detect(step_series, 3.0, 72).events[0].start + 12


def test_parallel_detection_matches(step_series):
    assert detect(step_series, 3.0, 72, jobs=3) == detect(step_series, 3.0, 72)


def test_xi_grid():
    grid = xi_grid(3.0, 0.05, 0.0)
    assert grid[0] == 3.0
    assert grid[-1] == 0.0
    assert len(grid) == 61
    assert xi_grid(1.0, 0.3, 0.0)[-1] == 0.0


def test_calibration_first_grid_point(step_series):
    labels = [LeakEvent(1, 300, 500, 0.5)]
    result = calibrate_xi(step_series, labels, DetectionConfig(target_fraction=1.0))
    assert result.xi == 3.0
    assert result.target_met
    assert result.history == [(3.0, 1)]


def test_calibration_finds_threshold():
    # Trubka 0 má v referenčním úseku std 1 a pak úroveň 1.2 nad průměrem
    base = np.tile([1.0, -1.0], 144)
    r = np.concatenate([base + 2.0, np.full(300, 3.21)])[:, None]
    series = ResidualSeries.from_edge_residuals(r, window=1, reference_steps=288)
    assert series.std[0] == pytest.approx(1.0)
    config = DetectionConfig(window=1, consecutive_steps=72, xi_step=0.1, target_fraction=1.0)
    result = calibrate_xi(series, [LeakEvent(0, 288, 588, 0.5)], config)
    assert result.xi == pytest.approx(1.2)
    assert result.detected == 1


def test_calibration_floor_without_target():
    r = np.abs(np.random.default_rng(1).normal(1.0, 0.1, size=(400, 2)))
    series = ResidualSeries.from_edge_residuals(r, window=12)
    config = DetectionConfig(xi_start=0.2, xi_step=0.1, target_fraction=1.0, consecutive_steps=400)
    result = calibrate_xi(series, [LeakEvent(0, 100, 300, 0.5)], config)
    assert not result.target_met
    assert result.xi == 0.0


def test_calibration_needs_labels(step_series):
    with pytest.raises(ValueError):
        calibrate_xi(step_series, [], DetectionConfig())


def test_evaluate_counting():
    labels = [LeakEvent(1, 300, 500, 0.5)]
    perfect = DetectionReport(3.0, 72, [DetectionEvent(1, 350, 499, 1.0)])
    assert evaluate(perfect, labels)["detected"] == 1
    assert evaluate(perfect, labels)["false_positives"] == 0
    assert evaluate(DetectionReport(3.0, 72), labels)["detected"] == 0
    mixed = DetectionReport(3.0, 72, [DetectionEvent(1, 320, 420, 1.0), DetectionEvent(2, 100, 171, 0.5)])
    metrics = evaluate(mixed, labels)
    assert (metrics["detected"], metrics["false_positives"]) == (1, 1)
    assert metrics["false_positive_pipe_hours"] == pytest.approx(6.0)
    assert metrics["leaks"][0]["delay"] == 20


def test_leak_overlap_rule():
    leak = LeakEvent(0, 100, 200, 0.5)
    assert leak_detected(leak, [DetectionEvent(0, 199, 300, 1.0)])
    assert not leak_detected(leak, [DetectionEvent(0, 200, 300, 1.0)])
    assert not leak_detected(leak, [DetectionEvent(1, 150, 160, 1.0)])


def test_localization_rank(step_series):
    assert pipe_ranking(step_series, 3.0, 300, 500)[0] == 1
    report = detect(step_series, 3.0, 72)
    metrics = evaluate(report, [LeakEvent(1, 300, 500, 0.5)], step_series, top_k=1)
    assert metrics["leaks"][0]["rank"] == 1
    assert metrics["top_k_hit_rate"] == 1.0


def test_report_files(tmp_path, step_series):
    report = detect(step_series, 3.0, 72)
    metrics = evaluate(report, [LeakEvent(1, 300, 500, 0.5)], step_series)
    events_path = tmp_path / "events.ndjson"
    summary_path = tmp_path / "summary.csv"
    save_report(report, str(events_path), str(summary_path), metrics)
    assert len(events_path.read_text(encoding="utf-8").splitlines()) == 1
    assert summary_path.read_text(encoding="utf-8").startswith("pipe,start,end,detected,delay,rank")


def test_node_series_files(tmp_path):
    values = np.arange(12.0).reshape(4, 3)
    path = tmp_path / "series.csv"
    save_node_series(str(path), values, start_step=12)
    loaded, start = load_node_series(str(path))
    assert start == 12
    assert np.array_equal(loaded, values)
    with pytest.raises(ArtifactError):
        load_node_series(str(tmp_path / "missing.csv"))
