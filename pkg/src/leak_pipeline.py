# src/leak_pipeline.py

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional
import numpy as np
import pandas as pd
from src.logger import logger
from src.utils import ArtifactError, ShapeError, write_ndjson
from src.workers import run_jobs

"""
Second stage: residual analysis on pipes.
- residuals() turns predictor/reconstructor outputs into smoothed edge residuals.
- detect() flags pipes whose moving average stays above mean + xi * std.
- calibrate_xi() walks the xi grid downwards until enough labelled leaks are found.
"""

DEGENERATE_EPS = 1e-12
STEPS_PER_HOUR = 12


@dataclass
class ResidualSeries:
    """
    Edge residual statistics. Row t of every series is split timestep start_step + t.
    mean/std are taken over the moving average on the reference span.
    """
    edges: List[tuple]
    edge_residuals: np.ndarray
    moving_average: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    window: int
    start_step: int = 0
    node_residuals: Optional[np.ndarray] = None

    @property
    def n_steps(self):
        return self.edge_residuals.shape[0]

    @classmethod
    def from_edge_residuals(cls, edge_residuals, edges=None, window=12, reference_steps=None, start_step=0,
                            node_residuals=None):
        """
        Args:
            edge_residuals (np.ndarray): (T, m) nonnegative residuals.
            edges (list): Pipe endpoints, defaults to 0..m-1 placeholders.
            window (int): Moving-average window s.
            reference_steps (int): Length of the leak-free reference span at the
                start of the series; None uses the whole series.
            start_step (int): Split timestep of row 0.
        """
        r = np.asarray(edge_residuals, dtype=np.float64)
        if r.ndim != 2:
            raise ShapeError(f"edge residuals must be (T, m), got {r.shape}")
        if np.any(r < 0):
            raise ValueError("edge residuals must be nonnegative")
        if window < 1:
            raise ValueError("window must be positive")
        ma = moving_average(r, window)
        span = ma if reference_steps is None else ma[:reference_steps]
        if len(span) == 0:
            raise ShapeError("reference span is empty")
        edges = [(k, k) for k in range(r.shape[1])] if edges is None else list(edges)
        return cls(edges, r, ma, span.mean(axis=0), span.std(axis=0), window, start_step, node_residuals)


def moving_average(series, window):
    """Trailing mean over the last `window` rows; the first rows average the available prefix."""
    series = np.asarray(series, dtype=np.float64)
    csum = np.vstack([np.zeros((1,) + series.shape[1:]), np.cumsum(series, axis=0)])
    t = np.arange(1, len(series) + 1)
    lo = np.maximum(t - window, 0)
    counts = (t - lo).reshape((-1,) + (1,) * (series.ndim - 1))
    return (csum[t] - csum[lo]) / counts


def residuals(y_pred, y_recon, graph, window=12, reference_steps=None, start_step=0):
    """
    r(t) = y_pred(t) - y_recon(t); r_uv(t) = |r_v(t) - r_u(t)| for every pipe.

    Args:
        y_pred (np.ndarray): (T, n) predictor outputs (leak-free estimate).
        y_recon (np.ndarray): (T, n) reconstructor outputs.
        graph (Graph): Network; pipes follow graph.edges.
        window (int): Moving-average window.
        reference_steps (int): Leak-free span for the statistics, None for the full span.
        start_step (int): Split timestep of the first row.

    Returns:
        ResidualSeries: Smoothed edge residuals with their statistics.
    """
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_recon = np.asarray(y_recon, dtype=np.float64)
    if y_pred.shape != y_recon.shape:
        raise ShapeError(f"prediction {y_pred.shape} and reconstruction {y_recon.shape} are not aligned")
    if y_pred.ndim != 2 or y_pred.shape[1] != graph.n_nodes:
        raise ShapeError(f"series must be (T, {graph.n_nodes}), got {y_pred.shape}")
    r = y_pred - y_recon
    eu = np.array([u for u, _ in graph.edges], dtype=int)
    ev = np.array([v for _, v in graph.edges], dtype=int)
    edge_r = np.abs(r[:, ev] - r[:, eu])
    return ResidualSeries.from_edge_residuals(edge_r, graph.edges, window, reference_steps, start_step, r)


@dataclass
class DetectionEvent:
    pipe: int
    start: int
    end: int
    peak_excess: float


@dataclass
class DetectionReport:
    xi: float
    consecutive_steps: int
    events: List[DetectionEvent] = field(default_factory=list)
    degenerate_pipes: List[int] = field(default_factory=list)
    flagged: int = 0


def thresholds(series, xi):
    """Per-pipe threshold; pipes with zero spread use mean + eps."""
    return np.where(series.std > 0, series.mean + xi * series.std, series.mean + DEGENERATE_EPS)


def flags(series, xi):
    return series.moving_average > thresholds(series, xi)


def _pipe_events(pipe, flagged, excess, consecutive_steps, start_step):
    events = []
    t, n = 0, len(flagged)
    while t < n:
        if not flagged[t]:
            t += 1
            continue
        run_end = t
        while run_end + 1 < n and flagged[run_end + 1]:
            run_end += 1
        if run_end - t + 1 >= consecutive_steps:
            events.append(DetectionEvent(pipe, start_step + t, start_step + run_end,
                                         float(excess[t:run_end + 1].max())))
        t = run_end + 1
    return events


def detect(series, xi, consecutive_steps=72, jobs=1):
    """
    Flags pipes whose moving average exceeds mean + xi * std for at least
    consecutive_steps steps in a row. An event spans the whole run of flags.

    Args:
        series (ResidualSeries): Smoothed edge residuals.
        xi (float): Threshold multiplier.
        consecutive_steps (int): Minimum run length.
        jobs (int): Worker threads over pipes.

    Returns:
        DetectionReport
    """
    if consecutive_steps < 1:
        raise ValueError("consecutive_steps must be positive")
    limit = thresholds(series, xi)
    flagged = series.moving_average > limit
    excess = series.moving_average - limit
    per_pipe = run_jobs(lambda k: _pipe_events(k, flagged[:, k], excess[:, k], consecutive_steps,
                                               series.start_step),
                        range(flagged.shape[1]), jobs)
    events = [e for pipe_events in per_pipe for e in pipe_events]
    events.sort(key=lambda e: (e.start, e.pipe))
    degenerate = np.flatnonzero(series.std == 0).tolist()
    return DetectionReport(float(xi), consecutive_steps, events, degenerate, int(flagged.sum()))


def leak_detected(leak, events):
    """An event on the leak's pipe overlapping its interval [start, end)."""
    return any(e.pipe == leak.pipe and e.start < leak.end and e.end >= leak.start for e in events)


@dataclass
class CalibrationResult:
    xi: float
    detected: int
    total: int
    target_met: bool
    history: List[tuple] = field(default_factory=list)


def xi_grid(start=3.0, step=0.05, floor=0.0):
    """Descending grid start, start - step, ... down to floor (inclusive)."""
    grid = []
    k = 0
    while True:
        value = round(start - k * step, 10)
        if value < floor - 1e-9:
            break
        grid.append(value)
        k += 1
    if grid[-1] > floor:
        grid.append(floor)
    return grid


def calibrate_xi(series, labels, config):
    """
    Largest grid value whose detection recovers the target fraction of leaks.

    Args:
        series (ResidualSeries): Calibration split residuals.
        labels (list): LeakEvent objects of the calibration split.
        config (DetectionConfig): Grid, target fraction and consecutive rule.

    Returns:
        CalibrationResult: When no grid value meets the target, the floor with target_met False.
    """
    if not labels:
        raise ValueError("calibration needs at least one labelled leak")
    needed = math.ceil(config.target_fraction * len(labels) - 1e-9)
    history = []
    for xi in xi_grid(config.xi_start, config.xi_step, config.xi_floor):
        report = detect(series, xi, config.consecutive_steps)
        detected = sum(leak_detected(leak, report.events) for leak in labels)
        history.append((xi, detected))
        if detected >= needed:
            logger.info(f"Calibrated xi={xi} ({detected}/{len(labels)} leaks detected)")
            return CalibrationResult(xi, detected, len(labels), True, history)
    logger.warning(f"xi floor {config.xi_floor} reached with {history[-1][1]}/{len(labels)} leaks detected")
    return CalibrationResult(history[-1][0], history[-1][1], len(labels), False, history)


def pipe_ranking(series, xi, start, end):
    """Pipes sorted by peak moving-average excess over their threshold in [start, end)."""
    lo = max(start - series.start_step, 0)
    hi = min(end - series.start_step, series.n_steps)
    if hi <= lo:
        return []
    excess = (series.moving_average[lo:hi] - thresholds(series, xi)).max(axis=0)
    return [int(k) for k in np.argsort(-excess, kind="stable")]


def evaluate(report, labels, series=None, top_k=5):
    """
    Compares a report with labelled leaks.

    Returns:
        dict: counts, per-leak outcomes (delay in steps, localization rank),
        false-positive events and pipe-hours, top-k localization hit rate.
    """
    outcomes = []
    for leak in labels:
        matches = [e for e in report.events if e.pipe == leak.pipe and e.start < leak.end and e.end >= leak.start]
        rank = None
        if series is not None:
            ranking = pipe_ranking(series, report.xi, leak.start, leak.end)
            rank = ranking.index(leak.pipe) + 1 if leak.pipe in ranking else None
        outcomes.append({
            "pipe": leak.pipe,
            "start": leak.start,
            "end": leak.end,
            "detected": bool(matches),
            "delay": min(e.start for e in matches) - leak.start if matches else None,
            "rank": rank,
        })
    false_positives = [e for e in report.events if not any(
        e.pipe == leak.pipe and e.start < leak.end and e.end >= leak.start for leak in labels)]
    ranked = [o for o in outcomes if o["rank"] is not None]
    return {
        "total": len(labels),
        "detected": sum(o["detected"] for o in outcomes),
        "false_positives": len(false_positives),
        "false_positive_pipe_hours": sum(e.end - e.start + 1 for e in false_positives) / STEPS_PER_HOUR,
        "top_k": top_k,
        "top_k_hit_rate": (sum(o["rank"] <= top_k for o in ranked) / len(labels)) if labels and series is not None
        else None,
        "leaks": outcomes,
    }


def save_report(report, events_path, summary_path=None, metrics=None):
    """Events as NDJSON; per-leak outcomes as CSV when metrics are given."""
    write_ndjson(events_path, [asdict(e) for e in report.events])
    if summary_path is not None and metrics is not None:
        columns = ["pipe", "start", "end", "detected", "delay", "rank"]
        pd.DataFrame(metrics["leaks"], columns=columns).to_csv(summary_path, index=False)


def save_node_series(path, series, start_step=0):
    columns = [f"node_{i}" for i in range(series.shape[1])]
    frame = pd.DataFrame(series, columns=columns, index=np.arange(start_step, start_step + len(series)))
    frame.index.name = "t"
    frame.to_csv(path)


def load_node_series(path):
    """
    Reads a wide node CSV written by save_node_series.

    Returns:
        tuple: (values (T, n), first timestep)
    """
    try:
        frame = pd.read_csv(path, index_col="t")
    except (OSError, ValueError) as e:
        raise ArtifactError(f"Cannot read node series '{path}': {e}. Run evaluate first.") from e
    start = int(frame.index[0]) if len(frame) else 0
    return frame.to_numpy(dtype=np.float64), start
