# src/app_controller.py

import os
import numpy as np
import pandas as pd
from src import __version__
from src.autodiff import load_params, save_params
from src.aignn import (PREDICTOR, RECONSTRUCTOR, GraphContext, PressureDataset, PressureScaler,
                       augment_source_name, build_variant, evaluate_variants, predict, train_variants)
from src.config import Config
from src.leak_pipeline import (calibrate_xi, detect, evaluate, load_node_series, residuals, save_node_series,
                               save_report)
from src.logger import logger, setup_run_logging
from src.maxflow import load_trajectories, save_trajectories, validate_trajectory
from src.nar import generate_dataset, load_processor, save_nar, save_processor, train_nar
from src.utils import ArtifactError, TrainingError, read_json, snapshot_run, user_print, write_json
from src.wdn_sim import (DemandScenario, SensorConfig, default_daily_pattern, generate_topology, load_simulation,
                         load_topology, perturb_resistances, random_base_demand, random_leaks, random_sensors,
                         save_simulation, save_topology, simulate)
from src.workers import run_jobs

"""
ExperimentController runs the stages of the workflow:
- Every stage reads the artifacts of earlier stages from the output directory.
- Every stage directory receives run.log, resolved_config.json and VERSION.
- All randomness derives from the configured seed.
"""

ROLES = (RECONSTRUCTOR, PREDICTOR)
SPLITS = ("calibration", "test", "control")
RELOCATION_PLACEMENTS = 5


class ExperimentController:
    """
    Main controller for the experiment stages.
    """
    def __init__(self, config_path, seed=None, jobs=None, output_dir=None):
        """
        Initializes the controller.

        Args:
            config_path (str): Path to the configuration file.
            seed (int): Optional seed override.
            jobs (int): Optional worker-count override.
            output_dir (str): Optional output directory override.
        """
        self.config_path = config_path
        self.config = Config()
        self.config.load(config_path)
        self.config.override(seed=seed, jobs=jobs, output_dir=output_dir)

    @property
    def seed(self):
        return self.config.get("seed")

    @property
    def jobs(self):
        return self.config.get("jobs")

    def path(self, *parts):
        return os.path.join(self.config.get("output_dir"), *parts)

    def begin_stage(self, name):
        """
        Prepares the artifact directory of a stage.

        Returns:
            str: The stage directory.
        """
        stage_dir = self.path(name)
        setup_run_logging(stage_dir)
        snapshot_run(stage_dir, self.config.resolved(), __version__)
        user_print(f"Stage {name} (seed {self.seed}, jobs {self.jobs})", level="command")
        return stage_dir

    # NAR

    def gen_trajectories(self):
        cfg = self.config.section("nar")
        stage_dir = self.begin_stage("trajectories")
        dataset = generate_dataset(cfg.count, cfg.n_nodes, self.seed, cfg.edge_probability, self.jobs)
        for k, trajectory in enumerate(dataset):
            problems = validate_trajectory(trajectory)
            if problems:
                raise TrainingError(f"Trajectory {k} violates invariants: {problems[0]}")
        path = os.path.join(stage_dir, "trajectories.ndjson")
        save_trajectories(path, dataset)
        values = sorted({t.max_flow_value for t in dataset})
        user_print(f"Wrote {len(dataset)} trajectories ({len(values)} distinct max-flow values) to {path}",
                   level="success")
        return dataset

    def train_nar(self):
        cfg = self.config.section("nar")
        dataset = load_trajectories(self.path("trajectories", "trajectories.ndjson"))
        stage_dir = self.begin_stage("nar")
        model, metrics = train_nar(dataset, cfg, seed=self.seed, jobs=self.jobs,
                                   metrics_path=os.path.join(stage_dir, "metrics.ndjson"))
        save_nar(model, os.path.join(stage_dir, "nar.npz"))
        save_processor(model.processor, os.path.join(stage_dir, "processor.npz"))
        last = metrics[-1]
        user_print(f"NAR trained: loss {metrics[0]['loss']:.4f} -> {last['loss']:.4f}, "
                   f"held-out flow accuracy {last['val_flow_accuracy']:.3f}", level="success")
        return model, metrics

    # Simulation

    def simulate(self):
        cfg = self.config.section("simulation")
        stage_dir = self.begin_stage("simulation")
        topology = generate_topology(cfg.n_junctions, cfg.topology_seed, cfg.reservoir_head, cfg.resistance_scale)
        evaluation = perturb_resistances(topology, cfg.resistance_mismatch, self.seed + 11)
        sensors = SensorConfig(random_sensors(topology, cfg.sensor_count, self.seed + 12), cfg.sensor_noise)
        base = random_base_demand(topology, cfg.base_demand_min, cfg.base_demand_max, self.seed + 13)
        save_topology(stage_dir, topology)
        save_topology(os.path.join(stage_dir, "evaluation_network"), evaluation)
        splits = {
            "train": (topology, cfg.train_steps, False),
            "calibration": (evaluation, cfg.calibration_steps, True),
            "test": (evaluation, cfg.test_steps, True),
            "control": (evaluation, cfg.control_steps, False),
        }
        results = {}
        for k, (name, (network, steps, leaky)) in enumerate(splits.items()):
            scenario = DemandScenario(base, default_daily_pattern(), cfg.demand_noise, steps)
            leaks = random_leaks(network, cfg.leaks_per_split, steps, self.seed + 20 + k, cfg.leak_emitter,
                                 cfg.leak_start_after, cfg.leak_min_duration) if leaky else []
            result = simulate(network, scenario, leaks, sensors, self.seed + 30 + k, self.jobs, cfg.supply_bound)
            save_simulation(os.path.join(stage_dir, name), result)
            results[name] = result
            user_print(f"Simulated {name}: {steps} steps, leaks {[(e.pipe, e.start, e.end) for e in leaks]}",
                       level="simulation")
        return topology, results

    # Pressure models

    def _context(self, topology):
        cfg = self.config.section("aignn")
        return GraphContext.from_graph(topology.graph, topology.resistance, cfg.use_pipe_features)

    def _dataset(self, result, scaler, role, sensor_mask=None, leak_free=None):
        cfg = self.config.section("aignn")
        mask = result.sensor_mask if sensor_mask is None else sensor_mask
        targets = result.pressures if role == RECONSTRUCTOR else result.leak_free
        leak_free = (not result.leaks) if leak_free is None else leak_free
        return PressureDataset.from_series(targets, result.measured, mask, scaler, role, cfg.history, leak_free)

    def _train_role(self, role, topology, train_result, scaler):
        aignn_cfg = self.config.section("aignn")
        processor = load_processor(self.path("nar", "processor.npz"))
        dataset = self._dataset(train_result, scaler, role)
        return train_variants(aignn_cfg.variants, processor, dataset, self._context(topology), aignn_cfg,
                              self.config.section("chebnet"), self.seed)

    def train_models(self):
        topology = load_topology(self.path("simulation"))
        train_result = load_simulation(self.path("simulation", "train"))
        if not os.path.exists(self.path("nar", "processor.npz")):
            raise ArtifactError("Missing trained processor. Run train-nar first.")
        stage_dir = self.begin_stage("models")
        scaler = PressureScaler().fit(train_result.leak_free)
        write_json(os.path.join(stage_dir, "scaler.json"), scaler.to_dict())
        trained = run_jobs(lambda role: self._train_role(role, topology, train_result, scaler), ROLES, self.jobs)
        for role, (models, metrics) in zip(ROLES, trained):
            for name, model in models.items():
                save_params(os.path.join(stage_dir, f"{role.lower()}_{name}.npz"), model.state_dict())
                pd.DataFrame(metrics[name]).to_csv(os.path.join(stage_dir, f"{role.lower()}_{name}_training.csv"),
                                                   index=False)
        user_print(f"Trained {sorted(trained[0][0])} for both roles", level="success")
        return dict(zip(ROLES, (t[0] for t in trained)))

    def load_models(self, role, topology):
        """Rebuilds the trained models of one role from their checkpoints."""
        aignn_cfg = self.config.section("aignn")
        chebnet_cfg = self.config.section("chebnet")
        processor = load_processor(self.path("nar", "processor.npz"))
        in_channels = 2 if role == RECONSTRUCTOR else aignn_cfg.history + 1
        rng = np.random.default_rng(self.seed)
        names = list(aignn_cfg.variants)
        if any(augment_source_name(n) for n in names) and "aignn" not in names:
            names.insert(0, "aignn")
        names.sort(key=lambda n: augment_source_name(n) is not None)
        models = {}
        for name in names:
            path = self.path("models", f"{role.lower()}_{name}.npz")
            if not os.path.exists(path):
                raise ArtifactError(f"Missing model checkpoint '{path}'. Run train-models first.")
            source = models.get(augment_source_name(name)) if augment_source_name(name) else None
            model = build_variant(name, processor, role, in_channels, aignn_cfg, chebnet_cfg, rng, source)
            model.load_state_dict(load_params(path))
            models[name] = model
        return models

    def _scaler(self):
        return PressureScaler.from_dict(read_json(self.path("models", "scaler.json")))

    def evaluate(self):
        """
        Relative errors on the test split plus prediction/reconstruction series
        of every split for the residual analysis.
        """
        topology = load_topology(self.path("simulation"))
        ctx = self._context(topology)
        scaler = self._scaler()
        variants = self.config.section("aignn").variants
        history = self.config.section("aignn").history
        splits = {name: load_simulation(self.path("simulation", name)) for name in SPLITS}
        stage_dir = self.begin_stage("evaluation")
        series_dir = os.path.join(stage_dir, "series")
        os.makedirs(series_dir, exist_ok=True)
        rows = []
        for role in ROLES:
            models = self.load_models(role, topology)
            rows.extend(evaluate_variants(models, variants, self._dataset(splits["test"], scaler, role), ctx,
                                          scaler, self.seed))
            for split, result in splits.items():
                dataset = self._dataset(result, scaler, role)
                for name in variants:
                    source = models.get(augment_source_name(name)) if augment_source_name(name) else None
                    values = scaler.inverse(predict(models[name], dataset.inputs, ctx, source))
                    if role == RECONSTRUCTOR:
                        values = values[history:]
                    save_node_series(os.path.join(series_dir, f"{split}_{name}_{role.lower()}.csv"), values,
                                     start_step=history)
        table = pd.DataFrame(rows)
        table.to_csv(os.path.join(stage_dir, "evaluation.csv"), index=False)
        user_print(table.to_string(index=False), level="info")
        return table

    # Residual analysis

    def _series(self, split, name, topology):
        cfg = self.config.section("detection")
        series_dir = self.path("evaluation", "series")
        y_pred, start = load_node_series(os.path.join(series_dir, f"{split}_{name}_{PREDICTOR.lower()}.csv"))
        y_recon, _ = load_node_series(os.path.join(series_dir, f"{split}_{name}_{RECONSTRUCTOR.lower()}.csv"))
        return residuals(y_pred, y_recon, topology.graph, cfg.window, cfg.reference_steps, start)

    def calibrate(self):
        cfg = self.config.section("detection")
        topology = load_topology(self.path("simulation"))
        labels = load_simulation(self.path("simulation", "calibration")).leaks
        stage_dir = self.begin_stage("calibration")
        outcome = {}
        for name in self.config.section("aignn").variants:
            result = calibrate_xi(self._series("calibration", name, topology), labels, cfg)
            outcome[name] = {"xi": result.xi, "detected": result.detected, "total": result.total,
                             "target_met": result.target_met, "history": [list(h) for h in result.history]}
            level = "success" if result.target_met else "error"
            user_print(f"{name}: xi={result.xi} ({result.detected}/{result.total} leaks)", level=level)
        write_json(os.path.join(stage_dir, "calibration.json"), outcome)
        return outcome

    def detect(self):
        cfg = self.config.section("detection")
        topology = load_topology(self.path("simulation"))
        calibration_path = self.path("calibration", "calibration.json")
        calibration = read_json(calibration_path) if os.path.exists(calibration_path) else {}
        labels = {split: load_simulation(self.path("simulation", split)).leaks for split in ("test", "control")}
        stage_dir = self.begin_stage("detection")
        rows, metrics_all = [], {}
        for name in self.config.section("aignn").variants:
            if name in calibration:
                xi = calibration[name]["xi"]
            else:
                xi = cfg.xi
                logger.warning(f"No calibrated xi for {name}; using detection.xi={xi}")
            series = self._series("test", name, topology)
            report = detect(series, xi, cfg.consecutive_steps, self.jobs)
            metrics = evaluate(report, labels["test"], series, cfg.top_k)
            save_report(report, os.path.join(stage_dir, f"events_{name}.ndjson"),
                        os.path.join(stage_dir, f"summary_{name}.csv"), metrics)
            control = detect(self._series("control", name, topology), xi, cfg.consecutive_steps, self.jobs)
            save_report(control, os.path.join(stage_dir, f"events_{name}_control.ndjson"))
            metrics["control_events"] = len(control.events)
            metrics_all[name] = metrics
            rows.append({"model": name, "xi": xi, "detected": metrics["detected"], "total": metrics["total"],
                         "false_positives": metrics["false_positives"],
                         "false_positive_pipe_hours": metrics["false_positive_pipe_hours"],
                         "top_k_hit_rate": metrics["top_k_hit_rate"], "control_events": len(control.events),
                         "seed": self.seed})
        write_json(os.path.join(stage_dir, "metrics.json"), metrics_all)
        table = pd.DataFrame(rows)
        table.to_csv(os.path.join(stage_dir, "detection.csv"), index=False)
        user_print(table.to_string(index=False), level="info")
        return table

    # Reports

    def compare(self):
        """Relative-error table of all variants and roles from the evaluation stage."""
        path = self.path("evaluation", "evaluation.csv")
        if not os.path.exists(path):
            raise ArtifactError(f"Missing '{path}'. Run evaluate first.")
        stage_dir = self.begin_stage("comparison")
        table = pd.read_csv(path)
        columns = ["model", "role", "rel_error", "rel_error_std", "rel_error_monitored", "rel_error_unmonitored",
                   "seed"]
        table = table[columns]
        table.to_csv(os.path.join(stage_dir, "comparison.csv"), index=False)
        user_print(table.to_string(index=False), level="info")
        return table

    def _placement_rows(self, sensors, topology, result, scaler, ctx, models_by_role, variants):
        mask = np.zeros(topology.n_nodes, dtype=bool)
        mask[list(sensors)] = True
        rows = []
        for role in ROLES:
            dataset = self._dataset(result, scaler, role, sensor_mask=mask)
            rows.extend(evaluate_variants(models_by_role[role], variants, dataset, ctx, scaler, self.seed))
        return rows

    def relocate_sensors(self, placements=RELOCATION_PLACEMENTS):
        """
        Evaluates the trained models under random sensor sets of the same size.
        Nothing is retrained; readings at every node come from measured.csv.
        """
        topology = load_topology(self.path("simulation"))
        ctx = self._context(topology)
        scaler = self._scaler()
        result = load_simulation(self.path("simulation", "test"))
        variants = self.config.section("aignn").variants
        models_by_role = {role: self.load_models(role, topology) for role in ROLES}
        stage_dir = self.begin_stage("relocation")
        count = int(result.sensor_mask.sum())
        sensor_sets = [random_sensors(topology, count, self.seed + 100 + k) for k in range(placements)]
        per_placement = run_jobs(lambda s: self._placement_rows(s, topology, result, scaler, ctx, models_by_role,
                                                                variants), sensor_sets, self.jobs)
        frames = []
        for k, rows in enumerate(per_placement):
            frame = pd.DataFrame(rows)
            frame["placement"] = k
            frames.append(frame)
        raw = pd.concat(frames, ignore_index=True)
        raw.to_csv(os.path.join(stage_dir, "placements.csv"), index=False)
        summary = raw.groupby(["model", "role"], sort=False)["rel_error"].agg(["mean", "std"]).reset_index()
        summary = summary.rename(columns={"mean": "rel_error_mean", "std": "rel_error_std"})
        summary["placements"] = placements
        summary["seed"] = self.seed
        summary.to_csv(os.path.join(stage_dir, "relocation.csv"), index=False)
        user_print(summary.to_string(index=False), level="info")
        return summary

    def run_all(self):
        """Runs every stage in workflow order."""
        self.gen_trajectories()
        self.train_nar()
        self.simulate()
        self.train_models()
        self.evaluate()
        self.compare()
        self.calibrate()
        self.detect()
        self.relocate_sensors()
        user_print("All stages finished.", level="success")
