import pytest
import os
import json
import numpy as np
import pandas as pd
from src.app_controller import ROLES, ExperimentController
from src.utils import ArtifactError, read_json
from src.wdn_sim import load_simulation, load_topology

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "config.json")


@pytest.fixture
def tiny_config(tmp_path):
    # Zmenšená konfigurace, aby celý běh trval jen chvíli
    with open(CONFIG_PATH, "r", encoding="utf-8") as f:
        data = json.load(f)
    data["output_dir"] = str(tmp_path / "runs")
    data["nar"].update({"count": 6, "n_nodes": 5, "edge_probability": 0.5, "hidden_dim": 4, "epochs": 1,
                        "batch_size": 3, "validation_fraction": 0.2})
    data["aignn"].update({"rollout_steps": 1, "cheb_order": 2, "encoder_hidden": 4, "decoder_hidden": 4,
                          "history": 3, "epochs": 1, "batch_size": 16, "variants": ["chebnet", "aignn"]})
    data["chebnet"].update({"orders": [2, 2, 2], "filters": [4, 4, 4]})
    data["simulation"].update({"n_junctions": 8, "sensor_count": 3, "train_steps": 60, "calibration_steps": 60,
                               "test_steps": 60, "control_steps": 30, "leak_start_after": 15,
                               "leak_min_duration": 20})
    data["detection"].update({"window": 3, "consecutive_steps": 5, "reference_steps": 10, "xi_step": 0.5})
    config_file = tmp_path / "config.json"
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(data, f)
    return str(config_file)


@pytest.fixture
def controller(tiny_config):
    return ExperimentController(tiny_config, seed=0, jobs=1)


def test_overrides_apply(tiny_config, tmp_path):
    controller = ExperimentController(tiny_config, seed=5, jobs=2, output_dir=str(tmp_path / "elsewhere"))
    assert (controller.seed, controller.jobs) == (5, 2)
    assert controller.path("nar").startswith(str(tmp_path / "elsewhere"))


def test_missing_inputs_are_reported(controller):
    with pytest.raises(ArtifactError):
        controller.train_nar()
    with pytest.raises(ArtifactError):
        controller.compare()


def test_stage_snapshot(controller):
    dataset = controller.gen_trajectories()
    assert len(dataset) == 6
    stage_dir = controller.path("trajectories")
    assert read_json(os.path.join(stage_dir, "resolved_config.json"))["seed"] == 0
    for name in ("VERSION", "run.log", "trajectories.ndjson"):
        assert os.path.exists(os.path.join(stage_dir, name))


def test_full_workflow(controller):
    controller.run_all()
    for parts in [("nar", "processor.npz"), ("models", "scaler.json"), ("evaluation", "evaluation.csv"),
                  ("comparison", "comparison.csv"), ("calibration", "calibration.json"),
                  ("detection", "detection.csv"), ("relocation", "relocation.csv")]:
        assert os.path.exists(controller.path(*parts))
    for role in ROLES:
        for name in ("chebnet", "aignn"):
            assert os.path.exists(controller.path("models", f"{role.lower()}_{name}.npz"))

    comparison = pd.read_csv(controller.path("comparison", "comparison.csv"))
    assert set(comparison["model"]) == {"chebnet", "aignn"}
    assert len(comparison) == 4

    # Opakovaný běh se stejným seedem dává stejné soubory
    with open(controller.path("detection", "detection.csv"), "rb") as f:
        first = f.read()
    controller.detect()
    with open(controller.path("detection", "detection.csv"), "rb") as f:
        assert f.read() == first

    # Původní rozmístění senzorů reprodukuje standardní vyhodnocení
    evaluation = pd.read_csv(controller.path("evaluation", "evaluation.csv"))
    rows = controller._placement_rows(*_identity_placement(controller))
    for row in rows:
        match = evaluation[(evaluation["model"] == row["model"]) & (evaluation["role"] == row["role"])]
        assert row["rel_error"] == pytest.approx(float(match["rel_error"].iloc[0]))


def _identity_placement(controller):
    topology = load_topology(controller.path("simulation"))
    result = load_simulation(controller.path("simulation", "test"))
    models = {role: controller.load_models(role, topology) for role in ROLES}
    sensors = tuple(int(v) for v in np.flatnonzero(result.sensor_mask))
    return (sensors, topology, result, controller._scaler(), controller._context(topology), models,
            ["chebnet", "aignn"])
