import pytest
from unittest.mock import MagicMock, patch
from src.interface import COMMANDS, CommandLine
from src.main import default_config_path, main
from src.utils import ArtifactError


@pytest.fixture
def mock_controller():
    return MagicMock()


@pytest.fixture
def cli(mock_controller):
    factory = MagicMock(return_value=mock_controller)
    return CommandLine("config.json", controller_factory=factory)


@pytest.mark.parametrize("command, method", [
    ("gen-trajectories", "gen_trajectories"),
    ("train-nar", "train_nar"),
    ("simulate", "simulate"),
    ("train-models", "train_models"),
    ("evaluate", "evaluate"),
    ("calibrate", "calibrate"),
    ("detect", "detect"),
    ("compare", "compare"),
    ("run-all", "run_all"),
])
def test_command_calls_stage(cli, mock_controller, command, method):
    # Každý příkaz volá odpovídající metodu kontroleru
    assert cli.run([command]) == 0
    getattr(mock_controller, method).assert_called_once()


def test_common_overrides(cli):
    cli.run(["simulate", "--config", "other.json", "--seed", "3", "--jobs", "2", "--out", "runs/x"])
    cli.controller_factory.assert_called_once_with("other.json", seed=3, jobs=2, output_dir="runs/x")


def test_relocate_placements(cli, mock_controller):
    assert cli.run(["relocate-sensors", "--placements", "7"]) == 0
    mock_controller.relocate_sensors.assert_called_once_with(7)
    assert cli.run(["relocate-sensors", "--placements", "0"]) == 1


def test_explain_needs_no_controller(cli):
    with patch("src.interface.explain_config") as mock_explain:
        assert cli.run(["explain"]) == 0
    mock_explain.assert_called_once()
    cli.controller_factory.assert_not_called()


def test_toolkit_error_exit_code(cli, mock_controller):
    mock_controller.compare.side_effect = ArtifactError("Missing evaluation.csv")
    with patch("src.interface.user_print") as mock_print:
        assert cli.run(["compare"]) == 1
    assert "Missing evaluation.csv" in mock_print.call_args[0][0]


def test_unexpected_error_exit_code(cli, mock_controller):
    mock_controller.detect.side_effect = RuntimeError("boom")
    assert cli.run(["detect"]) == 2


def test_unknown_command_rejected(cli):
    with pytest.raises(SystemExit):
        cli.run(["crawl"])


def test_every_command_registered():
    names = {cmd.name for cmd in COMMANDS}
    assert {"gen-trajectories", "train-nar", "simulate", "train-models", "evaluate", "calibrate", "detect",
            "compare", "relocate-sensors", "explain", "run-all"} == names


def test_main_returns_status():
    with patch("src.main.CommandLine") as MockCommandLine:
        MockCommandLine.return_value.run.return_value = 0
        assert main(["explain"]) == 0
    MockCommandLine.return_value.run.assert_called_once_with(["explain"])
    assert default_config_path().endswith("config.json")
