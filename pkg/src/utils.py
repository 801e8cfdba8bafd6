import json
import os
from colorama import Fore, Style, init
from src.logger import logger

"""
Utility functions shared by the toolkit:
- Colored console output mirrored into the run log.
- The exception hierarchy used by all modules.
- NDJSON and resolved-config helpers for artifacts.
"""

# Initialize colorama
init(autoreset=True)

LEVEL_COLORS = {
    "info": Fore.CYAN,
    "success": Fore.GREEN,
    "simulation": Fore.BLUE,
    "command": Fore.YELLOW,
    "error": Fore.RED,
}


class ToolkitError(Exception):
    """Base class for all errors raised by the toolkit."""


class GraphError(ToolkitError, ValueError):
    """Invalid graph or flow instance."""


class ShapeError(ToolkitError, ValueError):
    """Tensor shapes do not fit the requested operation."""


class TrainingError(ToolkitError):
    """Training diverged or was given unusable data."""


class SolverError(ToolkitError):
    """Hydraulic solver failed to converge."""


class ArtifactError(ToolkitError):
    """A stage input is missing or malformed."""


class ConfigError(ToolkitError):
    """Configuration could not be loaded or validated."""


def user_print(msg, level="info"):
    """
    Prints a message to the console with color and writes it to the run log.

    Args:
        msg (str): The message to log and display.
        level (str): The level of the message (info, success, simulation, command, error).
    """
    color = LEVEL_COLORS.get(level)
    if color is not None:
        print(f"{color}{msg}{Style.RESET_ALL}")
    else:
        print(msg)
    if level == "error":
        logger.error(msg)
    else:
        logger.info(msg)


def write_ndjson(path, records):
    """
    Writes an iterable of dicts as newline-delimited JSON.

    Args:
        path (str): Target file.
        records (iterable): JSON-serializable dicts.
    """
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def read_ndjson(path):
    """
    Reads a newline-delimited JSON file.

    Args:
        path (str): Source file.

    Returns:
        list: One dict per non-empty line.
    """
    if not os.path.exists(path):
        raise ArtifactError(f"Missing artifact '{path}'. Run the producing stage first.")
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ArtifactError(f"{path}:{line_no} is not valid JSON ({e.msg}).") from e
    return records


def write_json(path, data):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def read_json(path):
    if not os.path.exists(path):
        raise ArtifactError(f"Missing artifact '{path}'. Run the producing stage first.")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path} is not valid JSON ({e.msg}).") from e


def snapshot_run(out_dir, resolved_config, version):
    """
    Writes the resolved configuration and the toolkit version next to stage outputs.

    Args:
        out_dir (str): Artifact directory of the stage.
        resolved_config (dict): Configuration after command-line overrides.
        version (str): Toolkit version string.
    """
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "resolved_config.json"), resolved_config)
    with open(os.path.join(out_dir, "VERSION"), 'w', encoding='utf-8') as f:
        f.write(version + "\n")


def explain_config():
    """
    Logs and explains the configuration file's structure and purpose.
    """
    user_print("Config file structure:", level="info")
    user_print("seed: int - base seed for every random draw", level="info")
    user_print("jobs: int - worker threads used inside a stage", level="info")
    user_print("output_dir: str - root directory for stage artifacts", level="info")
    user_print("nar: NAR dataset and training (count, n_nodes, edge_probability, hidden_dim, lr, epochs, batch_size, ...)", level="info")
    user_print("aignn: AIGNN reconstructor/predictor (rollout_steps, cheb_order, encoder_hidden, decoder_hidden, history, variants, ...)", level="info")
    user_print("chebnet: ChebNet baseline (orders, filters, output_order)", level="info")
    user_print("simulation: synthetic network, demand, leaks, sensors and split durations", level="info")
    user_print("detection: window, consecutive_steps, xi grid, target_fraction, reference_steps, top_k", level="info")
