import json
import os
from typing import List, Optional
from pydantic import BaseModel, Field, ValidationError, model_validator
from src.utils import ConfigError, user_print
from src.logger import logger

"""
Config class for managing configuration files.
- Implements a singleton pattern to ensure a single instance.
- Handles loading and fallback for main and backup configuration files.
- Validates every section with pydantic models and applies command-line overrides.
"""

MODEL_VARIANTS = ("chebnet", "aignn", "aignn_ft", "aignn_pos", "chebnet_in", "chebnet_emb")


class NarConfig(BaseModel):
    count: int = Field(1000, ge=1)
    n_nodes: int = Field(16, ge=2)
    edge_probability: float = Field(0.3, ge=0.0, le=1.0)
    hidden_dim: int = Field(96, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    supervise_capacity: bool = True


class AignnConfig(BaseModel):
    rollout_steps: int = Field(3, ge=1)
    cheb_order: int = Field(3, ge=1)
    encoder_hidden: int = Field(32, ge=1)
    decoder_hidden: int = Field(16, ge=1)
    history: int = Field(12, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    use_pipe_features: bool = True
    variants: List[str] = Field(default_factory=lambda: ["chebnet", "aignn", "chebnet_in", "chebnet_emb"])

    @model_validator(mode="after")
    def _known_variants(self):
        unknown = [v for v in self.variants if v not in MODEL_VARIANTS]
        if unknown:
            raise ValueError(f"unknown model variants {unknown}; choose from {list(MODEL_VARIANTS)}")
        if not self.variants:
            raise ValueError("at least one model variant is required")
        return self


class ChebNetConfig(BaseModel):
    orders: List[int] = Field(default_factory=lambda: [4, 4, 4])
    filters: List[int] = Field(default_factory=lambda: [32, 32, 16])
    output_order: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _three_hidden_layers(self):
        if len(self.orders) != 3 or len(self.filters) != 3:
            raise ValueError("chebnet needs exactly three hidden orders and three filter sizes")
        if min(self.orders) < 1 or min(self.filters) < 1:
            raise ValueError("chebnet orders and filters must be positive")
        return self


class SimulationConfig(BaseModel):
    n_junctions: int = Field(40, ge=8)
    topology_seed: int = 1
    reservoir_head: float = Field(60.0, gt=0.0)
    resistance_scale: float = Field(0.01, gt=0.0)
    base_demand_min: float = Field(0.5, ge=0.0)
    base_demand_max: float = Field(1.5, ge=0.0)
    demand_noise: float = Field(0.05, ge=0.0)
    supply_bound: float = Field(1000.0, gt=0.0)
    sensor_count: int = Field(8, ge=1)
    sensor_noise: float = Field(0.05, ge=0.0)
    resistance_mismatch: float = Field(0.1, ge=0.0, lt=1.0)
    train_steps: int = Field(2016, ge=1)
    calibration_steps: int = Field(2016, ge=1)
    test_steps: int = Field(2016, ge=1)
    control_steps: int = Field(1008, ge=1)
    leaks_per_split: int = Field(1, ge=1)
    leak_emitter: float = Field(0.5, gt=0.0)
    leak_start_after: int = Field(576, ge=0)
    leak_min_duration: int = Field(576, ge=1)

    @model_validator(mode="after")
    def _demand_range(self):
        if self.base_demand_min > self.base_demand_max:
            raise ValueError("base_demand_min must not exceed base_demand_max")
        if self.sensor_count > self.n_junctions:
            raise ValueError("sensor_count cannot exceed n_junctions")
        return self


class DetectionConfig(BaseModel):
    window: int = Field(12, ge=1)
    consecutive_steps: int = Field(72, ge=1)
    xi: float = Field(3.0, gt=0.0)
    xi_start: float = Field(3.0, gt=0.0)
    xi_step: float = Field(0.05, gt=0.0)
    xi_floor: float = Field(0.0, ge=0.0)
    target_fraction: float = Field(12 / 14, gt=0.0, le=1.0)
    reference_steps: Optional[int] = Field(288, ge=1)
    top_k: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _grid_order(self):
        if self.xi_floor > self.xi_start:
            raise ValueError("xi_floor must not exceed xi_start")
        return self


class ExperimentConfig(BaseModel):
    seed: int = 0
    jobs: int = Field(1, ge=1)
    output_dir: str = "runs/desk"
    nar: NarConfig
    aignn: AignnConfig
    chebnet: ChebNetConfig
    simulation: SimulationConfig
    detection: DetectionConfig

    @model_validator(mode="after")
    def _leaks_after_reference(self):
        # reference statistics come from the first steps after the history warm-up
        if self.detection.reference_steps is None:
            return self
        needed = self.aignn.history + self.detection.reference_steps
        if self.simulation.leak_start_after < needed:
            raise ValueError(f"leak_start_after ({self.simulation.leak_start_after}) must be at least "
                             f"history + reference_steps ({needed})")
        return self


REQUIRED_KEYS = ["seed", "jobs", "output_dir", "nar", "aignn", "chebnet", "simulation", "detection"]


class Config:
    """
    Singleton class to manage the configuration file.
    """
    _instance = None

    def __new__(cls, *args, **kwargs):
        """
        Ensures only one instance of the class exists.
        """
        if cls._instance is None:
            cls._instance = super(Config, cls).__new__(cls)
        return cls._instance

    def load(self, path):
        """
        Loads the main configuration file and sets up a fallback to a backup file.

        Args:
            path (str): Path to the main configuration file.
        """
        self.main_path = path
        self.backup_path = os.path.join(os.path.dirname(path), 'config_backup.json')
        self._load_with_fallback()

    def _load_with_fallback(self):
        """
        Attempts to load the main configuration file. If it fails, it tries the backup file.
        Exits the program if both fail.
        """
        if not self._try_load(self.main_path):
            user_print("Main config invalid, trying backup config...", level="command")
            if not self._try_load(self.backup_path):
                user_print("Both main and backup config files are invalid. Exiting.", level="error")
                raise SystemExit(1)

    def _try_load(self, path):
        """
        Tries to load a configuration file and validates its keys and sections.

        Args:
            path (str): Path to the configuration file.

        Returns:
            bool: True if the file is successfully loaded and valid, False otherwise.
        """
        if not os.path.exists(path):
            return False
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
            for k in REQUIRED_KEYS:
                if k not in data:
                    logger.warning(f"Config {path} is missing key '{k}'")
                    return False
            self.experiment = ExperimentConfig.model_validate(data)
            self.data = self.experiment.model_dump()
            self.loaded_path = path
            return True
        except (json.JSONDecodeError, IOError) as e:
            logger.warning(f"Config {path} could not be read: {e}")
            return False
        except ValidationError as e:
            logger.warning(f"Config {path} failed validation: {e}")
            return False

    def reload(self):
        """
        Reloads the configuration file. Tries the main file first, then the backup.
        Exits the program if both fail.
        """
        if not self._try_load(self.main_path):
            user_print("Main config invalid during reload, using backup config...", level="command")
            if not self._try_load(self.backup_path):
                user_print("Both main and backup config files invalid during reload. Exiting.", level="error")
                raise SystemExit(1)

    def override(self, seed=None, jobs=None, output_dir=None):
        """
        Applies command-line overrides and revalidates.

        Args:
            seed (int): Replacement base seed.
            jobs (int): Replacement worker count.
            output_dir (str): Replacement output directory.
        """
        data = dict(self.data)
        if seed is not None:
            data["seed"] = seed
        if jobs is not None:
            data["jobs"] = jobs
        if output_dir is not None:
            data["output_dir"] = output_dir
        try:
            self.experiment = ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid command-line override: {e}") from e
        self.data = self.experiment.model_dump()

    def get(self, key, default=None):
        """
        Retrieves a value from the configuration.

        Args:
            key (str): The configuration key to retrieve.
            default: The default value if the key is not found.

        Returns:
            The value associated with the key, or the default value.
        """
        return self.data.get(key, default)

    def section(self, name):
        """
        Returns the validated model of one configuration section.

        Args:
            name (str): One of nar, aignn, chebnet, simulation, detection.
        """
        return getattr(self.experiment, name)

    def resolved(self):
        """Returns the configuration as it will be used, overrides included."""
        return self.experiment.model_dump()
