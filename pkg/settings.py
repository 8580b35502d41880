"""
settings.py - Run configuration, environment settings and version string

Run configs (configs/*.conf) are flat KEY=value files read with python-dotenv.
Process settings come from the environment (or a .env file):
- INFLUENCE_AD_LOG_LEVEL: logging level (default INFO)
- INFLUENCE_AD_THREADS: torch intra-op threads (default: torch's choice)
- INFLUENCE_AD_DATA_DIR: base directory for relative recipe source paths
"""

import logging
import os
import subprocess
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from influence import InfluenceConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

SCORERS = ("tracinad", "reconstruction", "dsvdd-plain", "self-influence")
SCORER_MODELS = {"reconstruction": "vae", "dsvdd-plain": "dsvdd"}


def _split_list(value):
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return value


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["vae", "dsvdd"]
    hidden_widths: Tuple[int, ...]
    latent_dim: int = Field(ge=1)
    mc_samples: int = Field(default=1, ge=1)
    activation: Literal["tanh", "relu"] = "tanh"

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _widths(cls, value):
        return _split_list(value)


class RunConfig(BaseModel):
    """One experiment: dataset, model, training, influence and scorers"""

    model_config = ConfigDict(frozen=True, protected_namespaces=())

    dataset: str
    model_kind: Literal["vae", "dsvdd"] = "vae"
    hidden_widths: Tuple[int, ...]
    latent_dim: int = Field(ge=1)
    mc_samples: int = Field(default=1, ge=1)
    activation: Literal["tanh", "relu"] = "tanh"

    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    learning_rate: float = Field(gt=0)
    checkpoint_step: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)

    subsample_size: int = Field(ge=1)
    resample_per_checkpoint: bool = False

    scorers: Tuple[str, ...] = ("tracinad",)
    runs: int = Field(default=1, ge=1)
    output_dir: str = "runs/default"

    @field_validator("hidden_widths", "scorers", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _check_scorers(self):
        if not self.scorers:
            raise ValueError("at least one scorer is required")
        for scorer in self.scorers:
            if scorer not in SCORERS:
                raise ValueError(f"unknown scorer {scorer!r} (expected one of {', '.join(SCORERS)})")
            needed = SCORER_MODELS.get(scorer)
            if needed and needed != self.model_kind:
                raise ValueError(f"scorer {scorer!r} needs a {needed} model, config trains {self.model_kind}")
        return self

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        """
        Parse a KEY=value config file; `dataset` is resolved relative to the file.

        Args:
            path: config file
            overrides: values that win over the file (CLI flags); None entries are ignored
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
        raw.update({k: v for k, v in overrides.items() if v is not None})
        dataset = raw.get("dataset")
        if dataset and not Path(dataset).is_absolute():
            raw["dataset"] = str((path.parent / dataset).resolve())
        try:
            return cls(**raw)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first["loc"]) or "config"
            raise ConfigError(f"{path}: {where}: {first['msg']}")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(kind=self.model_kind, hidden_widths=self.hidden_widths, latent_dim=self.latent_dim,
                           mc_samples=self.mc_samples, activation=self.activation)

    def run_seed(self, run_index: int) -> int:
        return self.seed + run_index

    def train_config(self, run_index: int = 0) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           checkpoint_step=self.checkpoint_step, seed=self.run_seed(run_index))

    def influence_config(self, run_index: int = 0) -> InfluenceConfig:
        return InfluenceConfig(subsample_size=self.subsample_size,
                               resample_per_checkpoint=self.resample_per_checkpoint,
                               mc_loss_samples=self.mc_samples, seed=self.run_seed(run_index))

    def resolved(self) -> Dict:
        return self.model_dump(mode="json")


# =========================================================================
# PROCESS SETTINGS
# =========================================================================

def load_environment():
    load_dotenv()


def configure_logging():
    level = os.environ.get("INFLUENCE_AD_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def configured_threads() -> Optional[int]:
    value = os.environ.get("INFLUENCE_AD_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"INFLUENCE_AD_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ConfigError(f"INFLUENCE_AD_THREADS must be >= 1, got {threads}")
    return threads


def version_string() -> str:
    """`git describe` of the checkout when available, else the package version"""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
