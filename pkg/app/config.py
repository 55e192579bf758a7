"""
Configuration Management
Service settings come from environment variables; solver parameters come from
defaults, an optional TOML config file and command-line flags (in that order).
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import Any, Dict, List, Optional, Union
from pathlib import Path
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dotenv import load_dotenv

# Load .env file
load_dotenv()

class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore"
    )

    # Application
    ENVIRONMENT: str = "development"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # API
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000
    API_URL: str = "http://localhost:8000"
    CORS_ORIGINS: Union[List[str], str] = '["http://localhost:3000"]'

    @field_validator('CORS_ORIGINS', mode='before')
    @classmethod
    def parse_cors_origins(cls, v):
        """Parse CORS_ORIGINS from string or list"""
        if isinstance(v, str):
            try:
                return json.loads(v)
            except json.JSONDecodeError:
                return [origin.strip() for origin in v.split(',')]
        return v

    # Worker threads for dataset construction and benchmark grids
    THREADS: int = 1

    # Storage
    DATA_DIR: str = "./data"
    MODEL_DIR: str = "./models"
    UPLOAD_DIR: str = "/tmp/edge-selector/uploads"
    RESULTS_DIR: str = "./results"
    BKS_FILE: str = str(Path(__file__).parent / "data" / "bks.txt")

    # Instance upload
    MAX_FILE_SIZE_MB: int = 20
    ALLOWED_EXTENSIONS: str = "vrp,txt"

    @property
    def allowed_extensions_list(self) -> List[str]:
        """Parse ALLOWED_EXTENSIONS string into list"""
        return [ext.strip() for ext in self.ALLOWED_EXTENSIONS.split(',')]

    # Database
    DATABASE_URL: str = "sqlite:///./edge_selector.db"


class SolverDefaults(BaseModel):
    """
    Solver parameters. Not read from the environment: they are overridden by a
    TOML config file and then by command-line flags.
    """
    model_config = ConfigDict(extra="forbid")

    # Granular neighbourhoods
    granularity: int = Field(default=25, ge=0)
    rank_table_size: int = Field(default=50, ge=1)
    matrix_cache_limit: int = Field(default=2000, ge=1)

    # Time budget: N x 2.4 s scaled by the desk factor
    seconds_per_node: float = Field(default=2.4, gt=0)
    desk_factor: float = Field(default=0.05, gt=0)

    # Simulated annealing
    sa_initial_factor: float = Field(default=0.1, gt=0)
    sa_cooling: float = Field(default=0.999, gt=0, lt=1)
    sa_floor: float = Field(default=1e-6, gt=0)

    # Path driver
    perturbation_strength: int = Field(default=3, ge=1)
    restart_after: int = Field(default=2000, ge=1)

    # Population driver
    population_size: int = Field(default=25, ge=2)
    generation_size: int = Field(default=40, ge=1)
    stall_iterations: int = Field(default=500, ge=1)
    n_close: int = Field(default=5, ge=1)
    n_elite: int = Field(default=4, ge=0)
    target_feasible_low: float = Field(default=0.2, ge=0, le=1)
    target_feasible_high: float = Field(default=0.4, ge=0, le=1)
    penalty_factor: float = Field(default=1.2, gt=1)
    penalty_adjust_every: int = Field(default=100, ge=1)
    repair_probability: float = Field(default=0.5, ge=0, le=1)

    # Selectors
    threshold_epsilon: float = Field(default=1e-3, gt=0)
    depot_truncate: int = Field(default=1000, ge=2)

    def time_limit(self, n_nodes: int) -> float:
        """Default wall-clock budget in seconds for an instance with n_nodes nodes"""
        return n_nodes * self.seconds_per_node * self.desk_factor


def load_config_file(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    """Read a TOML config file; a missing path yields an empty mapping"""
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def resolve_solver_defaults(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None
) -> SolverDefaults:
    """
    Merge solver parameters with precedence flags > config file > defaults

    Args:
        config_path: Optional TOML file; its [solver] table (or top level) is used
        overrides: Values given on the command line; None entries are ignored

    Returns:
        Validated SolverDefaults
    """
    values: Dict[str, Any] = {}
    file_values = load_config_file(config_path)
    values.update(file_values.get("solver", file_values))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return SolverDefaults(**values)


# Create global settings instance
settings = Settings()
solver_defaults = SolverDefaults()

# Create upload directory if it doesn't exist
os.makedirs(settings.UPLOAD_DIR, exist_ok=True)
