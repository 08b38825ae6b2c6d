"""Application configuration and the table of numeric defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

ROOT_DIR = Path.cwd()
ENV_FILE = ROOT_DIR / ".env"


@dataclass(frozen=True)
class Defaults:
    """Numeric defaults shared by the library, the CLI and ``--help``."""

    alpha: float = 0.05
    m_rule: str = "sqrt"
    ridge: float = 1e-8
    learning_rate: float = 1e-3
    iterations: int = 200
    max_theta_norm: float = 1e4
    folds: int = 4
    repetitions: int = 100
    top_k: int = 20
    top_by_value: int = 3
    n_clusters: int = 4
    kmeans_restarts: int = 10
    rejection_budget: int = 1000
    n_mc: int = 100_000
    n_train: int = 10_000
    n_warmup: int = 3_000
    k_actions: int = 3
    seed: int = 0

    def as_rows(self) -> list[tuple[str, str]]:
        return [(name, str(value)) for name, value in asdict(self).items()]


DEFAULTS = Defaults()


class Settings(BaseSettings):
    """Typed app settings loaded from environment."""

    model_config = SettingsConfigDict(
        env_file=ENV_FILE, env_file_encoding="utf-8", env_prefix="IPL_", extra="ignore"
    )

    seed: int | None = Field(
        default=None, description="Overrides --seed on every subcommand when set (IPL_SEED)."
    )
    log_level: str = "INFO"
    logs_dir: Path = ROOT_DIR / "logs"
    output_dir: Path = ROOT_DIR / "runs"
    jobs: int = Field(default=1, ge=1)


def get_settings() -> Settings:
    """Load and validate settings from .env and process env."""
    load_dotenv(ENV_FILE)
    return Settings()


def resolve_seed(cli_seed: int, settings: Settings | None = None) -> int:
    """``IPL_SEED`` wins over the command-line seed."""
    active = settings or get_settings()
    return cli_seed if active.seed is None else active.seed
