import logging
import os
from functools import lru_cache
from typing import Literal

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class Settings(BaseSettings):
    """Process-level settings, read from the environment (prefix SIM_) or .env."""

    model_config = SettingsConfigDict(env_prefix="SIM_", env_file=".env", extra="ignore")

    workers: int = 1
    output_dir: str = "runs"
    log_level: str = "INFO"
    profile: Literal["ci", "fast", "paper"] = "fast"
    # trajectories per work unit; fixed so results never depend on the worker count
    block_size: int = 512


@lru_cache()
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: str = None) -> None:
    level = level or get_settings().log_level
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def resolve_workers(requested: int = None) -> int:
    """CLI flag wins, then SIM_WORKERS, then 1."""
    if requested is not None and requested > 0:
        return requested
    env_value = os.getenv("SIM_WORKERS")
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            logging.getLogger(__name__).warning(f"Ignoring non-integer SIM_WORKERS={env_value!r}")
    return max(1, get_settings().workers)
