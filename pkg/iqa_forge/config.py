# iqa_forge/config.py

import logging
from functools import lru_cache
from typing import Literal, Optional

from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from iqa_forge.utils.enhanced_errors import ConfigError

# Seed used by every stochastic command when --seed is not given.
DEFAULT_SEED = 2025

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class Settings(BaseSettings):
    """Process-wide settings read from IQA_FORGE_* environment variables or a .env file."""

    model_config = SettingsConfigDict(env_prefix="IQA_FORGE_", env_file=".env", extra="ignore")

    log: Literal["error", "info", "debug"] = "info"
    jobs: int = 1
    seed: int = DEFAULT_SEED


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    try:
        return Settings()
    except PydanticValidationError as e:
        issues = [{"field": "IQA_FORGE_" + ".".join(str(p) for p in err["loc"]).upper(), "message": err["msg"]}
                  for err in e.errors()]
        raise ConfigError("Invalid environment settings: "
                          + "; ".join(f"{i['field']}: {i['message']}" for i in issues),
                          details={"issues": issues},
                          suggestions=["IQA_FORGE_LOG accepts error, info or debug"],
                          original_exception=e)


def configure_logging(level: Optional[str] = None) -> None:
    """Install the root handler once, at the level given by IQA_FORGE_LOG."""
    level_name = level or get_settings().log
    logging.basicConfig(
        level=LOG_LEVELS.get(level_name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(LOG_LEVELS.get(level_name, logging.INFO))
