import logging
import sys
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
import os


# --- Settings ---
class Settings(BaseSettings):
    """
    Manages numerical defaults and output locations using Pydantic.
    Reads from FLUIDPS_* environment variables or a .env file.
    """

    # Parallelism
    THREADS: int = Field(default_factory=lambda: os.cpu_count() or 1)

    # Grid defaults (time units)
    GRID_STEP: float = 0.01
    X_MAX: float = 50.0
    X_MAX_HEAVY: float = 200.0
    U_MAX: float = 100.0

    # Certificate thresholds
    RENEWAL_RESIDUAL_TOL: float = 5e-3
    MASS_TOL: float = 1e-2
    DYNAMIC_RESIDUAL_TOL: float = 1e-2
    INVARIANT_TOL: float = 0.02

    # Reports
    OUTPUT_DIR: str = "reports"
    LOG_FILE: str = "fluidps.log"
    LOG_LEVEL: str = "INFO"
    SIG_DIGITS: int = 12

    model_config = SettingsConfigDict(
        env_prefix="FLUIDPS_",
        env_file=os.environ.get("ENV_FILE", ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )


_settings = None


def get_settings() -> Settings:
    """Returns a cached settings object."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


settings = get_settings()

# --- Logging ---
# The log file sits next to the reports, except under pytest
log_dir = "/tmp" if "pytest" in sys.modules else settings.OUTPUT_DIR
log_file_path = os.path.join(log_dir, settings.LOG_FILE)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def get_logger(name: str) -> logging.Logger:
    """
    Returns the module logger, attaching the stderr and file handlers on
    first use. stdout is left to the JSON printed by ``fluidps rates``.
    """
    logger = logging.getLogger(name)
    logger.setLevel(settings.LOG_LEVEL.upper())
    if logger.handlers:
        return logger

    os.makedirs(log_dir, exist_ok=True)
    formatter = logging.Formatter(LOG_FORMAT)
    for handler in (logging.StreamHandler(sys.stderr), logging.FileHandler(log_file_path)):
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.propagate = False
    return logger


logger = get_logger("fluidps")
logger.debug(f"Settings loaded: grid step {settings.GRID_STEP:g}, {settings.THREADS} worker(s).")
