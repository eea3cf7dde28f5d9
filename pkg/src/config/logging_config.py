import os
from pathlib import Path

# Base directory of the project
BASE_DIR = Path(__file__).parent.parent

# stdout carries command results, so the console handler always writes to stderr.
# Runs append one JSON object per record to ``run_log``.
LOGGING_CONFIG = {
    "development": {
        "log_level": "DEBUG",
        "run_log": BASE_DIR / "logs" / "dev" / "chirality-kit.jsonl",
        "color": True,
    },
    "production": {
        "log_level": "INFO",
        "run_log": BASE_DIR / "logs" / "prod" / "chirality-kit.jsonl",
        "color": False,
    },
    "testing": {
        "log_level": "DEBUG",
        "run_log": None,  # Console only
        "color": False,
    },
}

RUN_LOG_MAX_BYTES = 10 * 1024 * 1024
RUN_LOG_BACKUPS = 5


def resolve_logging_config(env=None, level=None):
    """Pick the profile for ``env`` (falling back to development) and apply a level override."""
    env = env or os.getenv("CHIRALITY_ENV", "development")
    config = dict(LOGGING_CONFIG.get(env, LOGGING_CONFIG["development"]))
    level = level or os.getenv("CHIRALITY_LOG_LEVEL")
    if level:
        config["log_level"] = level.upper()
    return config


CURRENT_LOGGING_CONFIG = resolve_logging_config()
