import json
import logging
import sys
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import IO, Dict, Optional

from src.config.logging_config import CURRENT_LOGGING_CONFIG, RUN_LOG_BACKUPS, RUN_LOG_MAX_BYTES

# extras that land in the run log as structured fields
STRUCTURED_EXTRAS = ("metrics", "error")

# one handler per run log file, shared by every logger writing to it
_RUN_LOG_HANDLERS: Dict[Path, RotatingFileHandler] = {}


class ConsoleFormatter(logging.Formatter):
    """Single-line stderr records, level-colored only when asked to."""

    COLORS = {
        logging.DEBUG: "\x1b[38;21m",
        logging.INFO: "\x1b[38;5;39m",
        logging.WARNING: "\x1b[38;5;226m",
        logging.ERROR: "\x1b[38;5;196m",
        logging.CRITICAL: "\x1b[31;1m",
    }
    RESET = "\x1b[0m"

    def __init__(self, color: bool = False):
        super().__init__("%(asctime)s %(levelname)-8s %(name)s: %(message)s", datefmt="%H:%M:%S")
        self.color = color

    def format(self, record):
        line = super().format(record)
        if self.color:
            return f"{self.COLORS.get(record.levelno, '')}{line}{self.RESET}"
        return line


class RunLogFormatter(logging.Formatter):
    """One JSON object per line, so a run log can be read back with ``pandas.read_json(lines=True)``."""

    def format(self, record):
        entry = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "name": record.name,
            "message": record.getMessage(),
            "function": record.funcName,
            "line": record.lineno,
        }
        for key in STRUCTURED_EXTRAS:
            value = getattr(record, key, None)
            if value:
                entry[key] = value

        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)

        return json.dumps(entry, default=str)


def run_log_handler(path: Path) -> RotatingFileHandler:
    path = Path(path).resolve()
    if path not in _RUN_LOG_HANDLERS:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = RotatingFileHandler(
            filename=path, maxBytes=RUN_LOG_MAX_BYTES, backupCount=RUN_LOG_BACKUPS, encoding="utf-8"
        )
        handler.setFormatter(RunLogFormatter())
        _RUN_LOG_HANDLERS[path] = handler
    return _RUN_LOG_HANDLERS[path]


def setup_logger(
    name: str,
    log_level: str = CURRENT_LOGGING_CONFIG["log_level"],
    run_log: Optional[Path] = CURRENT_LOGGING_CONFIG["run_log"],
    stream: IO = sys.stderr,
    color: Optional[bool] = None,
) -> logging.Logger:
    """
    Set up a logger with a stderr console handler and, when ``run_log`` is set, the shared JSON-lines run log.

    Args:
        name: Name of the logger
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        run_log: JSON-lines file shared by all loggers, None for console only
        stream: Stream for the console handler
        color: Force colors on or off; by default the profile decides, and only for terminals

    Returns:
        logging.Logger: Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level.upper()))

    # Remove existing handlers
    logger.handlers = []

    if color is None:
        color = CURRENT_LOGGING_CONFIG["color"] and getattr(stream, "isatty", lambda: False)()
    console_handler = logging.StreamHandler(stream)
    console_handler.setFormatter(ConsoleFormatter(color=color))
    logger.addHandler(console_handler)

    if run_log:
        logger.addHandler(run_log_handler(run_log))

    return logger
