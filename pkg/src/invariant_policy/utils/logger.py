"""Logging configuration."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import structlog

_PROCESSORS: list[Any] = [
    structlog.stdlib.filter_by_level,
    structlog.stdlib.add_logger_name,
    structlog.stdlib.add_log_level,
    structlog.processors.TimeStamper(fmt="iso", utc=True),
    structlog.processors.JSONRenderer(default=str, sort_keys=True),
]


def _configure_structlog() -> None:
    structlog.configure(
        processors=_PROCESSORS,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def configure_logging(log_file: Path | None = None, log_level: str = "INFO") -> None:
    """Route JSON event lines to stderr and, when given, a log file."""
    level = getattr(logging, log_level.upper(), logging.INFO)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format="%(message)s", handlers=handlers, force=True)
    _configure_structlog()


def get_logger(name: str) -> Any:
    """Return namespaced event logger."""
    if not structlog.is_configured():
        _configure_structlog()
    return structlog.stdlib.get_logger(name)
