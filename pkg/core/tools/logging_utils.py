"""
Structured logging setup
"""

import logging
import sys
from pathlib import Path
from typing import Any, List, Optional, TextIO, Union

import structlog

_log_handle: Optional[TextIO] = None


def _level_number(level: Union[str, int]) -> int:
    if isinstance(level, int):
        return level
    number = logging.getLevelName(level.upper())
    if not isinstance(number, int):
        raise ValueError(f"unknown log level {level!r}")
    return number


def configure_logging(level: Union[str, int] = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure structlog for console or JSON-lines output

    Args:
        level: Minimum level name or number
        log_file: Append JSON lines here instead of rendering to stderr
    """
    global _log_handle
    processors: List[Any] = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
    ]
    if _log_handle is not None:
        _log_handle.close()
        _log_handle = None

    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        _log_handle = open(path, "a", encoding="utf-8")
        processors += [structlog.processors.format_exc_info, structlog.processors.JSONRenderer()]
        factory = structlog.PrintLoggerFactory(file=_log_handle)
    else:
        processors.append(
            structlog.dev.ConsoleRenderer(exception_formatter=structlog.dev.rich_traceback)
        )
        factory = structlog.PrintLoggerFactory(file=sys.stderr)

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(_level_number(level)),
        logger_factory=factory,
        cache_logger_on_first_use=False,
    )
