"""Logging handler that forwards records to a callback, plus CLI wiring."""

from __future__ import annotations

import logging
import sys
from collections.abc import Callable

PACKAGE_LOGGER = "facedeform"


class CallbackLogHandler(logging.Handler):
    """Logging handler that forwards formatted records to a callback.

    The callback receives ``(message, level)`` where level is one of ``debug``,
    ``info``, ``warning`` or ``error``. It is called on the logging thread.
    """

    LEVEL_MAP = {
        logging.DEBUG: "debug",
        logging.INFO: "info",
        logging.WARNING: "warning",
        logging.ERROR: "error",
        logging.CRITICAL: "error",
    }

    def __init__(self, callback: Callable[[str, str], None], fmt: str = "%(message)s") -> None:
        """Initialize the handler.

        Args:
            callback: Function called with (message, level) for each record
            fmt: Format string for the message part
        """
        super().__init__()
        self._callback = callback
        self.setFormatter(logging.Formatter(fmt))

    def emit(self, record: logging.LogRecord) -> None:
        try:
            msg = self.format(record)
            level = self.LEVEL_MAP.get(record.levelno, "info")
            self._callback(msg, level)
        except Exception:
            # Never raise out of logging
            self.handleError(record)


def stderr_sink(message: str, level: str) -> None:
    print(f"[{level}] {message}", file=sys.stderr)


def install_cli_logging(
    level: str | int = "INFO", sink: Callable[[str, str], None] = stderr_sink
) -> CallbackLogHandler:
    """Attach a CallbackLogHandler to the package logger, replacing earlier ones.

    Returns:
        The installed handler, so callers can remove it again
    """
    logger = logging.getLogger(PACKAGE_LOGGER)
    for old in [h for h in logger.handlers if isinstance(h, CallbackLogHandler)]:
        logger.removeHandler(old)
    handler = CallbackLogHandler(sink)
    logger.addHandler(handler)
    logger.setLevel(level if isinstance(level, int) else level.upper())
    logger.propagate = False
    return handler
