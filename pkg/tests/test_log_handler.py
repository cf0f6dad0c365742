"""Tests for the callback logging handler and CLI logging setup."""

from __future__ import annotations

import logging

import pytest

from facedeform.utils.log_handler import PACKAGE_LOGGER, CallbackLogHandler, install_cli_logging


@pytest.fixture
def package_logger():
    logger = logging.getLogger(PACKAGE_LOGGER)
    saved = (list(logger.handlers), logger.level, logger.propagate)
    yield logger
    logger.handlers[:] = saved[0]
    logger.setLevel(saved[1])
    logger.propagate = saved[2]


def test_levels_are_mapped():
    seen = []
    handler = CallbackLogHandler(lambda msg, level: seen.append((msg, level)))
    logger = logging.getLogger("facedeform.tests.levels")
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)
    try:
        logger.debug("d")
        logger.warning("w %d", 2)
        logger.critical("c")
    finally:
        logger.removeHandler(handler)
    assert seen == [("d", "debug"), ("w 2", "warning"), ("c", "error")]


def test_callback_errors_do_not_escape(monkeypatch):
    def broken(msg, level):
        raise RuntimeError("sink down")

    handler = CallbackLogHandler(broken)
    calls = []
    monkeypatch.setattr(handler, "handleError", lambda record: calls.append(record))
    handler.emit(logging.makeLogRecord({"msg": "x", "levelno": logging.INFO}))
    assert len(calls) == 1


def test_install_replaces_previous_handler(package_logger):
    first, second = [], []
    install_cli_logging("INFO", lambda m, lv: first.append(m))
    install_cli_logging("WARNING", lambda m, lv: second.append(m))
    callbacks = [h for h in package_logger.handlers if isinstance(h, CallbackLogHandler)]
    assert len(callbacks) == 1

    child = logging.getLogger(f"{PACKAGE_LOGGER}.components.training")
    child.info("hidden")
    child.warning("shown")
    assert first == []
    assert second == ["shown"]
