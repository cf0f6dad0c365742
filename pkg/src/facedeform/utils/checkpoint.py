"""Save and restore network parameters, optimizer moments and the run configuration."""

from __future__ import annotations

import logging
import pickle
from pathlib import Path
from typing import Any

import torch

from ..errors import ParseError
from .config import RunConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "facedeform-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    config: RunConfig,
    optimizer: dict[str, Any] | None = None,
    *,
    epoch: int | None = None,
) -> Path:
    """Write a checkpoint container.

    Args:
        path: Destination file
        tensors: Named parameter tensors (a module's ``state_dict``)
        config: Configuration the tensors belong to
        optimizer: Serialised optimizer state, if any
        epoch: Completed epoch count, stored for reference

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": epoch,
        "tensors": {name: t.detach().clone() for name, t in tensors.items()},
        "optimizer": optimizer,
    }
    torch.save(payload, path)
    logger.debug("Checkpoint written to %s", path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], RunConfig, dict | None]:
    """Read a container written by :func:`save_checkpoint`.

    Returns:
        (tensors, config, optimizer state or None)

    Raises:
        ParseError: If the file is not a checkpoint of a supported version
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise ParseError(f"cannot read checkpoint: {e}", path=path) from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a facedeform checkpoint", path=path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {payload.get('version')}", path=path)
    return payload["tensors"], RunConfig(**payload["config"]), payload.get("optimizer")
