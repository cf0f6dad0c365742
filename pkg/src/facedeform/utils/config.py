"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from ..errors import InvalidParameterError, ParseError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

_CHOICES = {
    "graph_weighting": ("uniform", "gaussian"),
    "kernel": ("position", "displacement"),
}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline.

    Network sizes follow desk-scale defaults; loss weights, learning rate, step count
    and widths are toolkit choices where the method leaves them open.
    """

    # Encoding / network
    k: int = 8
    points_per_subcloud: int = 100
    subclouds: int = 5
    heads: int = 4
    width: int = 64
    graph_feature_width: int = 32
    positional_width: int = 24
    graph_weighting: str = "uniform"
    coord_scale: float = 100.0
    lstm_depth: int = 3
    lstm_steps: int = 3

    # Losses / optimisation
    lambda_cd: float = 1.0
    lambda_smooth: float = 0.1
    lambda_prog: float = 0.1
    smooth_squared: bool = False
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 60
    folds: int = 5
    checkpoint_every: int = 10
    seed: int = 0

    # Dense reconstruction
    k_rec: int = 10
    kernel: str = "position"
    symmetrize: bool = False
    jacobi_max_iters: int = 200
    jacobi_tol: float = 1e-4

    # Synthetic data
    n_bone: int = 1200
    n_face: int = 1600
    oracle_tau: float = 15.0
    fps_seed_index: int = 0

    # Registration
    icp_max_iters: int = 50
    icp_tol: float = 1e-6

    # Gradient check
    gradcheck_samples: int = 20
    gradcheck_trials: int = 3
    gradcheck_step: float = 1e-5

    workers: int = 4

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or isinstance(value, str):
                continue
            if f.name in ("seed", "fps_seed_index", "k_rec", "icp_max_iters"):
                if value < 0:
                    raise InvalidParameterError(f"{f.name} must be >= 0, got {value}")
            elif f.name.startswith("lambda_"):
                if value < 0:
                    raise InvalidParameterError(f"{f.name} must be >= 0, got {value}")
            elif value <= 0:
                raise InvalidParameterError(f"{f.name} must be positive, got {value}")
        if self.lstm_steps < 2:
            raise InvalidParameterError("lstm_steps must be >= 2")
        if self.positional_width % 2:
            raise InvalidParameterError("positional_width must be even")
        if self.width % self.heads:
            raise InvalidParameterError(
                f"heads ({self.heads}) must divide width ({self.width})"
            )
        if self.lambda_cd == self.lambda_smooth == self.lambda_prog == 0:
            raise InvalidParameterError("at least one loss weight must be non-zero")
        for name, choices in _CHOICES.items():
            if getattr(self, name) not in choices:
                raise InvalidParameterError(f"{name} must be one of {choices}")

    def resolved_k_rec(self, n_nodes: int) -> int:
        """Reconstruction neighbourhood size; 0 means 0.05 % of N (at least 4)."""
        k = self.k_rec if self.k_rec > 0 else max(4, round(0.0005 * n_nodes))
        return min(k, n_nodes - 1)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides: Any) -> RunConfig:
        return replace(self, **overrides)


def _coerce(name: str, raw: str, kind: type, *, path: Path | None, line: int | None) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as e:
        raise ParseError(f"bad value {raw!r} for {name}", path=path, line=line) from e


def _field_types() -> dict[str, type]:
    defaults = RunConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}


def parse_assignments(
    lines: Iterable[tuple[int | None, str]], *, path: Path | None = None
) -> dict[str, Any]:
    """Parse ``key = value`` lines into typed values.

    Args:
        lines: (line number, text) pairs; blank lines and ``#`` comments are skipped
        path: Source file for error messages

    Raises:
        ParseError: For a missing ``=``, unknown key or unparsable value
    """
    types = _field_types()
    values: dict[str, Any] = {}
    for lineno, text in lines:
        text = text.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ParseError(f"expected key = value, got {text!r}", path=path, line=lineno)
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in types:
            raise ParseError(f"unknown config key {key!r}", path=path, line=lineno)
        values[key] = _coerce(key, raw, types[key], path=path, line=lineno)
    return values


def load_config(
    path: str | Path | None = None, overrides: Iterable[str] = ()
) -> RunConfig:
    """Build a RunConfig from defaults, an optional file and ``key=value`` overrides.

    Args:
        path: Config file, or None for defaults only
        overrides: Assignments applied after the file (e.g. from ``--set``)

    Returns:
        A validated RunConfig
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            values.update(parse_assignments(enumerate(fh, start=1), path=path))
        logger.debug("Loaded %d config value(s) from %s", len(values), path)
    values.update(parse_assignments((None, item) for item in overrides))
    return RunConfig(**values)


def bundled_config(name: str) -> Path:
    """Path of a config file shipped with the package (``default`` or ``tiny``)."""
    path = CONFIG_DIR / f"{name}.cfg"
    if not path.exists():
        raise InvalidParameterError(f"no bundled config named {name!r}")
    return path


def dump_config(config: RunConfig, path: str | Path) -> None:
    """Write ``config`` in the same flat format :func:`load_config` reads."""
    lines = [f"{key} = {value}" for key, value in config.to_dict().items()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
