"""Supporting modules: configuration, logging, workers, images and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, bundled_config, load_config
from .heatmap import deviation_colors, render_heatmap_png
from .log_handler import CallbackLogHandler, install_cli_logging
from .worker_pool import WorkerPool

__all__ = [
    "CallbackLogHandler",
    "RunConfig",
    "WorkerPool",
    "bundled_config",
    "deviation_colors",
    "install_cli_logging",
    "load_checkpoint",
    "load_config",
    "render_heatmap_png",
    "save_checkpoint",
]
