"""
SVG line charts for training curves and trajectory overlays.

Every series is drawn as one line whose SVG group id is
``series-<name>``; each chart carries a legend. Output is deterministic
(fixed hash salt, no date metadata).
"""

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

from .config import setup_logger
from .errors import ShapeError
from .trainer import TrainRecord

logger = setup_logger('Plots')

SERIES_PREFIX = 'series-'
OVERLAY_SERIES = ('leader', 'follower', 'learning', 'idm', 'hybrid')


def _style() -> None:
    plt.style.use('seaborn-v0_8')
    sns.set_palette("husl")
    plt.rcParams['svg.hashsalt'] = 'idm-follower'
    plt.rcParams['svg.fonttype'] = 'none'


def _save(fig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    logger.info(f"💾 Plot saved to: {path}")


def _draw_series(ax, x: np.ndarray, series: Mapping[str, Sequence[float]], **line_kwargs) -> None:
    for name, values in series.items():
        values = np.asarray(values, dtype=np.float64)
        if values.shape != x.shape:
            raise ShapeError(f"series {name!r} has shape {values.shape}, expected {x.shape}")
        line, = ax.plot(x, values, label=name, **line_kwargs)
        line.set_gid(f"{SERIES_PREFIX}{name}")


def plot_loss_curves(record: TrainRecord, path: str, title: str = 'Training loss') -> str:
    """Training and validation loss per epoch."""
    _style()
    epochs = np.arange(1, record.epochs + 1, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(8, 5))
    _draw_series(ax, epochs, {'train': record.train_loss, 'validation': record.val_loss},
                 linewidth=2, marker='o', markersize=3)
    if record.best_epoch > 0:
        ax.axvline(record.best_epoch, color='grey', linestyle='--', alpha=0.6)
    ax.set_title(title, fontweight='bold')
    ax.set_xlabel('Epoch')
    ax.set_ylabel('Loss (m)')
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)
    return path


def plot_trajectory_overlay(series: Mapping[str, Sequence[float]], dt: float, path: str,
                            title: str = 'Predicted follower trajectory') -> str:
    """
    Position-time overlay of any number of equally long series.

    Typical series are the true leader and follower plus the learning,
    IDM and hybrid predictions (OVERLAY_SERIES).
    """
    if not series:
        raise ShapeError("overlay needs at least one series")
    _style()
    length = len(next(iter(series.values())))
    t = np.arange(length, dtype=np.float64) * dt
    fig, ax = plt.subplots(figsize=(9, 5))
    _draw_series(ax, t, series, linewidth=2)
    ax.set_title(title, fontweight='bold')
    ax.set_xlabel('Time (s)')
    ax.set_ylabel('Position (m)')
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)
    return path
