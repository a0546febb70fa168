"""
Trajectory error metrics shared by calibration, training and evaluation.
"""

import numpy as np

from .errors import ShapeError


def _as_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    return pred, truth


def rmse(pred, truth) -> float:
    """Root of the mean squared pointwise difference, in meters."""
    pred, truth = _as_pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def fde(pred, truth) -> float:
    """Absolute error at the final sample, in meters."""
    pred, truth = _as_pair(pred, truth)
    return float(abs(pred[-1] - truth[-1]))


def batch_rmse(pred, truth) -> np.ndarray:
    """Per-row RMSE for (windows, horizon) arrays."""
    pred, truth = _as_pair(pred, truth)
    return np.sqrt(np.mean((pred - truth) ** 2, axis=-1))


def batch_fde(pred, truth) -> np.ndarray:
    """Per-row final displacement error for (windows, horizon) arrays."""
    pred, truth = _as_pair(pred, truth)
    return np.abs(pred[..., -1] - truth[..., -1])
