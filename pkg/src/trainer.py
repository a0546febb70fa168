"""
Hybrid-loss training of the follower network.

The loss mixes the RMSE against observed follower positions with the
RMSE against IDM-integrated positions, weighted by mu. Optimization is
mini-batch Adam with L2 weight decay and global gradient-norm clipping;
the best-validation parameters are returned.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .autodiff import ComputationTape, Tensor, add, as_tensor, mean, mul, reshape, sqrt, square, sum_
from .config import get_thread_count, setup_logger
from .errors import CollisionError, ConfigurationError, ShapeError, TrainingError
from .follower_net import FollowerNet, WindowBatch, check_horizon, predict_batch, prepare_batch
from .idm import (IdmParams, IntegrationConfig, double_integrate_batch, open_loop_accel_sequence,
                  rollout_batch)
from .metrics import batch_rmse
from .trajectory import DatasetSplit, SequenceWindow

logger = setup_logger('Trainer')

SIM_MAX_EPOCHS = 200
FIELD_MAX_EPOCHS = 300
TARGET_MODES = ('open_loop', 'closed_loop')


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; mu weights the data term, 1 - mu the physics term."""
    mu: float = 0.7
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    max_epochs: int = SIM_MAX_EPOCHS
    grad_clip_norm: float = 5.0
    seed: int = 0
    target_mode: str = 'open_loop'
    chunk_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate must be positive and weight decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.chunk_size < 1:
            raise ConfigurationError("batch_size, max_epochs and chunk_size must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ConfigurationError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigurationError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")


@dataclass
class AdamState:
    """First/second moment estimates per parameter."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> 'AdamState':
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
               learning_rate: float, weight_decay: float = 0.0) -> None:
        """In-place Adam step with L2 decay added to the gradients."""
        self.step += 1
        correction1 = 1.0 - self.beta1 ** self.step
        correction2 = 1.0 - self.beta2 ** self.step
        for name, param in params.items():
            g = grads[name] + weight_decay * param
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param -= learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainRecord:
    """Per-epoch losses; wall time is kept in memory only."""
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    wall_time: List[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, self.epochs + 1),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
        })

    def save_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def load_csv(cls, path: str) -> 'TrainRecord':
        frame = pd.read_csv(path)
        record = cls(frame['train_loss'].tolist(), frame['val_loss'].tolist())
        record.best_epoch = int(frame['epoch'].iloc[int(np.argmin(frame['val_loss'].to_numpy()))]) \
            if len(frame) else -1
        return record


def _row_rmse(pred: Tensor, target: np.ndarray) -> Tensor:
    return sqrt(mean(square(pred - target), axis=-1))


def _as_rows(pred, label, model_pred) -> Tuple[Tensor, np.ndarray, Optional[np.ndarray]]:
    pred = as_tensor(pred)
    label = np.asarray(label, dtype=np.float64)
    if pred.ndim == 1:
        pred = reshape(pred, (1, pred.shape[0]))
        label = label.reshape(1, -1)
        if model_pred is not None:
            model_pred = np.asarray(model_pred, dtype=np.float64).reshape(1, -1)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match label shape {label.shape}")
    if model_pred is not None:
        model_pred = np.asarray(model_pred, dtype=np.float64)
        if model_pred.shape != pred.shape:
            raise ShapeError(f"prediction shape {pred.shape} does not match model target shape {model_pred.shape}")
    return pred, label, model_pred


def _weighted_loss(pred: Tensor, label: np.ndarray, model_pred: Optional[np.ndarray],
                   data_weights: np.ndarray, model_weights: Optional[np.ndarray]) -> Tensor:
    """Sum over rows of data_weight * data RMSE + model_weight * model RMSE."""
    loss = sum_(mul(_row_rmse(pred, label), data_weights))
    if model_weights is not None and np.any(model_weights):
        loss = add(loss, sum_(mul(_row_rmse(pred, model_pred), model_weights)))
    return loss


def hybrid_loss(pred, label, model_pred, mu: float,
                model_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    mu * RMSE(pred, label) + (1 - mu) * RMSE(pred, model_pred), in meters.

    Works on a single (H,) series or a (B, H) batch; batch terms are means
    over windows, and the physics term averages only the windows enabled in
    model_mask. A zero coefficient drops its term entirely.
    """
    if not 0.0 <= mu <= 1.0:
        raise ConfigurationError(f"mu must lie in [0, 1], got {mu}")
    pred, label, model_pred = _as_rows(pred, label, None if mu == 1.0 else model_pred)
    rows = pred.shape[0]
    data_weights = np.full(rows, mu / rows) if mu > 0 else np.zeros(rows)
    model_weights = None
    if mu < 1.0:
        if model_pred is None:
            raise ShapeError("model targets are required when mu < 1")
        mask = np.ones(rows, dtype=bool) if model_mask is None else np.asarray(model_mask, dtype=bool)
        valid = int(mask.sum())
        model_weights = np.where(mask, (1.0 - mu) / valid, 0.0) if valid else np.zeros(rows)
    if mu == 0.0:
        return sum_(mul(_row_rmse(pred, model_pred), model_weights))
    return _weighted_loss(pred, label, model_pred, data_weights, model_weights)


@dataclass
class ModelTargets:
    """IDM-integrated follower positions per window; invalid rows are zero."""
    positions: np.ndarray
    valid: np.ndarray

    @property
    def excluded(self) -> int:
        return int(np.sum(~self.valid))


def precompute_model_targets(windows: Sequence[SequenceWindow], idm_params: IdmParams,
                             mode: str = 'open_loop') -> ModelTargets:
    """
    Physics targets for every window, computed once per run.

    open_loop: IDM accelerations along the observed states, integrated from
    the observed follower start and the recorded start speed.
    closed_loop: an IDM rollout from the same start against the observed leader.
    Windows with non-positive observed gaps (or collapsed rollouts) are
    flagged invalid.
    """
    if mode not in TARGET_MODES:
        raise ConfigurationError(f"target mode must be one of {TARGET_MODES}, got {mode!r}")
    n = len(windows)
    if n == 0:
        return ModelTargets(np.zeros((0, 0)), np.zeros(0, dtype=bool))
    horizon = windows[0].horizon
    cfg = IntegrationConfig(dt=windows[0].dt)
    s_init = np.array([w.pair.follower.positions[0] for w in windows])
    v_init = np.array([w.follower_v0 for w in windows])
    positions = np.zeros((n, horizon))
    valid = np.ones(n, dtype=bool)

    if mode == 'open_loop':
        accels = np.zeros((n, horizon))
        for i, window in enumerate(windows):
            try:
                accels[i] = open_loop_accel_sequence(window, idm_params)
            except CollisionError:
                valid[i] = False
        if np.any(valid):
            positions[valid] = double_integrate_batch(accels[valid], s_init[valid], v_init[valid], cfg)
    else:
        batch = rollout_batch(np.stack([w.pair.leader.positions for w in windows]),
                              np.stack([w.pair.leader.velocities for w in windows]),
                              s_init, v_init, idm_params, cfg)
        valid = ~batch.collapsed
        positions[valid] = batch.positions[valid]

    targets = ModelTargets(positions, valid)
    if targets.excluded:
        logger.warning(f"⚠️  {targets.excluded} of {n} windows excluded from the physics term")
    return targets


def validation_loss(net: FollowerNet, windows: Sequence[SequenceWindow]) -> float:
    """Mean RMSE of predictions against clean follower positions."""
    if not windows:
        return math.nan
    predictions = predict_batch(windows, net)
    truth = np.stack([w.clean_pair.follower.positions for w in windows])
    return float(np.mean(batch_rmse(predictions, truth)))


def _chunk_gradients(net: FollowerNet, batch: WindowBatch, rows: np.ndarray, labels: np.ndarray,
                     targets: Optional[np.ndarray], data_weights: np.ndarray,
                     model_weights: Optional[np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = ComputationTape()
    p = net.bind(tape)
    out = net.forward(batch.positions[rows], batch.velocities[rows], p)
    normalized = reshape(out, (rows.size, out.shape[1]))
    pred = add(mul(add(normalized, batch.anchors[rows, None]), batch.position_scale),
               batch.offsets[rows, None])
    loss = _weighted_loss(pred, labels[rows], None if targets is None else targets[rows],
                          data_weights, model_weights)
    tape.backward(loss)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.value)) for name, t in p.items()}
    return loss.item(), grads


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(net: FollowerNet, split: DatasetSplit, idm_params: IdmParams, config: TrainConfig,
          targets: Optional[ModelTargets] = None,
          max_workers: Optional[int] = None) -> Tuple[FollowerNet, TrainRecord]:
    """
    Train a copy of the network and return the best-validation copy.

    Training labels are the observed (possibly noisy) follower positions;
    validation compares against clean follower positions. Each batch is
    split into fixed-size chunks whose gradients are summed in chunk order,
    so results do not depend on the thread count.

    Args:
        net: Initial network (not modified)
        split: Dataset split; train windows are used for fitting
        idm_params: IDM parameters for the physics targets
        config: Training settings
        targets: Precomputed physics targets for split.train
        max_workers: Thread count for chunk gradients (default: IDMF_THREADS)

    Returns:
        (best network, per-epoch record)

    Raises:
        TrainingError: If a batch loss is not finite
    """
    windows = split.train
    if not windows:
        raise ConfigurationError("training split is empty")
    check_horizon(net, windows)
    check_horizon(net, split.validation)

    n = len(windows)
    batch = prepare_batch(windows)
    labels = np.stack([w.pair.follower.positions for w in windows])
    mu = config.mu
    if mu < 1.0:
        targets = targets or precompute_model_targets(windows, idm_params, config.target_mode)
        target_positions, valid = targets.positions, targets.valid
    else:
        target_positions, valid = None, np.zeros(n, dtype=bool)

    working = net.copy()
    working.mu = mu
    adam = AdamState.zeros_like(working.params)
    rng = np.random.default_rng(config.seed)
    record = TrainRecord()
    best_val = math.inf
    best = working.copy()
    max_workers = max_workers or get_thread_count()

    logger.info(f"🚀 Training mu={mu} on {n} windows for {config.max_epochs} epochs "
                f"(h={net.config.hidden}, batch {config.batch_size})")

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(n)
            loss_sum = 0.0

            for batch_index, start in enumerate(range(0, n, config.batch_size)):
                rows = order[start:start + config.batch_size]
                size = rows.size
                data_weights_all = np.full(size, mu / size)
                model_weights_all = None
                if mu < 1.0:
                    n_valid = int(valid[rows].sum())
                    model_weights_all = (np.where(valid[rows], (1.0 - mu) / n_valid, 0.0)
                                         if n_valid else np.zeros(size))

                chunks = [slice(i, i + config.chunk_size) for i in range(0, size, config.chunk_size)]
                results = list(executor.map(
                    lambda c: _chunk_gradients(
                        working, batch, rows[c], labels, target_positions, data_weights_all[c],
                        None if model_weights_all is None else model_weights_all[c]),
                    chunks,
                ))

                batch_loss = 0.0
                grads = {name: np.zeros_like(value) for name, value in working.params.items()}
                for chunk_loss, chunk_grads in results:
                    batch_loss += chunk_loss
                    for name, g in chunk_grads.items():
                        grads[name] += g

                if not math.isfinite(batch_loss):
                    raise TrainingError("non-finite training loss", epoch, batch_index)

                _clip(grads, config.grad_clip_norm)
                adam.update(working.params, grads, config.learning_rate, config.weight_decay)
                loss_sum += batch_loss * size

            train_loss = loss_sum / n
            val_loss = validation_loss(working, split.validation) if split.validation else train_loss
            if not math.isfinite(val_loss):
                raise TrainingError("non-finite validation loss", epoch)
            record.train_loss.append(train_loss)
            record.val_loss.append(val_loss)
            record.wall_time.append(time.perf_counter() - started)

            if val_loss < best_val:
                best_val = val_loss
                best = working.copy()
                record.best_epoch = epoch

            logger.info(f"📈 Epoch {epoch}/{config.max_epochs}: train {train_loss:.4f} m, "
                        f"val {val_loss:.4f} m ({record.wall_time[-1]:.1f}s)")

    logger.info(f"✅ Best validation {best_val:.4f} m at epoch {record.best_epoch}")
    return best, record