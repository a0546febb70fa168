"""
Trajectory data model and dataset pipeline.

Covers the leader/follower pair types, extraction of car-following spans,
fixed-length windowing, dataset splitting, per-window normalization and
CSV/JSON persistence.
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import setup_logger
from .errors import ConfigurationError, TrajectoryError, TrajectoryParseError

logger = setup_logger('Trajectory')

DEFAULT_DT = 0.1
DEFAULT_HORIZON = 80
DEFAULT_GAP_THRESHOLD = 50.0
DEFAULT_SPLIT_RATIOS = (0.5, 0.2, 0.3)
CSV_COLUMNS = ['t', 'pair_id', 's_lead', 'v_lead', 's_follow']


def _frozen_array(values: Iterable[float]) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


def finite_difference_velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """
    Velocities from sampled positions.

    Central differences inside the series and second-order one-sided
    differences at both ends (first-order when only two samples exist).
    """
    positions = np.asarray(positions, dtype=np.float64)
    edge_order = 2 if positions.size >= 3 else 1
    return np.gradient(positions, dt, edge_order=edge_order)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Single-vehicle longitudinal trajectory sampled every dt seconds."""
    positions: np.ndarray
    velocities: Optional[np.ndarray] = None
    dt: float = DEFAULT_DT
    vehicle_id: str = ''

    def __post_init__(self):
        positions = _frozen_array(self.positions)
        if positions.ndim != 1 or positions.size < 2:
            raise TrajectoryError(f"trajectory {self.vehicle_id!r} needs at least 2 samples")
        if not np.all(np.isfinite(positions)):
            raise TrajectoryError(f"trajectory {self.vehicle_id!r} has non-finite positions")
        if not self.dt > 0:
            raise TrajectoryError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, 'positions', positions)

        if self.velocities is not None:
            velocities = _frozen_array(self.velocities)
            if velocities.shape != positions.shape:
                raise TrajectoryError(
                    f"trajectory {self.vehicle_id!r}: {velocities.size} velocities "
                    f"for {positions.size} positions"
                )
            object.__setattr__(self, 'velocities', velocities)

    def __len__(self) -> int:
        return self.positions.size

    def slice(self, start: int, stop: int) -> 'Trajectory':
        velocities = None if self.velocities is None else self.velocities[start:stop]
        return Trajectory(self.positions[start:stop], velocities, self.dt, self.vehicle_id)

    def shifted(self, offset: float) -> 'Trajectory':
        return Trajectory(self.positions + offset, self.velocities, self.dt, self.vehicle_id)


@dataclass(frozen=True, eq=False)
class TrajectoryPair:
    """
    Leader (positions and velocities) with its follower (positions only).

    Pairs marked noisy carry observed positions, so the leader-ahead rule
    is not enforced on them.
    """
    leader: Trajectory
    follower: Trajectory
    pair_id: str = ''
    noisy: bool = False

    def __post_init__(self):
        if self.leader.velocities is None:
            raise TrajectoryError(f"pair {self.pair_id!r}: leader needs velocities")
        if len(self.leader) != len(self.follower):
            raise TrajectoryError(
                f"pair {self.pair_id!r}: leader has {len(self.leader)} samples, "
                f"follower {len(self.follower)}"
            )
        if not math.isclose(self.leader.dt, self.follower.dt, rel_tol=1e-12):
            raise TrajectoryError(f"pair {self.pair_id!r}: leader and follower dt differ")
        if not self.noisy:
            gaps = self.gaps
            if np.any(gaps <= 0):
                index = int(np.argmax(gaps <= 0))
                raise TrajectoryError(f"pair {self.pair_id!r}: follower not behind leader at sample {index}")

    @property
    def dt(self) -> float:
        return self.leader.dt

    @property
    def gaps(self) -> np.ndarray:
        return self.leader.positions - self.follower.positions

    def __len__(self) -> int:
        return len(self.leader)

    def slice(self, start: int, stop: int, pair_id: Optional[str] = None) -> 'TrajectoryPair':
        return TrajectoryPair(
            self.leader.slice(start, stop),
            Trajectory(self.follower.positions[start:stop], None, self.dt, self.follower.vehicle_id),
            self.pair_id if pair_id is None else pair_id,
            self.noisy,
        )


@dataclass(frozen=True, eq=False)
class SequenceWindow:
    """
    Fixed-length pair plus the follower's velocity at the window start.

    Noisy windows keep the clean pair they were derived from in `truth`.
    """
    pair: TrajectoryPair
    follower_v0: float
    gap_threshold: float = DEFAULT_GAP_THRESHOLD
    truth: Optional[TrajectoryPair] = None

    def __post_init__(self):
        if not self.pair.noisy:
            gaps = self.pair.gaps
            if np.any(gaps <= 0) or np.any(gaps > self.gap_threshold):
                raise TrajectoryError(
                    f"window {self.pair.pair_id!r}: gap outside (0, {self.gap_threshold}]"
                )

    @property
    def window_id(self) -> str:
        return self.pair.pair_id

    @property
    def horizon(self) -> int:
        return len(self.pair)

    @property
    def dt(self) -> float:
        return self.pair.dt

    @property
    def clean_pair(self) -> TrajectoryPair:
        """Ground-truth pair: the stored truth for noisy windows, else the pair itself."""
        return self.truth if self.truth is not None else self.pair


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Disjoint train/validation/test partition of windows."""
    train: List[SequenceWindow]
    validation: List[SequenceWindow]
    test: List[SequenceWindow]
    split_seed: int = 0

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def map(self, fn) -> 'DatasetSplit':
        """Apply a window transform to every split, keeping membership."""
        return DatasetSplit(
            [fn(w) for w in self.train],
            [fn(w) for w in self.validation],
            [fn(w) for w in self.test],
            self.split_seed,
        )


@dataclass(frozen=True)
class Normalizer:
    """Per-window position offset with fixed global scales."""
    position_offset: float
    position_scale: float = 100.0
    velocity_scale: float = 30.0

    def positions(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.position_offset) / self.position_scale

    def velocities(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self.velocity_scale


@dataclass(frozen=True, eq=False)
class NormalizedWindow:
    """Network-ready channels of one window."""
    leader_positions: np.ndarray
    leader_velocities: np.ndarray
    follower_positions: np.ndarray
    follower_v0: float


def extract_pairs(trajectories: Sequence[Trajectory],
                  gap_threshold: float = DEFAULT_GAP_THRESHOLD) -> List[TrajectoryPair]:
    """
    Extract car-following pairs from vehicles listed front to back.

    Each consecutive (leader, follower) couple is scanned sample by sample;
    maximal spans with 0 < gap <= gap_threshold of at least two samples
    become pairs. Spans outside the threshold are cut, never clipped.

    Args:
        trajectories: Vehicles in lane order, leader first
        gap_threshold: Maximum car-following distance in meters

    Returns:
        List of TrajectoryPair, in scan order
    """
    if not trajectories:
        return []
    if not gap_threshold > 0:
        raise ConfigurationError(f"gap_threshold must be positive, got {gap_threshold}")

    dt = trajectories[0].dt
    for trajectory in trajectories:
        if not math.isclose(trajectory.dt, dt, rel_tol=1e-12):
            raise TrajectoryError(
                f"mismatched dt: {trajectory.vehicle_id!r} has {trajectory.dt}, expected {dt}"
            )

    pairs = []
    for leader, follower in zip(trajectories[:-1], trajectories[1:]):
        if leader.velocities is None:
            raise TrajectoryError(f"leader {leader.vehicle_id!r} needs velocities")
        n = min(len(leader), len(follower))
        gaps = leader.positions[:n] - follower.positions[:n]
        inside = (gaps > 0) & (gaps <= gap_threshold)

        span = 0
        for start, stop in _true_runs(inside):
            if stop - start < 2:
                continue
            pairs.append(TrajectoryPair(
                leader.slice(start, stop),
                Trajectory(follower.positions[start:stop], None, dt, follower.vehicle_id),
                f"{follower.vehicle_id}.{span}",
            ))
            span += 1

    return pairs


def _true_runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Half-open [start, stop) index ranges where mask is True."""
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def window_pairs(pairs: Sequence[TrajectoryPair],
                 horizon: int = DEFAULT_HORIZON,
                 stride: Optional[int] = None,
                 gap_threshold: float = DEFAULT_GAP_THRESHOLD) -> List[SequenceWindow]:
    """
    Cut pairs into fixed-length windows.

    A window is kept only if every sample has 0 < gap <= gap_threshold.
    Trailing remainders shorter than the horizon are dropped.
    The follower start speed is the second-order one-sided difference of
    the first three positions, not a forward difference; it is exact under
    constant acceleration.

    Args:
        pairs: Clean trajectory pairs
        horizon: Window length in samples
        stride: Step between window starts (default: horizon)
        gap_threshold: Maximum gap admitted inside a window

    Returns:
        Windows in pair order, then start order
    """
    stride = horizon if stride is None else stride
    if horizon < 2:
        raise ConfigurationError(f"horizon must be >= 2, got {horizon}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")

    windows = []
    for pair in pairs:
        gaps = pair.gaps
        for start in range(0, len(pair) - horizon + 1, stride):
            stop = start + horizon
            window_gaps = gaps[start:stop]
            if np.any(window_gaps <= 0) or np.any(window_gaps > gap_threshold):
                continue
            piece = pair.slice(start, stop, f"{pair.pair_id}@{start}")
            follower_v0 = float(finite_difference_velocities(piece.follower.positions, pair.dt)[0])
            windows.append(SequenceWindow(piece, max(0.0, follower_v0), gap_threshold))

    return windows


def split_dataset(windows: Sequence[SequenceWindow],
                  ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                  seed: int = 0) -> DatasetSplit:
    """
    Shuffle windows deterministically and partition them.

    Sizes are floor(ratio * n) for train and validation; test takes the
    remainder.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigurationError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    if not windows:
        raise ConfigurationError("cannot split an empty window list")

    n = len(windows)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))

    shuffled = [windows[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        split_seed=seed,
    )


def normalize_window(window: SequenceWindow,
                     position_scale: float = 100.0,
                     velocity_scale: float = 30.0) -> Tuple[NormalizedWindow, Normalizer]:
    """Shift positions by the leader start position and apply fixed scales."""
    pair = window.pair
    normalizer = Normalizer(float(pair.leader.positions[0]), position_scale, velocity_scale)
    normalized = NormalizedWindow(
        leader_positions=normalizer.positions(pair.leader.positions),
        leader_velocities=normalizer.velocities(pair.leader.velocities),
        follower_positions=normalizer.positions(pair.follower.positions),
        follower_v0=window.follower_v0 / velocity_scale,
    )
    return normalized, normalizer


def denormalize(values, normalizer: Normalizer) -> np.ndarray:
    """Map normalized positions back to meters."""
    return np.asarray(values, dtype=np.float64) * normalizer.position_scale + normalizer.position_offset


def save_csv(pairs: Sequence[TrajectoryPair], path: str) -> None:
    """
    Write pairs as long-format CSV (t, pair_id, s_lead, v_lead, s_follow).

    Values are written with 17 significant digits, which round-trips
    float64 exactly.
    """
    frames = []
    for pair in pairs:
        n = len(pair)
        frames.append(pd.DataFrame({
            't': np.arange(n) * pair.dt,
            'pair_id': pair.pair_id,
            's_lead': pair.leader.positions,
            'v_lead': pair.leader.velocities,
            's_follow': pair.follower.positions,
        }))
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CSV_COLUMNS)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g', columns=CSV_COLUMNS)


def load_csv(path: str, noisy: bool = False) -> List[TrajectoryPair]:
    """
    Read pairs written by save_csv.

    Args:
        path: CSV file path
        noisy: Mark loaded pairs as noisy observations

    Returns:
        Pairs in file order

    Raises:
        FileNotFoundError: If the file does not exist
        TrajectoryParseError: On a missing column or a non-numeric cell
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"trajectory file not found: {path}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise TrajectoryParseError(f"missing columns {missing}", 1)

    numeric = {}
    for column in ('t', 's_lead', 'v_lead', 's_follow'):
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = values.isna() | ~np.isfinite(values.fillna(0.0))
        if bad.any():
            row = int(np.argmax(bad.to_numpy()))
            # header is line 1
            raise TrajectoryParseError(
                f"non-numeric value {frame[column].iloc[row]!r} in column {column!r}", row + 2
            )
        numeric[column] = values.to_numpy(dtype=np.float64)

    pairs = []
    pair_ids = frame['pair_id'].to_numpy()
    for pair_id, rows in pd.Series(np.arange(len(frame))).groupby(pair_ids, sort=False):
        index = rows.to_numpy()
        if index.size < 2:
            raise TrajectoryParseError(f"pair {pair_id!r} has a single sample", int(index[0]) + 2)
        t = numeric['t'][index]
        dt = float(round(t[1] - t[0], 12))
        pairs.append(TrajectoryPair(
            Trajectory(numeric['s_lead'][index], numeric['v_lead'][index], dt, f"{pair_id}-lead"),
            Trajectory(numeric['s_follow'][index], None, dt, f"{pair_id}-follow"),
            str(pair_id),
            noisy,
        ))

    return pairs


def write_manifest(manifest: Dict, path: str) -> None:
    """Write a JSON manifest with stable key order."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(path: str) -> Dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def dataset_manifest(split: DatasetSplit, ratios: Sequence[float], horizon: int,
                     gap_threshold: float, dt: float, **extra) -> Dict:
    """Manifest describing a windowed dataset split."""
    manifest = {
        'dt': dt,
        'horizon': horizon,
        'gap_threshold': gap_threshold,
        'seed': split.split_seed,
        'split_ratios': list(ratios),
        'window_counts': dict(zip(('train', 'validation', 'test'), split.sizes())),
        'splits': {
            'train': [w.window_id for w in split.train],
            'validation': [w.window_id for w in split.validation],
            'test': [w.window_id for w in split.test],
        },
        'follower_v0': {w.window_id: w.follower_v0
                        for w in split.train + split.validation + split.test},
    }
    manifest.update(extra)
    return manifest


def save_split(split: DatasetSplit, directory: str, ratios: Sequence[float],
               gap_threshold: float = DEFAULT_GAP_THRESHOLD, **extra) -> None:
    """
    Persist a (possibly noisy) split as clean CSV, noisy CSV and manifest.
    """
    windows = split.train + split.validation + split.test
    if not windows:
        raise TrajectoryError("cannot save an empty split")
    save_csv([w.clean_pair for w in windows], os.path.join(directory, 'windows_clean.csv'))
    save_csv([w.pair for w in windows], os.path.join(directory, 'windows_noisy.csv'))
    manifest = dataset_manifest(split, ratios, windows[0].horizon, gap_threshold, windows[0].dt, **extra)
    write_manifest(manifest, os.path.join(directory, 'split_manifest.json'))
    logger.info(f"💾 Saved split {split.sizes()} to {directory}")


def load_split(directory: str) -> DatasetSplit:
    """Rebuild a split written by save_split."""
    manifest = read_manifest(os.path.join(directory, 'split_manifest.json'))
    clean = {p.pair_id: p for p in load_csv(os.path.join(directory, 'windows_clean.csv'))}
    noisy = {p.pair_id: p for p in load_csv(os.path.join(directory, 'windows_noisy.csv'), noisy=True)}
    gap_threshold = manifest['gap_threshold']

    def build(window_id: str) -> SequenceWindow:
        if window_id not in clean or window_id not in noisy:
            raise TrajectoryError(f"window {window_id!r} listed in manifest but missing from CSV")
        v0 = manifest['follower_v0'][window_id]
        return SequenceWindow(noisy[window_id], v0, gap_threshold, truth=clean[window_id])

    return DatasetSplit(
        train=[build(i) for i in manifest['splits']['train']],
        validation=[build(i) for i in manifest['splits']['validation']],
        test=[build(i) for i in manifest['splits']['test']],
        split_seed=manifest['seed'],
    )
