"""
Clean-truth evaluation of learned and IDM followers, and mu x noise sweeps.

Every score compares predictions made from (possibly noisy) observations
against the clean follower trajectory.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import get_thread_count, setup_logger
from .errors import ConfigurationError
from .follower_net import FollowerNet, NetConfig, check_horizon, init_params, predict_batch, save_checkpoint
from .gps_noise import NoiseChannelSpec, apply_noise_to_split, get_noise_preset
from .idm import IntegrationConfig, IdmParams, get_preset, rollout_batch
from .metrics import batch_fde, batch_rmse, fde, rmse
from .plots import plot_loss_curves, plot_trajectory_overlay
from .trainer import ModelTargets, TrainConfig, TrainRecord, precompute_model_targets, train
from .trajectory import DatasetSplit, SequenceWindow

logger = setup_logger('Evaluator')

__all__ = [
    'rmse', 'fde', 'MetricRow', 'MetricReport', 'SweepSpec', 'evaluate_model',
    'evaluate_idm_baseline', 'sweep', 'emit_report', 'emit_plots',
]

REPORT_COLUMNS = ['model', 'mu', 'noise_level', 'idm_preset', 'rmse', 'fde',
                  'windows', 'excluded', 'success', 'error']
NO_PRESET = 'none'


@dataclass
class MetricRow:
    """One evaluated configuration; failed cells keep NaN metrics and the error."""
    model: str
    mu: float
    noise_level: str
    idm_preset: str
    rmse: float
    fde: float
    windows: int
    excluded: int = 0
    success: bool = True
    error: Optional[str] = None

    def __post_init__(self):
        if self.success and (self.rmse < 0 or self.fde < 0):
            raise ConfigurationError(f"metrics must be non-negative, got rmse={self.rmse} fde={self.fde}")


@dataclass
class MetricReport:
    """Rows in sweep order."""
    rows: List[MetricRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows], columns=REPORT_COLUMNS)

    def wide(self) -> pd.DataFrame:
        """RMSE table with one column per noise level, rows keyed by model, mu and preset."""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=['model', 'mu', 'idm_preset'])
        levels = list(dict.fromkeys(frame['noise_level']))
        keys = list(dict.fromkeys(zip(frame['model'], frame['mu'], frame['idm_preset'])))
        table = frame.pivot_table(index=['model', 'mu', 'idm_preset'], columns='noise_level',
                                  values='rmse', aggfunc='first', dropna=False)
        table = table.reindex(index=pd.MultiIndex.from_tuples(keys, names=['model', 'mu', 'idm_preset']),
                              columns=levels)
        table.columns.name = None
        return table.reset_index()

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'MetricReport':
        rows = []
        for record in frame.to_dict('records'):
            error = record.get('error')
            record['error'] = None if error is None or (isinstance(error, float) and math.isnan(error)) else error
            record['success'] = bool(record['success'])
            rows.append(MetricRow(**record))
        return cls(rows)

    @classmethod
    def load_csv(cls, path: str) -> 'MetricReport':
        if not os.path.exists(path):
            raise FileNotFoundError(f"report not found: {path}")
        return cls.from_frame(pd.read_csv(path, keep_default_na=False,
                                          na_values={'rmse': ['', 'nan', 'NaN'], 'fde': ['', 'nan', 'NaN'],
                                                     'error': ['']}))


def _clean_follower(windows: Sequence[SequenceWindow]) -> np.ndarray:
    return np.stack([w.clean_pair.follower.positions for w in windows])


def evaluate_model(net: FollowerNet, windows: Sequence[SequenceWindow], mu: float = 1.0,
                   noise_level: str = 'clean', idm_preset: str = NO_PRESET,
                   model: Optional[str] = None) -> MetricRow:
    """
    Score network predictions from the windows' observations against clean truth.

    Raises:
        CheckpointError: If the network horizon differs from the windows'
    """
    check_horizon(net, windows)
    tag = model or ('learning' if mu == 1.0 else 'hybrid')
    if not windows:
        return MetricRow(tag, mu, noise_level, idm_preset, math.nan, math.nan, 0)
    predictions = predict_batch(windows, net)
    truth = _clean_follower(windows)
    return MetricRow(
        model=tag,
        mu=mu,
        noise_level=noise_level,
        idm_preset=idm_preset,
        rmse=float(np.mean(batch_rmse(predictions, truth))),
        fde=float(np.mean(batch_fde(predictions, truth))),
        windows=len(windows),
    )


def idm_baseline_predictions(windows: Sequence[SequenceWindow], idm_params: IdmParams):
    """Closed-loop IDM rollouts from each window's observed follower start and clean start speed."""
    cfg = IntegrationConfig(dt=windows[0].dt)
    return rollout_batch(
        np.stack([w.pair.leader.positions for w in windows]),
        np.stack([w.pair.leader.velocities for w in windows]),
        np.array([w.pair.follower.positions[0] for w in windows]),
        np.array([w.follower_v0 for w in windows]),
        idm_params,
        cfg,
    )


def evaluate_idm_baseline(windows: Sequence[SequenceWindow], idm_params: IdmParams,
                          noise_level: str = 'clean', idm_preset: str = NO_PRESET) -> MetricRow:
    """Pure-IDM row; collapsed rollouts are excluded and counted."""
    if not windows:
        return MetricRow('idm', 0.0, noise_level, idm_preset, math.nan, math.nan, 0)
    batch = idm_baseline_predictions(windows, idm_params)
    ok = ~batch.collapsed
    excluded = int(np.sum(~ok))
    if excluded:
        logger.warning(f"⚠️  {excluded} of {len(windows)} IDM rollouts collapsed and were excluded")
    if not np.any(ok):
        return MetricRow('idm', 0.0, noise_level, idm_preset, math.nan, math.nan, 0, excluded,
                         success=False, error='every IDM rollout collapsed')
    truth = _clean_follower(windows)[ok]
    return MetricRow(
        model='idm',
        mu=0.0,
        noise_level=noise_level,
        idm_preset=idm_preset,
        rmse=float(np.mean(batch_rmse(batch.positions[ok], truth))),
        fde=float(np.mean(batch_fde(batch.positions[ok], truth))),
        windows=int(np.sum(ok)),
        excluded=excluded,
    )


@dataclass(frozen=True)
class SweepSpec:
    """
    Sweep axes. mu=1 is the learning baseline and mu=0 the IDM baseline;
    both baselines are always reported for every noise level.
    """
    mus: Tuple[float, ...] = (1.0, 0.7, 0.5, 0.3, 0.0)
    noise_levels: Tuple[str, ...] = ('small', 'middle')
    idm_presets: Tuple[str, ...] = ('sumo',)
    data_seed: int = 0
    noise_channels: NoiseChannelSpec = NoiseChannelSpec()

    def __post_init__(self):
        if not self.mus or not self.noise_levels or not self.idm_presets:
            raise ConfigurationError("sweep axes must be non-empty")
        for mu in self.mus:
            if not 0.0 <= mu <= 1.0:
                raise ConfigurationError(f"mu must lie in [0, 1], got {mu}")
        for level in self.noise_levels:
            get_noise_preset(level)
        for preset in self.idm_presets:
            get_preset(preset)

    def hybrid_mus(self) -> List[float]:
        return [mu for mu in dict.fromkeys(self.mus) if 0.0 < mu < 1.0]

    def cells(self) -> List['SweepCell']:
        """Cells in report order: per level, the learning row, then per preset the hybrids and the IDM row."""
        cells = []
        for level in self.noise_levels:
            cells.append(SweepCell('learning', 1.0, level, NO_PRESET))
            for preset in self.idm_presets:
                cells.extend(SweepCell('hybrid', mu, level, preset) for mu in self.hybrid_mus())
                cells.append(SweepCell('idm', 0.0, level, preset))
        return cells


@dataclass(frozen=True)
class SweepCell:
    model: str
    mu: float
    noise_level: str
    idm_preset: str

    @property
    def tag(self) -> str:
        return f"{self.model}-mu{self.mu:g}-{self.noise_level}-{self.idm_preset}"


@dataclass
class CellResult:
    """Outcome of one sweep cell."""
    cell: SweepCell
    row: MetricRow
    record: Optional[TrainRecord] = None
    net: Optional[FollowerNet] = None


def _failed_row(cell: SweepCell, error: Exception) -> MetricRow:
    return MetricRow(cell.model, cell.mu, cell.noise_level, cell.idm_preset, math.nan, math.nan, 0,
                     success=False, error=f"{type(error).__name__}: {error}")


def _run_cell(cell: SweepCell, split: DatasetSplit, net_config: NetConfig, train_config: TrainConfig,
              targets: Dict[Tuple[str, str], ModelTargets], inner_workers: int,
              output_dir: Optional[str]) -> CellResult:
    try:
        if cell.model == 'idm':
            return CellResult(cell, evaluate_idm_baseline(split.test, get_preset(cell.idm_preset),
                                                          cell.noise_level, cell.idm_preset))

        params = get_preset(cell.idm_preset) if cell.idm_preset != NO_PRESET else get_preset('sumo')
        config = replace(train_config, mu=cell.mu)
        net, record = train(init_params(net_config, train_config.seed), split, params, config,
                            targets.get((cell.noise_level, cell.idm_preset)), max_workers=inner_workers)
        row = evaluate_model(net, split.test, cell.mu, cell.noise_level, cell.idm_preset, cell.model)
        if output_dir:
            cell_dir = os.path.join(output_dir, 'cells', cell.tag)
            os.makedirs(cell_dir, exist_ok=True)
            save_checkpoint(net, os.path.join(cell_dir, 'checkpoint.bin'))
            record.save_csv(os.path.join(cell_dir, 'train_record.csv'))
        return CellResult(cell, row, record, net)
    except Exception as e:
        logger.warning(f"⚠️  Sweep cell {cell.tag} failed: {e}")
        return CellResult(cell, _failed_row(cell, e))


def run_sweep(spec: SweepSpec, split: DatasetSplit, net_config: NetConfig, train_config: TrainConfig,
              output_dir: Optional[str] = None, max_workers: Optional[int] = None) -> List[CellResult]:
    """
    Train and evaluate every cell of a sweep on one shared clean split.

    Each noise level noises the split once with the sweep's data seed, so
    every cell of a level sees identical windows. Physics targets are
    computed once per (level, preset).
    """
    cells = spec.cells()
    max_workers = max_workers or get_thread_count()
    logger.info(f"🚀 Sweep over {len(cells)} cells ({len(spec.noise_levels)} noise levels, "
                f"{len(spec.idm_presets)} IDM presets)")

    noisy_splits = {level: apply_noise_to_split(split, get_noise_preset(level), spec.noise_channels,
                                                spec.data_seed)
                    for level in spec.noise_levels}
    targets: Dict[Tuple[str, str], ModelTargets] = {}
    if spec.hybrid_mus():
        for level in spec.noise_levels:
            for preset in spec.idm_presets:
                targets[(level, preset)] = precompute_model_targets(
                    noisy_splits[level].train, get_preset(preset), train_config.target_mode)

    # cells share the outer pool; each trains single-threaded
    results: List[Optional[CellResult]] = [None] * len(cells)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(_run_cell, cell, noisy_splits[cell.noise_level], net_config, train_config,
                            targets, 1, output_dir): i
            for i, cell in enumerate(cells)
        }
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            results[index] = future.result()
            row = results[index].row
            if row.success:
                logger.info(f"✅ {cells[index].tag}: RMSE {row.rmse:.3f} m, FDE {row.fde:.3f} m")

    failed = sum(1 for r in results if not r.row.success)
    logger.info(f"📊 Sweep finished: {len(results) - failed} succeeded, {failed} failed")
    return results


def sweep(spec: SweepSpec, split: DatasetSplit, net_config: NetConfig, train_config: TrainConfig,
          output_dir: Optional[str] = None, max_workers: Optional[int] = None) -> MetricReport:
    """MetricReport of a full sweep, rows in cell order."""
    return MetricReport([r.row for r in run_sweep(spec, split, net_config, train_config,
                                                  output_dir, max_workers)])


def emit_report(report: MetricReport, directory: str) -> Dict[str, str]:
    """
    Write metrics.csv, metrics.json and the wide RMSE table metrics_table.csv.

    Returns:
        Mapping of artifact name to path
    """
    os.makedirs(directory, exist_ok=True)
    paths = {
        'csv': os.path.join(directory, 'metrics.csv'),
        'json': os.path.join(directory, 'metrics.json'),
        'table': os.path.join(directory, 'metrics_table.csv'),
    }
    report.to_frame().to_csv(paths['csv'], index=False, float_format='%.17g')
    with open(paths['json'], 'w', encoding='utf-8') as f:
        json.dump({'columns': REPORT_COLUMNS, 'rows': [asdict(row) for row in report.rows]},
                  f, indent=2, allow_nan=True)
    report.wide().to_csv(paths['table'], index=False, float_format='%.17g')
    logger.info(f"💾 Report with {len(report.rows)} rows saved to: {directory}")
    return paths


def emit_plots(records: Dict[str, TrainRecord], trajectories: Dict[str, np.ndarray], dt: float,
               directory: str) -> List[str]:
    """
    Loss curves (one SVG per record) and one trajectory overlay SVG.

    Args:
        records: Training records keyed by run tag
        trajectories: Series keyed by name, e.g. leader, follower, learning, idm, hybrid
        dt: Sample spacing of the trajectories
        directory: Output directory
    """
    paths = []
    for tag, record in records.items():
        paths.append(plot_loss_curves(record, os.path.join(directory, f"loss_{tag}.svg"),
                                      title=f"Training loss ({tag})"))
    if trajectories:
        paths.append(plot_trajectory_overlay(trajectories, dt, os.path.join(directory, 'trajectory_overlay.svg')))
    return paths
