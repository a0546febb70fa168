"""
Command-line entry point for the IDM-Follower pipeline.

Subcommands: simulate, noise, train, eval, sweep, calibrate, plot. Each
resolves a RunConfig (flags > --config file > preset defaults), writes it
to its output directory, and delegates to one library operation.
"""

import argparse
import glob
import json
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import setup_logger
from .errors import ConfigurationError
from .evaluator import (MetricReport, SweepSpec, emit_plots, emit_report, evaluate_idm_baseline,
                        evaluate_model, idm_baseline_predictions, run_sweep)
from .follower_net import init_params, load_checkpoint, predict, save_checkpoint
from .gps_noise import NOISE_PRESETS, NoiseChannelSpec, apply_noise_to_split, get_noise_preset, noise_report
from .idm import PRESETS, calibrate_idm, get_preset, validate_fde
from .run_config import RunConfig, resolve
from .scenario import build_dataset
from .trainer import TrainRecord, train
from .trajectory import (DatasetSplit, SequenceWindow, load_csv, load_split, read_manifest, save_csv,
                         save_split, split_dataset, window_pairs, write_manifest)

logger = setup_logger('CLI')

DATASET_CSV = 'dataset.csv'
DATASET_MANIFEST = 'dataset_manifest.json'
SPLIT_MANIFEST = 'split_manifest.json'
CHECKPOINT_FILE = 'checkpoint.bin'
RECORD_FILE = 'train_record.csv'


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def _name_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(',') if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run config (e.g. a previous run_config.json)')
    common.add_argument('--preset', choices=['sim', 'field'], help='training regime defaults')
    common.add_argument('--seed', type=int, help='seed for simulation, splitting, noise and training')
    common.add_argument('--out', help='output directory')
    common.add_argument('--data', help='input dataset or split directory')
    common.add_argument('--mu', help='loss weight; a comma-separated list for sweep')
    common.add_argument('--level', choices=sorted(NOISE_PRESETS), help='GPS noise level')
    common.add_argument('--levels', help='comma-separated noise levels for sweep')
    common.add_argument('--idm-preset', choices=sorted(PRESETS), help='IDM parameter preset')
    common.add_argument('--presets', help='comma-separated IDM presets for sweep')
    common.add_argument('--epochs', type=int, help='maximum training epochs')
    common.add_argument('--hidden', type=int, help='LSTM hidden size')
    common.add_argument('--n', type=int, help='number of simulated scenarios')
    common.add_argument('--max-windows', type=int, help='cap on windows (pairs for calibrate)')
    common.add_argument('--checkpoint', help='network checkpoint path')
    common.add_argument('--desk', action='store_true', help='h=32, 200 windows, 30 epochs')

    parser = argparse.ArgumentParser(
        prog='idm_follower',
        description='Physics-informed car-following trajectory prediction',
    )
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help='simulate an IDM-labeled dataset')
    noise = sub.add_parser('noise', parents=[common], help='window, split and noise a dataset')
    noise.add_argument('--report', action='store_true', default=None,
                       help='write the noise statistics report instead')
    noise.add_argument('--samples', type=int, help='samples per level for --report')
    sub.add_parser('train', parents=[common], help='train one network on a noisy split')
    sub.add_parser('eval', parents=[common], help='evaluate a checkpoint and the IDM baseline')
    sub.add_parser('sweep', parents=[common], help='train and evaluate a mu x noise grid')
    sub.add_parser('calibrate', parents=[common], help='calibrate IDM parameters on a dataset')
    plot = sub.add_parser('plot', parents=[common], help='render loss curves and a trajectory overlay')
    plot.add_argument('--run', help='directory holding train_record.csv files')
    plot.add_argument('--hybrid-checkpoint', help='hybrid network for the overlay')
    plot.add_argument('--window', type=int, help='test window index for the overlay')
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    seed = args.seed
    overrides = {
        'seed': seed,
        'data_seed': seed,
        'out_dir': args.out,
        'data_dir': args.data,
        'noise_level': args.level,
        'idm_preset': args.idm_preset,
        'n_scenarios': args.n,
        'max_windows': args.max_windows,
        'checkpoint': args.checkpoint,
        'noise_levels': _name_list(args.levels) if args.levels else None,
        'idm_presets': _name_list(args.presets) if args.presets else None,
        'noise_report': getattr(args, 'report', None),
        'noise_samples': getattr(args, 'samples', None),
        'run_dir': getattr(args, 'run', None),
        'hybrid_checkpoint': getattr(args, 'hybrid_checkpoint', None),
        'window': getattr(args, 'window', None),
        'net': {'hidden': args.hidden},
        'train': {'max_epochs': args.epochs, 'seed': seed},
    }
    if args.mu is not None:
        mus = _float_list(args.mu)
        if args.command == 'sweep':
            overrides['mus'] = mus
        elif len(mus) != 1:
            raise ConfigurationError(f"--mu takes a single value for {args.command}")
        else:
            overrides['train']['mu'] = mus[0]
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return resolve(args.config, args.preset, _overrides(args), desk=args.desk)


def _require_data(config: RunConfig) -> str:
    if not config.data_dir:
        raise ConfigurationError("--data is required for this command")
    if not os.path.isdir(config.data_dir):
        raise FileNotFoundError(f"data directory not found: {config.data_dir}")
    return config.data_dir


def _windows(config: RunConfig, directory: str) -> List[SequenceWindow]:
    pairs = load_csv(os.path.join(directory, DATASET_CSV))
    windows = window_pairs(pairs, config.net.horizon, config.stride, config.gap_threshold)
    if config.max_windows is not None:
        windows = windows[:config.max_windows]
    if not windows:
        raise ConfigurationError(f"no {config.net.horizon}-sample windows in {directory}")
    return windows


def clean_split(config: RunConfig) -> DatasetSplit:
    """Clean split from a simulated dataset directory or from a saved split's truth."""
    directory = _require_data(config)
    if os.path.exists(os.path.join(directory, DATASET_CSV)):
        return split_dataset(_windows(config, directory), config.split_ratios, config.data_seed)
    split = load_split(directory)
    return split.map(lambda w: SequenceWindow(w.clean_pair, w.follower_v0, w.gap_threshold))


def cmd_simulate(config: RunConfig, args: argparse.Namespace) -> None:
    pairs, manifest = build_dataset(config.n_scenarios, params=get_preset(config.idm_preset),
                                    seed=config.seed, duration=config.duration,
                                    gap_threshold=config.gap_threshold)
    os.makedirs(config.out_dir, exist_ok=True)
    save_csv(pairs, os.path.join(config.out_dir, DATASET_CSV))
    manifest['idm_preset'] = config.idm_preset
    write_manifest(manifest, os.path.join(config.out_dir, DATASET_MANIFEST))
    print(f"💾 {len(pairs)} pairs written to {config.out_dir}")


def cmd_noise(config: RunConfig, args: argparse.Namespace) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    if config.noise_report:
        path = os.path.join(config.out_dir, 'noise_report.csv')
        noise_report(config.noise_samples, config.seed).to_csv(path, index=False, float_format='%.17g')
        print(f"📊 Noise report written to {path}")
        return

    directory = _require_data(config)
    split = split_dataset(_windows(config, directory), config.split_ratios, config.data_seed)
    params = get_noise_preset(config.noise_level)
    channels = NoiseChannelSpec()
    noisy = apply_noise_to_split(split, params, channels, config.data_seed)
    save_split(noisy, config.out_dir, config.split_ratios, config.gap_threshold,
               noise_level=config.noise_level, noise=params.to_dict(), channels=asdict(channels))
    print(f"💾 Split {noisy.sizes()} with {config.noise_level} noise written to {config.out_dir}")


def cmd_train(config: RunConfig, args: argparse.Namespace) -> None:
    split = load_split(_require_data(config))
    net = init_params(config.net, config.seed)
    best, record = train(net, split, get_preset(config.idm_preset), config.train)
    os.makedirs(config.out_dir, exist_ok=True)
    save_checkpoint(best, os.path.join(config.out_dir, CHECKPOINT_FILE))
    record.save_csv(os.path.join(config.out_dir, RECORD_FILE))
    print(f"💾 Checkpoint (best epoch {record.best_epoch}) written to {config.out_dir}")


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    directory = _require_data(config)
    split = load_split(directory)
    level = read_manifest(os.path.join(directory, SPLIT_MANIFEST)).get('noise_level', 'clean')
    rows = []
    if config.checkpoint:
        net = load_checkpoint(config.checkpoint)
        mu = net.mu if net.mu is not None else config.train.mu
        rows.append(evaluate_model(net, split.test, mu, level, config.idm_preset))
    rows.append(evaluate_idm_baseline(split.test, get_preset(config.idm_preset), level, config.idm_preset))
    report = MetricReport(rows)
    emit_report(report, config.out_dir)
    print(report.to_frame().to_string(index=False))


def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> None:
    spec = SweepSpec(tuple(config.mus), tuple(config.noise_levels), tuple(config.idm_presets),
                     config.data_seed)
    results = run_sweep(spec, clean_split(config), config.net, config.train, config.out_dir)
    report = MetricReport([r.row for r in results])
    emit_report(report, config.out_dir)
    print(report.wide().to_string(index=False))


def cmd_calibrate(config: RunConfig, args: argparse.Namespace) -> None:
    pairs = load_csv(os.path.join(_require_data(config), DATASET_CSV))
    if config.max_windows is not None:
        pairs = pairs[:config.max_windows]
    params, objective = calibrate_idm(pairs, budget=config.calibration_budget)
    result = {
        'params': params.to_dict(),
        'objective': objective,
        'fde': validate_fde(pairs, params),
        'pairs': len(pairs),
        'preset_fde': {name: validate_fde(pairs, preset) for name, preset in PRESETS.items()},
    }
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, 'idm_params.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2, sort_keys=True)
    print(f"💾 Calibrated parameters (FDE {result['fde']:.4f} m) written to {path}")


def _records(run_dir: str) -> Dict[str, TrainRecord]:
    paths = sorted(glob.glob(os.path.join(run_dir, '**', RECORD_FILE), recursive=True))
    records = {}
    for path in paths:
        relative = os.path.relpath(os.path.dirname(path), run_dir)
        tag = 'run' if relative == '.' else relative.replace(os.sep, '_')
        records[tag] = TrainRecord.load_csv(path)
    return records


def cmd_plot(config: RunConfig, args: argparse.Namespace) -> None:
    records = _records(config.run_dir) if config.run_dir else {}
    trajectories: Dict[str, np.ndarray] = {}
    dt = 0.1
    if config.data_dir:
        split = load_split(_require_data(config))
        if config.window >= len(split.test):
            raise ConfigurationError(f"--window {config.window} outside the {len(split.test)} test windows")
        window = split.test[config.window]
        dt = window.dt
        trajectories['leader'] = window.clean_pair.leader.positions
        trajectories['follower'] = window.clean_pair.follower.positions
        if config.checkpoint:
            trajectories['learning'] = predict(window, load_checkpoint(config.checkpoint))
        rollout = idm_baseline_predictions([window], get_preset(config.idm_preset))
        if not rollout.collapsed[0]:
            trajectories['idm'] = rollout.positions[0]
        if config.hybrid_checkpoint:
            trajectories['hybrid'] = predict(window, load_checkpoint(config.hybrid_checkpoint))
    if not records and not trajectories:
        raise ConfigurationError("nothing to plot: give --run and/or --data")
    paths = emit_plots(records, trajectories, dt, config.out_dir)
    print(f"📊 {len(paths)} plots written to {config.out_dir}")


COMMANDS = {
    'simulate': cmd_simulate,
    'noise': cmd_noise,
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'calibrate': cmd_calibrate,
    'plot': cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config, args)
        config.save(config.out_dir)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1
    return 0
