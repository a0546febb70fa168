"""
Intelligent Driver Model physics.

Provides the IDM acceleration law, the open-loop acceleration sequence
along observed states, ballistic double integration, closed-loop follower
rollouts and coordinate-descent calibration against final displacement
error.
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar, newton

from .config import setup_logger
from .errors import CalibrationError, CollisionError, ConfigurationError
from .metrics import batch_fde
from .trajectory import SequenceWindow, Trajectory, TrajectoryPair, finite_difference_velocities

logger = setup_logger('IDM')

# JSON keys follow the usual IDM parameter table headings
_JSON_KEYS = {
    'v0': 'v0',
    'T_headway': 'T',
    's0': 's0',
    'a_max': 'a',
    'b_comf': 'b',
    'delta': 'delta',
}

PARAM_ORDER = ('v0', 'T_headway', 's0', 'a_max', 'b_comf', 'delta')


@dataclass(frozen=True)
class IdmParams:
    """IDM parameter set: desired speed, headway, jam gap, accel, braking, exponent."""
    v0: float
    T_headway: float
    s0: float
    a_max: float
    b_comf: float
    delta: float

    def __post_init__(self):
        problems = []
        if not self.v0 >= 0:
            problems.append(f"v0={self.v0}")
        if not self.T_headway >= 0:
            problems.append(f"T_headway={self.T_headway}")
        for name in ('s0', 'a_max', 'b_comf', 'delta'):
            if not getattr(self, name) > 0:
                problems.append(f"{name}={getattr(self, name)}")
        if problems:
            raise ConfigurationError(f"invalid IDM parameters: {', '.join(problems)}")

    def equilibrium_gap(self, v: float) -> float:
        """Gap at which a follower at speed v behind a leader at speed v has zero acceleration."""
        ratio = 1.0 - _free_road_term(v, self)
        if ratio <= 0:
            return math.inf
        return (self.s0 + v * self.T_headway) / math.sqrt(ratio)

    def to_dict(self) -> Dict[str, float]:
        return {_JSON_KEYS[name]: value for name, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'IdmParams':
        reverse = {json_key: name for name, json_key in _JSON_KEYS.items()}
        unknown = sorted(set(data) - set(reverse))
        if unknown:
            raise ConfigurationError(f"unknown IDM parameter keys: {unknown}")
        missing = sorted(set(reverse) - set(data))
        if missing:
            raise ConfigurationError(f"missing IDM parameter keys: {missing}")
        return cls(**{reverse[key]: float(value) for key, value in data.items()})


PRESETS: Dict[str, IdmParams] = {
    'sumo': IdmParams(16.7, 1.0, 2.5, 3.0, 4.5, 4.0),
    'ngsim-wang2021': IdmParams(15.97, 1.3, 1.57, 2.49, 2.39, 4.0),
    'ngsim-yang2022': IdmParams(12.58, 0.48, 0.31, 1.98, 4.37, 1.34),
}


def get_preset(name: str) -> IdmParams:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown IDM preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


@dataclass(frozen=True)
class IntegrationConfig:
    """Time step and velocity clamp for ballistic integration."""
    dt: float = 0.1
    velocity_floor: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"integration dt must be positive, got {self.dt}")


def _free_road_term(v, params: IdmParams):
    """(v / v0)^delta; a zero desired speed gives no free-road acceleration at any speed."""
    if params.v0 == 0:
        return np.ones_like(np.asarray(v, dtype=np.float64))
    return (v / params.v0) ** params.delta


def _acceleration(v, v_lead, gap, params: IdmParams):
    """IDM law without input checks."""
    dv = v - v_lead
    dynamic = v * params.T_headway + v * dv / (2.0 * math.sqrt(params.a_max * params.b_comf))
    s_star = params.s0 + np.maximum(0.0, dynamic)
    return params.a_max * (1.0 - _free_road_term(v, params) - (s_star / gap) ** 2)


def idm_acceleration(v_follow, v_lead, gap, params: IdmParams):
    """
    IDM acceleration of a follower.

    Accepts scalars or equally shaped arrays.

    Args:
        v_follow: Follower speed (m/s)
        v_lead: Leader speed (m/s)
        gap: Leader position minus follower position (m)
        params: IDM parameters

    Returns:
        Acceleration in m/s^2 (float for scalar input)

    Raises:
        CollisionError: If any gap is zero or negative
    """
    gap_array = np.asarray(gap, dtype=np.float64)
    if np.any(gap_array <= 0):
        index = int(np.argmax(gap_array.ravel() <= 0))
        raise CollisionError("non-positive gap", index)
    result = _acceleration(np.asarray(v_follow, dtype=np.float64),
                           np.asarray(v_lead, dtype=np.float64), gap_array, params)
    if np.ndim(result) == 0:
        return float(result)
    return result


def ballistic_step(s, v, a, dt: float, velocity_floor: float = 0.0):
    """
    One ballistic update, vectorized.

    Without clamping: v' = v + a dt and s' = s + v dt + a dt^2 / 2. When the
    speed would fall below the floor, the vehicle reaches the floor inside
    the step and continues at floor speed for the rest of it.
    """
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)

    v_free = v + a * dt
    s_free = s + v * dt + 0.5 * a * dt * dt

    clamped = v_free < velocity_floor
    if not np.any(clamped):
        return s_free, v_free

    safe_a = np.where(clamped & (a < 0), a, -1.0)
    tau = np.where(v > velocity_floor, (velocity_floor - v) / safe_a, 0.0)
    tau = np.clip(tau, 0.0, dt)
    s_clamped = s + v * tau + 0.5 * a * tau * tau + velocity_floor * (dt - tau)

    return np.where(clamped, s_clamped, s_free), np.maximum(v_free, velocity_floor)


def open_loop_accel_sequence(window: SequenceWindow, params: IdmParams) -> np.ndarray:
    """
    IDM accelerations along the observed states of a window.

    Follower speeds come from finite differences of the observed follower
    positions; the leader state is taken as observed.

    Raises:
        CollisionError: If an observed gap is non-positive, with its sample index
    """
    pair = window.pair
    gaps = pair.gaps
    if np.any(gaps <= 0):
        raise CollisionError(f"window {pair.pair_id!r}: non-positive observed gap", int(np.argmax(gaps <= 0)))
    v_follow = np.maximum(0.0, finite_difference_velocities(pair.follower.positions, pair.dt))
    return _acceleration(v_follow, pair.leader.velocities, gaps, params)


def double_integrate_batch(accels: np.ndarray, s_init, v_init,
                           cfg: IntegrationConfig = IntegrationConfig()) -> np.ndarray:
    """Ballistic integration of (N, H) acceleration rows into (N, H) positions."""
    accels = np.atleast_2d(np.asarray(accels, dtype=np.float64))
    if not np.all(np.isfinite(accels)):
        raise ValueError("accelerations must be finite")
    n, horizon = accels.shape
    positions = np.empty((n, horizon))
    s = np.broadcast_to(np.asarray(s_init, dtype=np.float64), (n,)).copy()
    v = np.broadcast_to(np.asarray(v_init, dtype=np.float64), (n,)).copy()
    positions[:, 0] = s
    for k in range(horizon - 1):
        s, v = ballistic_step(s, v, accels[:, k], cfg.dt, cfg.velocity_floor)
        positions[:, k + 1] = s
    return positions


def double_integrate(accels, s_init: float, v_init: float,
                     cfg: IntegrationConfig = IntegrationConfig()) -> np.ndarray:
    """
    Integrate an acceleration series twice into positions.

    The output has the same length as the input and starts at s_init;
    accels[k] drives the step from sample k to k + 1.
    """
    return double_integrate_batch(np.asarray(accels, dtype=np.float64)[None, :], s_init, v_init, cfg)[0]


@dataclass
class RolloutBatch:
    """Closed-loop rollouts of N followers; collapsed rows are NaN from the collapse on."""
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    collapsed_at: np.ndarray

    @property
    def collapsed(self) -> np.ndarray:
        return self.collapsed_at >= 0


def rollout_batch(leader_positions: np.ndarray, leader_velocities: np.ndarray,
                  s_init, v_init, params: IdmParams,
                  cfg: IntegrationConfig = IntegrationConfig()) -> RolloutBatch:
    """
    Closed-loop IDM rollouts of N followers against N observed leaders.

    Args:
        leader_positions: (N, T) leader positions
        leader_velocities: (N, T) leader speeds
        s_init: (N,) follower start positions
        v_init: (N,) follower start speeds
        params: IDM parameters
        cfg: Integration settings

    Returns:
        RolloutBatch with (N, T) positions, speeds and accelerations
    """
    lp = np.atleast_2d(np.asarray(leader_positions, dtype=np.float64))
    lv = np.atleast_2d(np.asarray(leader_velocities, dtype=np.float64))
    n, steps = lp.shape

    positions = np.full((n, steps), np.nan)
    velocities = np.full((n, steps), np.nan)
    accelerations = np.full((n, steps), np.nan)
    collapsed_at = np.full(n, -1, dtype=np.int64)

    s = np.broadcast_to(np.asarray(s_init, dtype=np.float64), (n,)).copy()
    v = np.broadcast_to(np.asarray(v_init, dtype=np.float64), (n,)).copy()
    alive = np.ones(n, dtype=bool)

    for k in range(steps):
        gap = lp[:, k] - s
        newly = alive & (gap <= 0)
        if np.any(newly):
            collapsed_at[newly] = k
            alive &= ~newly
        positions[alive, k] = s[alive]
        velocities[alive, k] = v[alive]

        safe_gap = np.where(alive, gap, 1.0)
        a = _acceleration(v, lv[:, k], safe_gap, params)
        accelerations[alive, k] = a[alive]
        if k < steps - 1:
            s, v = ballistic_step(s, v, a, cfg.dt, cfg.velocity_floor)

    return RolloutBatch(positions, velocities, accelerations, collapsed_at)


def closed_loop_rollout(leader: Trajectory, follower_s0: float, follower_v0: float,
                        params: IdmParams, cfg: Optional[IntegrationConfig] = None) -> Trajectory:
    """
    Simulate an IDM follower against an observed leader.

    Raises:
        CollisionError: If the gap collapses, with the step index
    """
    cfg = cfg or IntegrationConfig(dt=leader.dt)
    if leader.velocities is None:
        raise ValueError("closed-loop rollout needs leader velocities")
    if not leader.positions[0] - follower_s0 > 0:
        raise CollisionError("initial gap must be positive", 0)

    batch = rollout_batch(leader.positions[None, :], leader.velocities[None, :],
                          follower_s0, follower_v0, params, cfg)
    if batch.collapsed[0]:
        raise CollisionError("gap collapsed during rollout", int(batch.collapsed_at[0]))
    return Trajectory(batch.positions[0], batch.velocities[0], leader.dt, f"{leader.vehicle_id}-idm")


@dataclass
class FdeSummary:
    """Mean closed-loop FDE over the pairs that did not collapse."""
    mean_fde: float
    evaluated: int
    excluded: int


def consistent_start_speed(follower_positions: np.ndarray, leader_velocities: np.ndarray,
                           leader_positions: np.ndarray, params: IdmParams, dt: float,
                           guess: np.ndarray) -> np.ndarray:
    """
    Start speeds whose first ballistic IDM step lands on the observed second sample.

    Solves s1 - s0 = v dt + a(v) dt^2 / 2 per row, starting from the
    finite-difference guess; rows without a non-negative root keep the guess.
    Exact on clean IDM trajectories simulated with the same parameters.
    """
    step = follower_positions[:, 1] - follower_positions[:, 0]
    gap = leader_positions[:, 0] - follower_positions[:, 0]
    v_lead = leader_velocities[:, 0]

    def residual(v):
        v = np.maximum(v, 0.0)
        return v * dt + 0.5 * dt * dt * _acceleration(v, v_lead, gap, params) - step

    with np.errstate(all='ignore'):
        solved = np.asarray(newton(residual, np.asarray(guess, dtype=np.float64), tol=1e-13,
                                   maxiter=50, disp=False), dtype=np.float64)
    ok = np.isfinite(solved) & (solved >= 0) & (np.abs(residual(solved)) < 1e-9)
    return np.where(ok, solved, guess)


class _PairGroups:
    """Pairs stacked by length so rollouts run vectorized per group."""

    def __init__(self, pairs: Sequence[TrajectoryPair]):
        by_length: Dict[int, List[TrajectoryPair]] = {}
        for pair in pairs:
            by_length.setdefault(len(pair), []).append(pair)

        self.groups = []
        for length in sorted(by_length):
            group = by_length[length]
            self.groups.append({
                'dt': group[0].dt,
                'leader_positions': np.stack([p.leader.positions for p in group]),
                'leader_velocities': np.stack([p.leader.velocities for p in group]),
                'follower_positions': np.stack([p.follower.positions for p in group]),
                'v_guess': np.array([
                    max(0.0, finite_difference_velocities(p.follower.positions, p.dt)[0]) for p in group
                ]),
            })

    def fde_summary(self, params: IdmParams, velocity_floor: float = 0.0) -> FdeSummary:
        errors = []
        excluded = 0
        for group in self.groups:
            v_init = consistent_start_speed(group['follower_positions'], group['leader_velocities'],
                                            group['leader_positions'], params, group['dt'], group['v_guess'])
            batch = rollout_batch(group['leader_positions'], group['leader_velocities'],
                                  group['follower_positions'][:, 0], v_init, params,
                                  IntegrationConfig(group['dt'], velocity_floor))
            ok = ~batch.collapsed
            excluded += int(np.sum(~ok))
            if np.any(ok):
                errors.append(batch_fde(batch.positions[ok], group['follower_positions'][ok]))
        if not errors:
            return FdeSummary(math.nan, 0, excluded)
        errors = np.concatenate(errors)
        return FdeSummary(float(np.mean(errors)), int(errors.size), excluded)


def validate_fde(pairs: Sequence[TrajectoryPair], params: IdmParams) -> float:
    """
    Mean final displacement error of closed-loop rollouts over pairs.

    Each rollout starts from the observed follower position at the speed
    consistent with the observed first step (see consistent_start_speed).
    Collapsed rollouts are excluded and counted in a warning.
    """
    summary = _PairGroups(pairs).fde_summary(params)
    if summary.excluded:
        logger.warning(f"⚠️  {summary.excluded} of {len(pairs)} rollouts collapsed and were excluded")
    return summary.mean_fde


DEFAULT_BOUNDS: Dict[str, Tuple[float, float]] = {
    'v0': (5.0, 40.0),
    'T_headway': (0.1, 3.0),
    's0': (0.1, 6.0),
    'a_max': (0.3, 5.0),
    'b_comf': (0.3, 6.0),
    'delta': (1.0, 8.0),
}


COLLAPSE_PENALTY = 1000.0


class _BudgetExhausted(Exception):
    pass


def calibrate_idm(pairs: Sequence[TrajectoryPair],
                  bounds: Optional[Dict[str, Tuple[float, float]]] = None,
                  budget: int = 600,
                  start: Optional[IdmParams] = None,
                  max_sweeps: int = 8) -> Tuple[IdmParams, float]:
    """
    Calibrate IDM parameters by coordinate descent on mean closed-loop FDE.

    Each sweep runs a bounded scalar minimization per parameter in
    PARAM_ORDER. Deterministic for a fixed start and bounds.

    Args:
        pairs: Observed trajectory pairs
        bounds: Per-parameter (low, high) box; defaults to DEFAULT_BOUNDS
        budget: Maximum number of objective evaluations
        start: Starting point (default: center of the box)
        max_sweeps: Maximum number of full coordinate sweeps

    Returns:
        (best parameters, their mean FDE in meters)

    Raises:
        CalibrationError: If every evaluated parameter set collapsed every rollout
    """
    if not pairs:
        raise ConfigurationError("calibration needs at least one pair")
    bounds = dict(DEFAULT_BOUNDS, **(bounds or {}))
    for name, (low, high) in bounds.items():
        if name not in PARAM_ORDER or low > high:
            raise ConfigurationError(f"invalid calibration bound {name}={low, high}")

    if start is None:
        start = IdmParams(**{name: 0.5 * (bounds[name][0] + bounds[name][1]) for name in PARAM_ORDER})

    groups = _PairGroups(pairs)
    state = {'evaluations': 0, 'best': start, 'best_fde': math.inf}

    def objective(params: IdmParams) -> float:
        if state['evaluations'] >= budget:
            raise _BudgetExhausted()
        state['evaluations'] += 1
        summary = groups.fde_summary(params)
        if summary.evaluated == 0:
            value = math.inf
        else:
            # collapsed rollouts are penalized, never averaged away
            value = summary.mean_fde + COLLAPSE_PENALTY * summary.excluded / len(pairs)
        if value < state['best_fde']:
            state['best'], state['best_fde'] = params, value
        return value

    logger.info(f"🚀 Calibrating IDM on {len(pairs)} pairs (budget {budget} evaluations)")
    try:
        current_fde = objective(start)
        current = start
        for sweep in range(max_sweeps):
            previous = current_fde
            for name in PARAM_ORDER:
                low, high = bounds[name]
                if high - low <= 0:
                    continue

                def along(value, name=name):
                    fde_value = objective(replace(current, **{name: float(value)}))
                    return fde_value if math.isfinite(fde_value) else 1e12

                result = minimize_scalar(along, bounds=(low, high), method='bounded',
                                         options={'xatol': 1e-4 * (high - low), 'maxiter': 30})
                current, current_fde = state['best'], state['best_fde']
                logger.debug(f"sweep {sweep} {name}={result.x:.4f} fde={current_fde:.6f}")
            logger.info(f"📊 Sweep {sweep + 1}: objective {current_fde:.6f}")
            if previous - current_fde <= 1e-9 * max(1.0, previous):
                break
    except _BudgetExhausted:
        logger.warning(f"⚠️  Calibration budget of {budget} evaluations exhausted; returning best so far")

    if not math.isfinite(state['best_fde']):
        raise CalibrationError("every evaluated parameter set collapsed all rollouts")

    best_fde = groups.fde_summary(state['best']).mean_fde
    logger.info(f"✅ Calibrated {state['best'].to_dict()} with mean FDE {best_fde:.4f} m")
    return state['best'], best_fde
