"""
Car-following scenario simulator.

Generates leader speed profiles (constant cruising, sinusoidal speed
changes, stop-and-go at a fixed-time signal) and synthesizes followers
with closed-loop IDM to produce labeled trajectory pairs.
"""

import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import get_thread_count, setup_logger
from .errors import CollisionError, ConfigurationError, ScenarioError
from .idm import IdmParams, IntegrationConfig, PRESETS, ballistic_step, closed_loop_rollout
from .trajectory import (DEFAULT_DT, DEFAULT_GAP_THRESHOLD, DEFAULT_HORIZON, Trajectory,
                         TrajectoryPair, extract_pairs)

logger = setup_logger('Scenario')

KINDS = ('constant', 'sinusoidal', 'signal-stop-go')
DEFAULT_MIX = {'constant': 0.25, 'sinusoidal': 0.35, 'signal-stop-go': 0.40}
MAX_SPEED = 40.0

# braking starts once the stop needs this share of the comfortable deceleration
_BRAKE_TRIGGER = 0.9


@dataclass(frozen=True)
class LeadProfileSpec:
    """
    Leader speed profile.

    Signal timing: the light is red for `red` seconds, then green for
    `green` seconds, repeating from t = 0 (shifted by `cycle_offset`).
    """
    kind: str
    base_speed: float
    amplitude: float = 0.0
    period: float = 20.0
    red: float = 30.0
    green: float = 30.0
    stop_line: float = 200.0
    duration: float = 60.0
    dt: float = DEFAULT_DT
    max_accel: float = 1.5
    comfort_decel: float = 2.5
    phase: float = 0.0
    cycle_offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown profile kind {self.kind!r}; choose from {KINDS}")
        low = self.base_speed - abs(self.amplitude) if self.kind == 'sinusoidal' else self.base_speed
        high = self.base_speed + abs(self.amplitude) if self.kind == 'sinusoidal' else self.base_speed
        if low < 0 or high > MAX_SPEED:
            raise ScenarioError(f"profile speeds must stay within [0, {MAX_SPEED}] m/s, got [{low}, {high}]")
        if not self.dt > 0 or not self.period > 0:
            raise ScenarioError("dt and period must be positive")
        if self.duration < DEFAULT_HORIZON * self.dt:
            raise ScenarioError(f"duration {self.duration}s is shorter than one window")
        if self.kind == 'signal-stop-go':
            if self.red <= 0 or self.green <= 0:
                raise ScenarioError("signal phases must be positive")
            if self.max_accel <= 0 or self.comfort_decel <= 0:
                raise ScenarioError("signal profile needs positive acceleration limits")

    @property
    def samples(self) -> int:
        return int(round(self.duration / self.dt)) + 1


@dataclass(frozen=True)
class SimScenario:
    """One leader profile with the follower's initial state and IDM parameters."""
    spec: LeadProfileSpec
    initial_gap: float
    initial_speed: float
    params: IdmParams
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.initial_gap > 0:
            raise ScenarioError(f"initial gap must be positive, got {self.initial_gap}")
        if self.initial_speed < 0:
            raise ScenarioError(f"initial speed must be >= 0, got {self.initial_speed}")


def _integrate_profile(accels: np.ndarray, v_init: float, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    n = accels.size + 1
    positions = np.zeros(n)
    velocities = np.zeros(n)
    s, v = 0.0, v_init
    velocities[0] = v
    for k, a in enumerate(accels):
        s, v = ballistic_step(s, v, a, dt)
        positions[k + 1] = s
        velocities[k + 1] = v
    return positions, velocities


def _signal_profile(spec: LeadProfileSpec) -> Tuple[np.ndarray, np.ndarray]:
    n = spec.samples
    dt = spec.dt
    cycle = spec.red + spec.green
    positions = np.zeros(n)
    velocities = np.zeros(n)
    s, v = 0.0, spec.base_speed
    velocities[0] = v
    braking = False
    # red onset inside the braking distance: the leader clears the line
    running_through = False

    for k in range(n - 1):
        red_now = ((k * dt + spec.cycle_offset) % cycle) < spec.red
        distance = spec.stop_line - s
        cruise = float(np.clip((spec.base_speed - v) / dt, -spec.comfort_decel, spec.max_accel))

        if red_now and distance > -1e-6 and not running_through:
            if v <= 0.0:
                a = 0.0
            else:
                needed = v * v / (2.0 * max(distance, 1e-9))
                if not braking and needed > spec.comfort_decel:
                    if k == 0:
                        raise ScenarioError(
                            f"cannot stop at {spec.stop_line} m: needs {needed:.2f} m/s^2 "
                            f"> {spec.comfort_decel} m/s^2"
                        )
                    running_through = True
                    a = cruise
                elif braking or needed >= _BRAKE_TRIGGER * spec.comfort_decel:
                    braking = True
                    a = -needed
                else:
                    a = cruise
        else:
            braking = False
            a = cruise

        s, v = ballistic_step(s, v, a, dt)
        s, v = float(s), float(v)
        positions[k + 1] = s
        velocities[k + 1] = v

    return positions, velocities


def generate_lead_trajectory(spec: LeadProfileSpec, seed: Optional[int] = None,
                             vehicle_id: str = 'lead') -> Trajectory:
    """
    Build a kinematically consistent leader trajectory starting at 0 m.

    Positions are the ballistic integral of the speed profile. When a seed
    is given, the sinusoid phase and the signal cycle offset are drawn from
    it; otherwise the values stored in the spec are used.

    Raises:
        ScenarioError: If a red light cannot be stopped for comfortably
    """
    if seed is not None:
        rng = np.random.default_rng(seed)
        spec = _with_random_timing(spec, rng)

    n = spec.samples
    t = np.arange(n) * spec.dt
    if spec.kind == 'constant':
        positions, velocities = _integrate_profile(np.zeros(n - 1), spec.base_speed, spec.dt)
    elif spec.kind == 'sinusoidal':
        target = spec.base_speed + spec.amplitude * np.sin(2.0 * math.pi * t / spec.period + spec.phase)
        accels = np.diff(target) / spec.dt
        positions, velocities = _integrate_profile(accels, float(target[0]), spec.dt)
    else:
        positions, velocities = _signal_profile(spec)

    return Trajectory(positions, velocities, spec.dt, vehicle_id)


def _with_random_timing(spec: LeadProfileSpec, rng: np.random.Generator) -> LeadProfileSpec:
    values = asdict(spec)
    values['phase'] = float(rng.uniform(0.0, 2.0 * math.pi))
    values['cycle_offset'] = float(rng.uniform(0.0, spec.red + spec.green))
    return LeadProfileSpec(**values)


def simulate_follower(lead: Trajectory, scenario: SimScenario,
                      vehicle_id: str = 'follow') -> TrajectoryPair:
    """
    Simulate the IDM follower behind a leader.

    Raises:
        ScenarioError: If the follower's gap collapses
    """
    cfg = IntegrationConfig(dt=lead.dt)
    try:
        follower = closed_loop_rollout(lead, float(lead.positions[0]) - scenario.initial_gap,
                                       scenario.initial_speed, scenario.params, cfg)
    except CollisionError as e:
        raise ScenarioError(
            f"{scenario.spec.kind} scenario collapsed at step {e.index} "
            f"(gap {scenario.initial_gap:.2f} m, speed {scenario.initial_speed:.2f} m/s)"
        ) from e
    return TrajectoryPair(lead, Trajectory(follower.positions, None, lead.dt, vehicle_id), vehicle_id)


@dataclass
class ScenarioResult:
    """Outcome of generating one scenario index, including retries."""
    index: int
    success: bool
    attempts: int
    scenario: Optional[Dict] = None
    pairs: List[TrajectoryPair] = field(default_factory=list)
    error: Optional[str] = None


def _validate_mix(mix: Dict[str, float]) -> Dict[str, float]:
    unknown = sorted(set(mix) - set(KINDS))
    if unknown:
        raise ConfigurationError(f"unknown profile kinds in mix: {unknown}")
    if any(weight < 0 for weight in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"mix weights must be non-negative and sum to 1, got {mix}")
    return {kind: float(mix.get(kind, 0.0)) for kind in KINDS}


def sample_lead_spec(rng: np.random.Generator, kind: str, duration: float, dt: float) -> LeadProfileSpec:
    """Draw a leader profile of the given kind."""
    if kind == 'constant':
        return LeadProfileSpec(kind, float(rng.uniform(5.0, 15.0)), duration=duration, dt=dt)
    if kind == 'sinusoidal':
        return LeadProfileSpec(kind, float(rng.uniform(7.0, 12.0)),
                               amplitude=float(rng.uniform(1.0, 3.0)),
                               period=float(rng.uniform(10.0, 30.0)),
                               duration=duration, dt=dt)
    return LeadProfileSpec(kind, float(rng.uniform(8.0, 14.0)),
                           red=float(rng.uniform(15.0, 30.0)),
                           green=float(rng.uniform(15.0, 30.0)),
                           stop_line=float(rng.uniform(150.0, 300.0)),
                           duration=duration, dt=dt)


def _generate_one(index: int, seed: int, mix: Dict[str, float], params: IdmParams,
                  duration: float, dt: float, gap_threshold: float, max_retries: int) -> ScenarioResult:
    kinds = list(mix)
    weights = np.array([mix[k] for k in kinds])
    errors = []

    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, index, attempt])
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        vehicle = f"scn{index:05d}"
        try:
            spec = sample_lead_spec(rng, kind, duration, dt)
            lead_seed = int(rng.integers(0, 2 ** 31 - 1))
            lead = generate_lead_trajectory(spec, lead_seed, f"{vehicle}-lead")
            initial_gap = float(rng.uniform(params.s0 + 2.0, 45.0))
            initial_speed = max(0.0, float(lead.velocities[0] + rng.uniform(-2.0, 2.0)))
            scenario = SimScenario(spec, initial_gap, initial_speed, params, lead_seed)
            pair = simulate_follower(lead, scenario, vehicle)

            kept = extract_pairs([pair.leader, pair.follower], gap_threshold)
            if len(kept) != 1 or len(kept[0]) != len(pair):
                raise ScenarioError(f"gap left (0, {gap_threshold}] m during the run")

            record = {
                'index': index,
                'attempt': attempt,
                'lead': asdict(spec),
                'lead_seed': lead_seed,
                'initial_gap': initial_gap,
                'initial_speed': initial_speed,
            }
            return ScenarioResult(index, True, attempt + 1, record, kept)
        except ScenarioError as e:
            errors.append(str(e))

    return ScenarioResult(index, False, max_retries + 1, error='; '.join(errors))


def build_dataset(n_scenarios: int,
                  spec_mix: Optional[Dict[str, float]] = None,
                  params: Optional[IdmParams] = None,
                  seed: int = 0,
                  duration: float = 60.0,
                  dt: float = DEFAULT_DT,
                  gap_threshold: float = DEFAULT_GAP_THRESHOLD,
                  max_retries: int = 10,
                  max_workers: Optional[int] = None) -> Tuple[List[TrajectoryPair], Dict]:
    """
    Simulate a labeled dataset of car-following pairs.

    Scenarios are generated in parallel; each index draws its parameters
    from (seed, index, attempt), and results are assembled in index order.

    Args:
        n_scenarios: Number of scenarios (>= 1)
        spec_mix: Share of each profile kind (default DEFAULT_MIX)
        params: Follower IDM parameters (default: the 'sumo' preset)
        seed: Dataset seed
        duration: Scenario length in seconds
        dt: Sample period
        gap_threshold: Maximum car-following gap
        max_retries: Resampling budget per rejected scenario
        max_workers: Thread count (default: IDMF_THREADS)

    Returns:
        (pairs, manifest)

    Raises:
        ScenarioError: If no scenario could be generated
    """
    if n_scenarios < 1:
        raise ConfigurationError(f"n_scenarios must be >= 1, got {n_scenarios}")
    mix = _validate_mix(spec_mix or DEFAULT_MIX)
    params = params or PRESETS['sumo']
    max_workers = max_workers or get_thread_count()

    logger.info(f"🚀 Simulating {n_scenarios} scenarios with {max_workers} workers")
    results: List[Optional[ScenarioResult]] = [None] * n_scenarios
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = {
            executor.submit(_generate_one, i, seed, mix, params, duration, dt, gap_threshold, max_retries): i
            for i in range(n_scenarios)
        }
        for future in as_completed(futures):
            results[futures[future]] = future.result()

    pairs: List[TrajectoryPair] = []
    accepted = [r for r in results if r.success]
    rejected = [r for r in results if not r.success]
    for result in accepted:
        pairs.extend(result.pairs)
    for result in rejected:
        logger.warning(f"⚠️  Scenario {result.index} rejected after {result.attempts} attempts: {result.error}")
    if not accepted:
        raise ScenarioError("every scenario was rejected")

    first_try = sum(1 for r in accepted if r.attempts == 1)
    logger.info(f"✅ Accepted {len(accepted)}/{n_scenarios} scenarios ({first_try} on the first attempt)")

    manifest = {
        'seed': seed,
        'n_scenarios': n_scenarios,
        'mix': mix,
        'idm_params': params.to_dict(),
        'dt': dt,
        'duration': duration,
        'gap_threshold': gap_threshold,
        'max_retries': max_retries,
        'accepted': len(accepted),
        'accepted_first_attempt': first_try,
        'rejected': [{'index': r.index, 'error': r.error} for r in rejected],
        'scenarios': [r.scenario for r in accepted],
    }
    return pairs, manifest
