"""
Shared fixtures: small IDM-simulated datasets.
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path so we can import src modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.idm import PRESETS
from src.scenario import LeadProfileSpec, SimScenario, generate_lead_trajectory, simulate_follower
from src.trajectory import split_dataset, window_pairs


def simulated_pair(kind: str = 'sinusoidal', base_speed: float = 10.0, gap: float = 20.0,
                   duration: float = 24.0, seed: int = 0, vehicle_id: str = 'sim'):
    """One leader profile with its IDM follower (SUMO parameters)."""
    extra = {'amplitude': 2.0, 'period': 15.0} if kind == 'sinusoidal' else {}
    spec = LeadProfileSpec(kind, base_speed, duration=duration, **extra)
    lead = generate_lead_trajectory(spec, seed, f"{vehicle_id}-lead")
    scenario = SimScenario(spec, gap, base_speed, PRESETS['sumo'], seed)
    return simulate_follower(lead, scenario, vehicle_id)


def simulated_pairs(count: int, duration: float = 24.0):
    rng = np.random.default_rng(123)
    pairs = []
    for i in range(count):
        kind = 'sinusoidal' if i % 2 == 0 else 'constant'
        pairs.append(simulated_pair(kind, float(rng.uniform(8.0, 12.0)), float(rng.uniform(12.0, 25.0)),
                                    duration, seed=i, vehicle_id=f"sim{i:03d}"))
    return pairs


@pytest.fixture
def sumo():
    return PRESETS['sumo']


@pytest.fixture(scope='session')
def clean_windows():
    """Eighty-sample windows cut from twelve simulated pairs."""
    return window_pairs(simulated_pairs(12), horizon=80)


@pytest.fixture(scope='session')
def clean_split(clean_windows):
    return split_dataset(clean_windows, (0.5, 0.2, 0.3), seed=3)


@pytest.fixture
def tiny_split():
    """Ten-sample windows for fast training tests."""
    windows = window_pairs(simulated_pairs(4, duration=8.0), horizon=10)
    return split_dataset(windows, (0.6, 0.2, 0.2), seed=1)
