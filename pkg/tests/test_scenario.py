"""
Tests for leader profiles and simulated datasets.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.errors import ConfigurationError, ScenarioError
from src.idm import PRESETS
from src.scenario import (DEFAULT_MIX, LeadProfileSpec, SimScenario, build_dataset, generate_lead_trajectory,
                          simulate_follower)
from src.trajectory import window_pairs


class TestLeadProfiles:
    def test_constant_profile(self):
        lead = generate_lead_trajectory(LeadProfileSpec('constant', 12.0, duration=10.0))
        assert len(lead) == 101
        np.testing.assert_allclose(lead.velocities, 12.0)
        np.testing.assert_allclose(lead.positions[-1], 120.0)

    def test_sinusoid_stays_in_band(self):
        spec = LeadProfileSpec('sinusoidal', 10.0, amplitude=2.0, period=20.0, duration=60.0)
        lead = generate_lead_trajectory(spec, seed=1)
        assert lead.velocities.min() >= 8.0 - 1e-9
        assert lead.velocities.max() <= 12.0 + 1e-9

    def test_positions_integrate_velocities(self):
        spec = LeadProfileSpec('sinusoidal', 10.0, amplitude=2.0, period=20.0, duration=20.0)
        lead = generate_lead_trajectory(spec, seed=2)
        # ballistic steps: position increment is the mean of the two speeds times dt
        increments = np.diff(lead.positions)
        np.testing.assert_allclose(increments, 0.5 * (lead.velocities[:-1] + lead.velocities[1:]) * 0.1,
                                   atol=1e-12)

    def test_signal_stops_before_line(self):
        spec = LeadProfileSpec('signal-stop-go', 10.0, red=25.0, green=20.0, stop_line=120.0, duration=60.0)
        lead = generate_lead_trajectory(spec)
        stopped = lead.velocities < 1e-9
        assert stopped.any()
        assert lead.positions[stopped].max() <= 120.0 + 1e-6
        assert lead.velocities.min() >= 0.0
        assert lead.positions[-1] > 120.0

    def test_unreachable_stop_raises(self):
        spec = LeadProfileSpec('signal-stop-go', 14.0, red=25.0, green=20.0, stop_line=10.0, duration=20.0)
        with pytest.raises(ScenarioError):
            generate_lead_trajectory(spec)

    def test_speed_outside_range(self):
        with pytest.raises(ScenarioError):
            LeadProfileSpec('sinusoidal', 39.0, amplitude=3.0)

    def test_unknown_kind(self):
        with pytest.raises(ScenarioError):
            LeadProfileSpec('zigzag', 10.0)


class TestFollower:
    def test_follower_stays_behind(self):
        spec = LeadProfileSpec('signal-stop-go', 10.0, red=25.0, green=20.0, stop_line=150.0, duration=60.0)
        lead = generate_lead_trajectory(spec)
        pair = simulate_follower(lead, SimScenario(spec, 20.0, 10.0, PRESETS['sumo']))
        assert np.all(pair.gaps > 0)

    def test_parked_leader_terminal_gap(self):
        spec = LeadProfileSpec('constant', 0.0, duration=120.0)
        lead = generate_lead_trajectory(spec)
        pair = simulate_follower(lead, SimScenario(spec, 100.0, 0.0, PRESETS['sumo']))
        assert np.all(np.diff(pair.gaps) <= 1e-12) and pair.gaps.min() > 0
        assert pair.gaps[-1] == pytest.approx(PRESETS['sumo'].s0, abs=0.1)

    def test_impossible_start_raises(self):
        spec = LeadProfileSpec('constant', 0.0, duration=10.0)
        lead = generate_lead_trajectory(spec)
        with pytest.raises(ScenarioError):
            simulate_follower(lead, SimScenario(spec, 1.0, 35.0, PRESETS['sumo']))


class TestBuildDataset:
    def test_dataset_is_deterministic_across_threads(self):
        first, manifest = build_dataset(6, seed=4, duration=20.0, max_workers=1)
        second, _ = build_dataset(6, seed=4, duration=20.0, max_workers=4)
        assert [p.pair_id for p in first] == [p.pair_id for p in second]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.follower.positions, b.follower.positions)
        assert manifest['accepted'] == 6
        assert manifest['mix'] == DEFAULT_MIX

    def test_pairs_respect_gap_threshold(self):
        pairs, _ = build_dataset(5, seed=8, duration=20.0)
        for pair in pairs:
            assert np.all(pair.gaps > 0) and np.all(pair.gaps <= 50.0)
            assert len(pair) == 201
        assert len(window_pairs(pairs)) == 5 * 2

    @pytest.mark.slow
    def test_default_mix_accepts_on_first_attempt(self):
        _, manifest = build_dataset(1000, seed=7)
        assert manifest['accepted_first_attempt'] >= 0.95 * 1000

    def test_bad_mix(self):
        with pytest.raises(ConfigurationError):
            build_dataset(2, spec_mix={'constant': 0.5, 'sinusoidal': 0.2})

    def test_single_kind_mix(self):
        pairs, manifest = build_dataset(3, spec_mix={'constant': 1.0}, seed=1, duration=10.0)
        assert {s['lead']['kind'] for s in manifest['scenarios']} == {'constant'}
        assert len(pairs) == 3
