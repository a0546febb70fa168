"""
Tests for the IDM law, ballistic integration, rollouts and calibration.
"""

import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from conftest import simulated_pair, simulated_pairs
from src import idm
from src.errors import CollisionError, ConfigurationError
from src.idm import (PARAM_ORDER, PRESETS, FdeSummary, IdmParams, IntegrationConfig, ballistic_step,
                     calibrate_idm, closed_loop_rollout, double_integrate, get_preset, idm_acceleration,
                     open_loop_accel_sequence, rollout_batch, validate_fde)
from src.metrics import rmse
from src.trajectory import Trajectory

SUMO = PRESETS['sumo']


class TestParams:
    def test_invalid_values_are_listed(self):
        with pytest.raises(ConfigurationError, match='v0=-1'):
            IdmParams(-1.0, 1.0, 2.0, 1.0, 1.0, 4.0)

    def test_json_keys_round_trip(self):
        data = SUMO.to_dict()
        assert set(data) == {'v0', 'T', 's0', 'a', 'b', 'delta'}
        assert IdmParams.from_dict(data) == SUMO

    def test_unknown_json_key(self):
        data = dict(SUMO.to_dict(), extra=1.0)
        with pytest.raises(ConfigurationError, match='extra'):
            IdmParams.from_dict(data)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            get_preset('autobahn')

    def test_zero_desired_speed_is_allowed(self):
        parked = IdmParams(0.0, 1.0, 2.0, 1.0, 1.5, 4.0)
        assert idm_acceleration(0.0, 0.0, 1e9, parked) == pytest.approx(0.0)
        assert idm_acceleration(5.0, 5.0, 20.0, parked) < 0.0
        assert parked.equilibrium_gap(0.0) == math.inf

    def test_equilibrium_gap_at_rest_is_jam_gap(self):
        assert SUMO.equilibrium_gap(0.0) == SUMO.s0
        assert SUMO.equilibrium_gap(SUMO.v0) == math.inf


class TestAcceleration:
    def test_zero_at_rest_with_jam_gap(self):
        assert idm_acceleration(0.0, 0.0, SUMO.s0, SUMO) == 0.0

    @pytest.mark.parametrize('v', [5.0, 10.0, 15.0])
    def test_zero_at_equilibrium_gap(self, v):
        assert idm_acceleration(v, v, SUMO.equilibrium_gap(v), SUMO) == pytest.approx(0.0, abs=1e-12)

    def test_free_road_start_is_max_accel(self):
        assert idm_acceleration(0.0, 0.0, 1e9, SUMO) == pytest.approx(SUMO.a_max)

    def test_collision_reports_index(self):
        with pytest.raises(CollisionError) as info:
            idm_acceleration(np.array([5.0, 5.0, 5.0]), np.array([5.0, 5.0, 5.0]),
                             np.array([10.0, 3.0, 0.0]), SUMO)
        assert info.value.index == 2

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 30.0), st.floats(0.0, 30.0), st.floats(0.5, 100.0), st.floats(0.1, 50.0))
    def test_monotone_in_gap_and_speed(self, v, v_lead, gap, extra):
        base = idm_acceleration(v, v_lead, gap, SUMO)
        assert idm_acceleration(v, v_lead, gap + extra, SUMO) >= base - 1e-12
        assert idm_acceleration(v + extra * 0.1, v_lead, gap, SUMO) <= base + 1e-12


class TestIntegration:
    def test_constant_acceleration_is_exact(self):
        dt, a, v0, s0 = 0.1, 0.8, 3.0, 12.0
        positions = double_integrate(np.full(80, a), s0, v0, IntegrationConfig(dt))
        t = np.arange(80) * dt
        assert np.max(np.abs(positions - (s0 + v0 * t + 0.5 * a * t * t))) < 1e-12

    def test_ramp_error_matches_ballistic_bound(self):
        dt, steps = 0.1, 80
        accels = (np.arange(steps) + 0.5) * dt
        positions = double_integrate(accels, 0.0, 0.0, IntegrationConfig(dt))
        t = np.arange(steps) * dt
        np.testing.assert_allclose(t ** 3 / 6.0 - positions, t * dt * dt / 12.0, atol=1e-9)

    def test_stop_inside_step(self):
        s, v = ballistic_step(0.0, 0.5, -10.0, 0.1)
        assert float(v) == 0.0
        assert float(s) == pytest.approx(0.0125)

    def test_output_length_and_start(self):
        positions = double_integrate(np.zeros(5), 7.0, 2.0)
        assert positions.shape == (5,) and positions[0] == 7.0


class TestRollouts:
    @pytest.mark.parametrize('v', [5.0, 10.0, 15.0])
    def test_equilibrium_rollout_is_stable(self, v):
        steps = 80
        t = np.arange(steps) * 0.1
        leader = Trajectory(100.0 + v * t, np.full(steps, v))
        gap = SUMO.equilibrium_gap(v)
        follower = closed_loop_rollout(leader, 100.0 - gap, v, SUMO)
        assert np.max(np.abs(leader.positions - follower.positions - gap)) < 0.05

    def test_collision_raises_with_step(self):
        steps = 40
        leader = Trajectory(np.full(steps, 10.0), np.zeros(steps))
        with pytest.raises(CollisionError) as info:
            closed_loop_rollout(leader, 9.0, 30.0, SUMO)
        assert info.value.index > 0

    def test_parked_leader_gap_settles_at_jam_gap(self):
        steps = 1200
        leader = Trajectory(np.full(steps, 500.0), np.zeros(steps))
        follower = closed_loop_rollout(leader, 400.0, 0.0, SUMO)
        gaps = leader.positions - follower.positions
        assert np.all(np.diff(gaps) <= 1e-12)
        assert gaps.min() > 0.0
        assert gaps[-1] == pytest.approx(SUMO.s0, abs=0.1)

    def test_rollout_reproduces_simulated_follower(self):
        pair = simulated_pair(base_speed=10.0, gap=20.0, seed=3)
        follower = closed_loop_rollout(pair.leader, pair.follower.positions[0], 10.0, SUMO)
        np.testing.assert_allclose(follower.positions, pair.follower.positions, rtol=0, atol=1e-9)

    def test_simulated_follower_satisfies_idm(self):
        pair = simulated_pair(base_speed=10.0, gap=20.0, seed=4)
        follower = closed_loop_rollout(pair.leader, pair.follower.positions[0], 10.0, SUMO)
        law = idm_acceleration(follower.velocities, pair.leader.velocities, pair.gaps, SUMO)
        dt = pair.dt
        # no stops on this profile, so every step is an unclamped ballistic update
        np.testing.assert_allclose(np.diff(follower.velocities) / dt, law[:-1], rtol=0, atol=1e-9)
        np.testing.assert_allclose(np.diff(follower.positions),
                                   follower.velocities[:-1] * dt + 0.5 * law[:-1] * dt * dt, rtol=0, atol=1e-9)

    def test_batch_flags_collapsed_rows(self):
        steps = 40
        lp = np.stack([np.full(steps, 10.0), 100.0 + 10.0 * np.arange(steps) * 0.1])
        lv = np.stack([np.zeros(steps), np.full(steps, 10.0)])
        batch = rollout_batch(lp, lv, np.array([9.0, 70.0]), np.array([30.0, 10.0]), SUMO)
        assert batch.collapsed.tolist() == [True, False]
        assert np.all(np.isfinite(batch.positions[1]))

    def test_open_loop_reconstruction(self, clean_windows, sumo):
        for window in clean_windows:
            accels = open_loop_accel_sequence(window, sumo)
            positions = double_integrate(accels, window.pair.follower.positions[0], window.follower_v0)
            assert rmse(positions, window.pair.follower.positions) < 0.05


class TestCalibration:
    def test_true_parameters_have_zero_fde(self):
        assert validate_fde(simulated_pairs(6), SUMO) < 1e-6

    def test_wrong_parameters_have_larger_fde(self):
        pairs = simulated_pairs(6)
        assert validate_fde(pairs, PRESETS['ngsim-yang2022']) > validate_fde(pairs, SUMO)

    def test_empty_pairs(self):
        with pytest.raises(ConfigurationError):
            calibrate_idm([])

    def test_calibration_improves_on_start(self):
        pairs = simulated_pairs(4)
        start = PRESETS['ngsim-wang2021']
        params, fde = calibrate_idm(pairs, budget=120, start=start)
        assert fde <= validate_fde(pairs, start) + 1e-12
        assert isinstance(params, IdmParams)

    def test_reported_fde_is_validation_fde(self):
        pairs = simulated_pairs(3)
        params, fde = calibrate_idm(pairs, budget=40, start=PRESETS['ngsim-yang2022'])
        assert fde == validate_fde(pairs, params)

    def test_reported_fde_ignores_collapse_penalty(self, monkeypatch):
        # every evaluation: one pair scored at 0.5 m, one collapsed
        monkeypatch.setattr(idm._PairGroups, 'fde_summary', lambda self, params: FdeSummary(0.5, 1, 1))
        pairs = [simulated_pair(seed=0), simulated_pair(seed=1)]
        bounds = {name: (getattr(SUMO, name), getattr(SUMO, name)) for name in PARAM_ORDER}
        params, fde = calibrate_idm(pairs, bounds=bounds)
        assert params == SUMO and fde == 0.5
        assert fde == validate_fde(pairs, SUMO)

    def test_collapsed_bounds_return_that_point(self):
        pairs = [simulated_pair(seed=2)]
        bounds = {name: (getattr(SUMO, name), getattr(SUMO, name)) for name in PARAM_ORDER}
        params, fde = calibrate_idm(pairs, bounds=bounds, budget=5)
        assert params == SUMO
        assert fde == validate_fde(pairs, SUMO) and fde < 1e-6

    @pytest.mark.slow
    def test_recovers_generating_parameters(self):
        pairs = simulated_pairs(200)
        params, fde = calibrate_idm(pairs, budget=600)
        for name in ('v0', 'T_headway', 's0'):
            assert getattr(params, name) == pytest.approx(getattr(SUMO, name), rel=0.10)

    def test_deterministic(self):
        pairs = [simulated_pair(seed=5)]
        assert calibrate_idm(pairs, budget=40) == calibrate_idm(pairs, budget=40)
