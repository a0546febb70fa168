"""
Tests for trajectory types, pair extraction, windowing, splitting and CSV I/O.
"""

import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.errors import ConfigurationError, TrajectoryError, TrajectoryParseError
from src.trajectory import (DatasetSplit, SequenceWindow, Trajectory, TrajectoryPair, denormalize,
                            extract_pairs, finite_difference_velocities, load_csv, load_split,
                            normalize_window, save_csv, save_split, split_dataset, window_pairs)


def make_pair(gaps, speed=10.0, dt=0.1, pair_id='p'):
    gaps = np.asarray(gaps, dtype=np.float64)
    t = np.arange(gaps.size) * dt
    lead = 100.0 + speed * t
    return TrajectoryPair(
        Trajectory(lead, np.full(gaps.size, speed), dt, 'lead'),
        Trajectory(lead - gaps, None, dt, 'follow'),
        pair_id,
    )


class TestTrajectoryTypes:
    def test_positions_are_read_only(self):
        trajectory = Trajectory([0.0, 1.0, 2.0], [10.0, 10.0, 10.0])
        with pytest.raises(ValueError):
            trajectory.positions[0] = 5.0

    def test_too_short_trajectory(self):
        with pytest.raises(TrajectoryError):
            Trajectory([1.0])

    def test_velocity_length_mismatch(self):
        with pytest.raises(TrajectoryError):
            Trajectory([0.0, 1.0, 2.0], [1.0, 1.0])

    def test_pair_rejects_follower_ahead(self):
        lead = Trajectory([10.0, 11.0, 12.0], [10.0, 10.0, 10.0])
        follower = Trajectory([5.0, 11.5, 6.0])
        with pytest.raises(TrajectoryError, match='sample 1'):
            TrajectoryPair(lead, follower, 'x')

    def test_noisy_pair_skips_gap_check(self):
        lead = Trajectory([10.0, 11.0, 12.0], [10.0, 10.0, 10.0])
        follower = Trajectory([5.0, 11.5, 6.0])
        assert TrajectoryPair(lead, follower, 'x', noisy=True).noisy

    def test_mismatched_dt(self):
        lead = Trajectory([10.0, 11.0], [1.0, 1.0], dt=0.1)
        follower = Trajectory([5.0, 6.0], dt=0.2)
        with pytest.raises(TrajectoryError):
            TrajectoryPair(lead, follower)

    def test_finite_difference_exact_for_quadratic(self):
        dt = 0.1
        t = np.arange(20) * dt
        positions = 3.0 + 4.0 * t + 0.75 * t ** 2
        np.testing.assert_allclose(finite_difference_velocities(positions, dt), 4.0 + 1.5 * t, atol=1e-10)


class TestExtractPairs:
    def test_threshold_cuts_spans(self):
        gaps = np.array([10.0, 20.0, 60.0, 70.0, 30.0, 30.0, 30.0])
        pair = make_pair(np.full(gaps.size, 10.0))
        follower = Trajectory(pair.leader.positions - gaps, None, 0.1, 'f')
        pairs = extract_pairs([pair.leader, follower], gap_threshold=50.0)
        assert [len(p) for p in pairs] == [2, 3]
        assert [p.pair_id for p in pairs] == ['f.0', 'f.1']
        for p in pairs:
            assert np.all(p.gaps > 0) and np.all(p.gaps <= 50.0)

    def test_gap_exactly_at_threshold_is_kept(self):
        pair = make_pair([50.0, 50.0, 50.0])
        assert len(extract_pairs([pair.leader, pair.follower], 50.0)) == 1

    def test_single_vehicle_gives_nothing(self):
        pair = make_pair([10.0, 10.0])
        assert extract_pairs([pair.leader]) == []

    def test_mismatched_dt_raises(self):
        lead = Trajectory([10.0, 11.0, 12.0], [10.0] * 3, dt=0.1)
        follower = Trajectory([0.0, 1.0, 2.0], dt=0.2)
        with pytest.raises(TrajectoryError):
            extract_pairs([lead, follower])

    def test_bad_threshold(self):
        pair = make_pair([10.0, 10.0])
        with pytest.raises(ConfigurationError):
            extract_pairs([pair.leader, pair.follower], 0.0)


class TestWindowing:
    def test_window_count_and_ids(self):
        windows = window_pairs([make_pair(np.full(250, 20.0), pair_id='a')], horizon=80)
        assert [w.window_id for w in windows] == ['a@0', 'a@80', 'a@160']
        assert all(w.horizon == 80 for w in windows)

    def test_stride_overlaps(self):
        windows = window_pairs([make_pair(np.full(100, 20.0))], horizon=80, stride=10)
        assert len(windows) == 3

    def test_follower_v0_from_positions(self):
        windows = window_pairs([make_pair(np.full(100, 20.0), speed=12.0)], horizon=80)
        assert windows[0].follower_v0 == pytest.approx(12.0, abs=1e-9)

    def test_window_with_large_gap_is_dropped(self):
        gaps = np.full(160, 20.0)
        gaps[100] = 55.0
        windows = window_pairs([make_pair(gaps)], horizon=80, gap_threshold=50.0)
        assert [w.window_id for w in windows] == ['p@0']

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=-5.0, max_value=70.0, allow_nan=False), min_size=2, max_size=60),
           st.integers(min_value=2, max_value=12), st.integers(min_value=1, max_value=6))
    def test_windows_match_brute_force_scan(self, gaps, horizon, stride):
        gaps = np.asarray(gaps)
        n = gaps.size
        lead_positions = 200.0 + np.arange(n)
        pair = TrajectoryPair(Trajectory(lead_positions, np.ones(n)),
                              Trajectory(lead_positions - gaps), 'h', noisy=True)
        expected = [start for start in range(0, n - horizon + 1, stride)
                    if all(0 < g <= 50.0 for g in gaps[start:start + horizon])]
        windows = window_pairs([pair], horizon, stride)
        assert [int(w.window_id.split('@')[1]) for w in windows] == expected


class TestSplit:
    def test_sizes_floor_then_remainder(self):
        windows = window_pairs([make_pair(np.full(10 * 8942, 20.0))], horizon=10)
        split = split_dataset(windows, (0.5, 0.2, 0.3), seed=0)
        assert split.sizes() == (4471, 1788, 2683)

    def test_bad_ratios(self):
        windows = window_pairs([make_pair(np.full(40, 20.0))], horizon=10)
        with pytest.raises(ConfigurationError):
            split_dataset(windows, (0.5, 0.5, 0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=1000))
    def test_split_is_a_partition(self, count, seed):
        windows = window_pairs([make_pair(np.full(5 * count, 20.0))], horizon=5)
        split = split_dataset(windows, seed=seed)
        ids = [w.window_id for w in split.train + split.validation + split.test]
        assert sorted(ids) == sorted(w.window_id for w in windows)
        assert len(set(ids)) == len(ids)
        again = split_dataset(windows, seed=seed)
        assert [w.window_id for w in again.train] == [w.window_id for w in split.train]


class TestNormalization:
    def test_round_trip(self):
        window = window_pairs([make_pair(np.full(80, 20.0))], horizon=80)[0]
        normalized, normalizer = normalize_window(window)
        assert normalized.leader_positions[0] == 0.0
        np.testing.assert_allclose(denormalize(normalized.follower_positions, normalizer),
                                   window.pair.follower.positions, atol=1e-9)
        np.testing.assert_allclose(normalized.leader_velocities, 10.0 / 30.0)


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pairs = [make_pair(rng.uniform(5.0, 40.0, size=30), pair_id=f"p{i}") for i in range(3)]
        path = tmp_path / 'pairs.csv'
        save_csv(pairs, str(path))
        loaded = load_csv(str(path))
        assert [p.pair_id for p in loaded] == ['p0', 'p1', 'p2']
        for original, copy in zip(pairs, loaded):
            np.testing.assert_array_equal(original.follower.positions, copy.follower.positions)
            np.testing.assert_array_equal(original.leader.velocities, copy.leader.velocities)
            assert copy.dt == pytest.approx(0.1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(str(tmp_path / 'absent.csv'))

    def test_parse_error_line_number(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("t,pair_id,s_lead,v_lead,s_follow\n0,a,10,1,5\n0.1,a,abc,1,5\n")
        with pytest.raises(TrajectoryParseError) as info:
            load_csv(str(path))
        assert info.value.line_number == 3

    def test_split_directory_round_trip(self, tmp_path, clean_split):
        save_split(clean_split, str(tmp_path), (0.5, 0.2, 0.3), noise_level='clean')
        loaded = load_split(str(tmp_path))
        assert loaded.sizes() == clean_split.sizes()
        assert [w.window_id for w in loaded.test] == [w.window_id for w in clean_split.test]
        assert loaded.test[0].follower_v0 == clean_split.test[0].follower_v0
        np.testing.assert_array_equal(loaded.test[0].clean_pair.follower.positions,
                                      clean_split.test[0].pair.follower.positions)


def test_split_map_keeps_membership(clean_split):
    mapped = clean_split.map(lambda w: SequenceWindow(w.pair, w.follower_v0 + 1.0))
    assert isinstance(mapped, DatasetSplit)
    assert mapped.sizes() == clean_split.sizes()
    assert mapped.train[0].follower_v0 == clean_split.train[0].follower_v0 + 1.0
