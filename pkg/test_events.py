"""Tests for event streams, voxelization, reversal and persistence."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from src.config import ConfigError
from src.events import (TIME_RESOLUTION, EventRangeError, EventRecord, EventStream, VoxelGrid,
                        downsample_voxel, load_voxel, quantize_time, read_events_csv, reverse,
                        reverse_voxel, save_voxel, simulate_events, slice_segments, split_segments,
                        voxelize, voxelize_clip, write_events_csv)
from src.selftest import brute_force_voxelize, random_stream


@st.composite
def streams(draw, max_events=40, size=8):
    n = draw(st.integers(0, max_events))
    ticks = draw(st.lists(st.integers(0, TIME_RESOLUTION), min_size=n, max_size=n))
    xs = draw(st.lists(st.integers(0, size - 1), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, size - 1), min_size=n, max_size=n))
    ps = draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    return EventStream(ticks, xs, ys, ps)


class TestEventStream:
    def test_records_are_sorted_by_time(self):
        events = EventStream.from_records([(0.75, 1, 1, 1), (0.25, 0, 0, -1), (0.5, 2, 0, 1)])
        assert list(events.t) == [0.25, 0.5, 0.75]
        assert events.records()[0] == EventRecord(0.25, 0, 0, -1)

    def test_rejects_bad_polarity(self):
        with pytest.raises(EventRangeError) as info:
            EventStream([0, 1], [0, 0], [0, 0], [1, 0])
        assert info.value.index == 1

    def test_rejects_time_outside_interval(self):
        with pytest.raises(EventRangeError):
            EventStream.from_records([(1.5, 0, 0, 1)])

    def test_rejects_negative_coordinates(self):
        with pytest.raises(EventRangeError):
            EventStream([0], [-1], [0], [1])

    def test_check_bounds_names_record(self):
        events = EventStream([0, 10], [0, 8], [0, 0], [1, 1])
        with pytest.raises(EventRangeError) as info:
            events.check_bounds(8, 8)
        assert info.value.index == 1

    def test_quantize_time_is_exact_on_lattice(self):
        assert quantize_time(0.5) == TIME_RESOLUTION // 2
        assert quantize_time(1.0) == TIME_RESOLUTION


class TestVoxelize:
    def test_matches_brute_force(self, rng):
        events = random_stream(rng, 1000, 16, 16)
        grid = voxelize(events, 16, 16, 7)
        assert grid.shape == (8, 16, 16)
        np.testing.assert_array_equal(grid.data, brute_force_voxelize(events, 16, 16, 7))

    def test_mass_equals_polarity_sum(self, rng):
        events = random_stream(rng, 500, 8, 8)
        assert voxelize(events, 8, 8, 5).total_mass() == events.p.sum()

    def test_end_of_interval_lands_on_last_bin(self):
        grid = voxelize(EventStream.from_records([(1.0, 2, 3, 1)]), 4, 4, 3).data
        assert grid[3, 3, 2] == 1.0
        assert grid.sum() == 1.0

    def test_midpoint_splits_between_bins(self):
        grid = voxelize(EventStream.from_records([(0.25, 0, 0, -1)]), 1, 1, 2).data
        np.testing.assert_array_equal(grid[:, 0, 0], [-0.5, -0.5, 0.0])

    def test_empty_stream_gives_zero_grid(self):
        grid = voxelize(EventStream.empty(), 4, 5, 3)
        assert grid.shape == (4, 4, 5)
        assert not grid.data.any()

    def test_out_of_bounds_event_raises(self):
        with pytest.raises(EventRangeError):
            voxelize(EventStream.from_records([(0.1, 9, 0, 1)]), 4, 4, 3)

    def test_zero_segments_is_config_error(self):
        with pytest.raises(ConfigError):
            voxelize(EventStream.empty(), 4, 4, 0)

    def test_voxel_grid_rejects_non_finite(self):
        with pytest.raises(ValueError):
            VoxelGrid(np.full((3, 2, 2), np.nan))


class TestSegments:
    def test_slice_pairs_adjacent_bins(self, rng):
        grid = voxelize(random_stream(rng, 200, 6, 6), 6, 6, 4)
        stack = slice_segments(grid)
        assert len(stack) == 4
        assert stack.segments.shape == (4, 2, 6, 6)
        for m in range(4):
            np.testing.assert_array_equal(stack.segments[m], grid.data[m:m + 2])
        np.testing.assert_allclose(stack.center_timestamps, [0.2, 0.4, 0.6, 0.8])

    def test_split_segments_matches_slice(self, rng):
        grid = voxelize(random_stream(rng, 200, 6, 6), 6, 6, 3)
        batched = split_segments(torch.from_numpy(grid.data).unsqueeze(0))
        assert batched.shape == (1, 3, 2, 6, 6)
        np.testing.assert_array_equal(batched[0].numpy(), slice_segments(grid).segments)


class TestReversal:
    @given(streams())
    @settings(max_examples=60, deadline=None)
    def test_reverse_is_involution(self, events):
        assert reverse(reverse(events)) == events

    @given(streams())
    @settings(max_examples=60, deadline=None)
    def test_voxel_reversal_matches_stream_reversal(self, events):
        forward = voxelize(events, 8, 8, 5)
        np.testing.assert_array_equal(voxelize(reverse(events), 8, 8, 5).data, reverse_voxel(forward).data)

    def test_reverse_negates_polarity(self):
        events = reverse(EventStream.from_records([(0.25, 1, 2, 1)]))
        assert events.records() == [EventRecord(0.75, 1, 2, -1)]

    def test_tensor_reversal(self):
        voxel = torch.arange(12.0).reshape(1, 3, 2, 2)
        out = reverse_voxel(voxel)
        assert torch.equal(out[0, 0], -voxel[0, 2])


class TestSimulator:
    def test_static_frames_emit_nothing(self):
        frames = [np.full((4, 4), 0.5)] * 3
        assert len(simulate_events(frames)) == 0

    def test_brightening_emits_positive_events(self):
        frames = [np.full((2, 2), 0.2), np.full((2, 2), 0.8)]
        events = simulate_events(frames, threshold=0.2)
        expected = int(np.floor((np.log(0.801) - np.log(0.201)) / 0.2 + 1e-9))
        assert len(events) == 4 * expected
        assert set(events.p) == {1}
        assert np.all(np.diff(events.t) >= 0)

    def test_darkening_emits_negative_events(self):
        frames = [np.full((2, 2, 3), 0.9), np.full((2, 2, 3), 0.1)]
        events = simulate_events(frames)
        assert len(events) > 0
        assert set(events.p) == {-1}

    def test_moving_square_produces_events(self, square_frames):
        events = simulate_events(square_frames)
        assert len(events) > 0
        events.check_bounds(32, 32)

    def test_two_thresholds_emit_two_events_per_pixel(self):
        threshold, log_eps = 0.15, 1e-3
        low = 0.2
        high = (low + log_eps) * np.exp(2 * threshold) - log_eps
        events = simulate_events([np.full((3, 4), low), np.full((3, 4), high)], threshold, log_eps)
        assert len(events) == 2 * 12
        assert set(events.p) == {1}
        for x in range(4):
            for y in range(3):
                at = (events.x == x) & (events.y == y)
                assert sorted(events.ticks[at]) == [524288, 1048576]

    def test_moving_square_edges_have_opposite_polarity(self):
        frames = [np.full((4, 8), 0.1), np.full((4, 8), 0.1)]
        frames[0][:, 2:5] = 0.9
        frames[1][:, 3:6] = 0.9
        events = simulate_events(frames)
        assert set(events.x) == {2, 5}
        assert set(events.p[events.x == 5]) == {1}
        assert set(events.p[events.x == 2]) == {-1}

    def test_simulation_is_deterministic(self, square_frames):
        assert simulate_events(square_frames) == simulate_events(square_frames)

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            simulate_events([np.zeros((2, 2))])

    def test_non_positive_threshold(self):
        with pytest.raises(ConfigError):
            simulate_events([np.zeros((2, 2))] * 2, threshold=0)


class TestPersistence:
    def test_csv_round_trip_is_exact(self, rng, tmp_path):
        events = random_stream(rng, 300, 10, 12)
        path = write_events_csv(events, tmp_path / 'events.csv')
        assert read_events_csv(path) == events

    def test_missing_csv(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_events_csv(tmp_path / 'missing.csv')

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("t,x,y\n0.5,1,1\n")
        with pytest.raises(ValueError):
            read_events_csv(path)

    def test_voxel_container_round_trip(self, rng, tmp_path):
        grid = voxelize(random_stream(rng, 100, 5, 7), 5, 7, 3)
        loaded = load_voxel(save_voxel(grid, tmp_path / 'grid.evox'))
        assert loaded.shape == (4, 5, 7)
        np.testing.assert_array_equal(loaded.data, grid.data.astype(np.float32))

    def test_voxel_container_header(self, tmp_path):
        path = tmp_path / 'bad.evox'
        path.write_bytes(b"NOTVOXEL 1 1 1\n\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            load_voxel(path)


class TestDownsample:
    def test_bin_count_is_kept(self, rng):
        grid = voxelize(random_stream(rng, 200, 16, 16), 16, 16, 3)
        small = downsample_voxel(grid, 4)
        assert small.shape == (4, 4, 4)

    def test_voxelize_clip_pair(self, rng):
        events = random_stream(rng, 200, 16, 16)
        forward, backward = voxelize_clip(events, (16, 16), 3, scale=2)
        assert forward.shape == (4, 8, 8)
        np.testing.assert_array_equal(backward.data, -forward.data[::-1])
