"""Tests for clip sampling, augmentation, batching and file I/O."""

import numpy as np
import pytest
import torch

from src.data import (AugmentParams, ClipDataset, ClipIndex, TrainingSample, apply_augment, augment,
                      collate, draw_augment_params, geometric_transform, iter_clip_starts,
                      load_checkpoint, load_frames, load_sequences, moving_square_sequence,
                      quantize_frame, rotate_flip, sample_clip, sample_seed, save_checkpoint,
                      save_prediction)
from src.events import VoxelGrid, reverse_voxel


def marker_sample(size=6, s=2, y=1, x=4):
    """Sample whose LR frames, voxels and GT all carry one marker at the same scene point."""
    lr = np.zeros((2, size, size, 3))
    lr[:, y, x] = 1.0
    voxel = np.zeros((4, size, size))
    voxel[:, y, x] = 1.0
    gt = np.zeros((2, size * s, size * s, 3))
    gt[:, y * s:(y + 1) * s, x * s:(x + 1) * s] = 1.0
    return TrainingSample(lr_pair=lr, voxel_fwd=VoxelGrid(voxel), voxel_bwd=reverse_voxel(VoxelGrid(voxel)),
                          gt=gt, scales=(float(s), 1))


class TestSampleClip:
    def test_shapes(self, square_frames):
        sample = sample_clip(square_frames, t=8, s=2, num_segments=3)
        assert sample.lr_pair.shape == (2, 16, 16, 3)
        assert sample.voxel_fwd.shape == (4, 16, 16)
        assert sample.gt.shape == (9, 32, 32, 3)
        assert sample.scales == (2, 8)

    def test_backward_voxel_is_reversed(self, square_frames):
        sample = sample_clip(square_frames, t=8, s=2, num_segments=3)
        np.testing.assert_array_equal(sample.voxel_bwd.data, -sample.voxel_fwd.data[::-1])

    def test_identity_scale_keeps_endpoints(self, square_frames):
        sample = sample_clip(square_frames, t=4, s=1, start=2, num_segments=3)
        np.testing.assert_array_equal(sample.lr_pair, square_frames[[2, 6]])
        np.testing.assert_array_equal(sample.gt, square_frames[2:7])

    def test_stride_skips_frames(self, square_frames):
        sample = sample_clip(square_frames, t=2, s=1, start=1, num_segments=3, stride=3)
        np.testing.assert_array_equal(sample.gt, square_frames[[1, 4, 7]])

    def test_short_sequence_raises_index_error(self, square_frames):
        with pytest.raises(IndexError):
            sample_clip(square_frames, t=8, s=2, start=1)

    def test_invalid_scales(self, square_frames):
        with pytest.raises(ValueError):
            sample_clip(square_frames, t=0, s=2)
        with pytest.raises(ValueError):
            sample_clip(square_frames, t=2, s=0.5)

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            TrainingSample(lr_pair=np.zeros((3, 4, 4, 3)), voxel_fwd=VoxelGrid(np.zeros((4, 4, 4))),
                           voxel_bwd=VoxelGrid(np.zeros((4, 4, 4))), gt=np.zeros((2, 8, 8, 3)), scales=(2.0, 1))
        with pytest.raises(ValueError):
            TrainingSample(lr_pair=np.zeros((2, 4, 4, 3)), voxel_fwd=VoxelGrid(np.zeros((4, 5, 4))),
                           voxel_bwd=VoxelGrid(np.zeros((4, 5, 4))), gt=np.zeros((2, 8, 8, 3)), scales=(2.0, 1))

    def test_clip_index_check(self):
        ClipIndex(0, 0).check(9, 8)
        with pytest.raises(IndexError):
            ClipIndex(0, 1).check(9, 8)


class TestAugment:
    @pytest.mark.parametrize('rotations', [0, 1, 2, 3])
    @pytest.mark.parametrize('flip', [False, True])
    def test_marker_stays_aligned(self, rotations, flip):
        sample = marker_sample()
        out = apply_augment(sample, AugmentParams(y0=0, x0=2, crop=4, rotations=rotations, flip=flip))
        assert out.lr_pair.shape == (2, 4, 4, 3)
        assert out.gt.shape == (2, 8, 8, 3)
        (ly,), (lx,) = np.nonzero(out.lr_pair[0, ..., 0])
        vy, vx = np.nonzero(out.voxel_fwd.data[0])
        assert (vy[0], vx[0]) == (ly, lx)
        gy, gx = np.nonzero(out.gt[0, ..., 0])
        assert (gy.min(), gx.min()) == (2 * ly, 2 * lx)
        assert len(gy) == 4

    def test_backward_voxel_follows_forward(self):
        out = augment(marker_sample(), rng_seed=7, crop=4)
        np.testing.assert_array_equal(out.voxel_bwd.data, -out.voxel_fwd.data[::-1])

    def test_full_crop_equals_geometric_transform(self):
        sample = marker_sample()
        cropped = apply_augment(sample, AugmentParams(0, 0, 6, 3, True))
        whole = geometric_transform(sample, 3, True)
        np.testing.assert_array_equal(cropped.gt, whole.gt)
        np.testing.assert_array_equal(cropped.voxel_fwd.data, whole.voxel_fwd.data)

    def test_params_are_seeded(self):
        sample = marker_sample()
        assert draw_augment_params(sample, 3, crop=4) == draw_augment_params(sample, 3, crop=4)

    def test_half_integer_scale_offsets_on_lattice(self):
        lr = np.zeros((2, 12, 12, 3))
        sample = TrainingSample(lr_pair=lr, voxel_fwd=VoxelGrid(np.zeros((4, 12, 12))),
                                voxel_bwd=VoxelGrid(np.zeros((4, 12, 12))), gt=np.zeros((2, 18, 18, 3)),
                                scales=(1.5, 1))
        for seed in range(20):
            params = draw_augment_params(sample, seed, crop=4)
            assert params.y0 % 2 == 0 and params.x0 % 2 == 0

    def test_crop_larger_than_frame(self):
        with pytest.raises(ValueError):
            draw_augment_params(marker_sample(), 0, crop=8)

    def test_rotate_flip_inverse(self, rng):
        array = rng.random((2, 5, 5, 3))
        turned = rotate_flip(array, 1, False, (1, 2))
        np.testing.assert_array_equal(rotate_flip(turned, 3, False, (1, 2)), array)


class TestBatching:
    def test_collate_layout(self, square_frames):
        samples = [sample_clip(square_frames, t=4, s=2, start=i, num_segments=3) for i in (0, 2)]
        batch = collate(samples)
        assert batch['lr'].shape == (2, 2, 3, 16, 16)
        assert batch['voxel_fwd'].shape == (2, 4, 16, 16)
        assert batch['gt'].shape == (2, 5, 3, 32, 32)
        assert batch['gt'].dtype == torch.float32
        np.testing.assert_allclose(batch['gt'][1, 0, 0].numpy(), square_frames[2, ..., 0], atol=1e-7)

    def test_sample_seed_is_deterministic(self):
        assert sample_seed(1, 2, 3) == sample_seed(1, 2, 3)
        assert sample_seed(1, 2, 3) != sample_seed(1, 2, 4)

    def test_dataset_is_reproducible(self, square_frames):
        dataset = ClipDataset([square_frames], num_segments=3, t=4, crop=8, seed=5)
        assert len(dataset) == 5
        first = dataset.batch(1, 0, 2, 2.0)
        again = ClipDataset([square_frames], num_segments=3, t=4, crop=8, seed=5).batch(1, 0, 2, 2.0)
        for key in first:
            assert torch.equal(first[key], again[key])
        assert first['lr'].shape == (2, 2, 3, 8, 8)
        assert first['gt'].shape == (2, 5, 3, 16, 16)

    def test_threaded_batch_matches_inline(self, square_frames):
        inline = ClipDataset([square_frames], num_segments=3, t=4, crop=8, seed=5).batch(0, 3, 3, 2.0)
        threaded = ClipDataset([square_frames], num_segments=3, t=4, crop=8, seed=5, workers=2).batch(0, 3, 3, 2.0)
        for key in inline:
            assert torch.equal(inline[key], threaded[key])

    def test_hold_out_leaves_training_pool(self, square_frames):
        dataset = ClipDataset([square_frames], num_segments=3, t=4, crop=8, seed=5)
        held_out = dataset.hold_out()
        assert held_out.start == 4
        assert len(dataset) == 4
        assert held_out not in dataset.clips

    def test_hold_out_needs_two_clips(self, square_frames):
        dataset = ClipDataset([square_frames], num_segments=3, t=8)
        with pytest.raises(ValueError):
            dataset.hold_out()

    def test_dataset_needs_long_sequences(self, square_frames):
        with pytest.raises(ValueError):
            ClipDataset([square_frames[:3]], num_segments=3, t=4)

    def test_clip_starts(self):
        assert list(iter_clip_starts(17, 8)) == [0, 8]
        assert list(iter_clip_starts(9, 8)) == [0]
        assert list(iter_clip_starts(8, 8)) == []


class TestFiles:
    def test_moving_square(self):
        frames = moving_square_sequence(num_frames=5, height=24, width=40, square=6)
        assert frames.shape == (5, 24, 40, 3)
        assert frames.min() >= 0 and frames.max() <= 1
        assert not np.array_equal(frames[0], frames[1])

    def test_prediction_round_trip(self, rng, tmp_path):
        frames = rng.random((3, 6, 7, 3))
        paths = save_prediction(frames, tmp_path / 'pred')
        assert [p.name for p in paths] == ['frame_0000.png', 'frame_0001.png', 'frame_0002.png']
        loaded = load_frames(tmp_path / 'pred')
        assert loaded.shape == (3, 6, 7, 3)
        np.testing.assert_allclose(loaded, np.stack([quantize_frame(f) for f in frames]) / 255.0, atol=1e-6)

    def test_prediction_from_tensor(self, tmp_path):
        paths = save_prediction(torch.full((2, 3, 4, 5), 2.0), tmp_path / 'pred', prefix='x')
        assert paths[0].name == 'x_0000.png'
        np.testing.assert_allclose(load_frames(tmp_path / 'pred'), 1.0, atol=1e-6)

    def test_missing_frames_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_frames(tmp_path / 'nowhere')
        (tmp_path / 'empty').mkdir()
        with pytest.raises(FileNotFoundError):
            load_frames(tmp_path / 'empty')

    def test_load_sequences_from_subdirectories(self, rng, tmp_path):
        save_prediction(rng.random((3, 4, 4, 3)), tmp_path / 'a')
        save_prediction(rng.random((2, 4, 4, 3)), tmp_path / 'b')
        sequences = load_sequences(tmp_path)
        assert [len(s) for s in sequences] == [3, 2]
        assert len(load_sequences(tmp_path / 'a')) == 1

    def test_checkpoint_round_trip(self, tmp_path):
        model = torch.nn.Linear(3, 2)
        path = save_checkpoint(tmp_path / 'ckpt.pt', model, settings={'data.t': 4}, stage=2, step=5,
                               best_psnr=31.5)
        payload = load_checkpoint(path)
        assert payload['stage'] == 2 and payload['step'] == 5
        assert payload['settings'] == {'data.t': 4}
        assert payload['best_psnr'] == 31.5
        restored = torch.nn.Linear(3, 2)
        restored.load_state_dict(payload['model'])
        assert torch.equal(restored.weight, model.weight)

    def test_checkpoint_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / 'missing.pt')
        torch.save({'format_version': 99}, tmp_path / 'old.pt')
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / 'old.pt')
