"""End-to-end tests of the command-line entry point."""

import numpy as np
import pandas as pd
import pytest

from src.data import load_frames, moving_square_sequence, save_checkpoint, save_prediction
from src.main import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, parse_times, run
from src.model import build_model


@pytest.fixture
def lr_dir(tmp_path):
    frames = moving_square_sequence(num_frames=3, height=8, width=8, square=4, step=1)
    save_prediction(frames, tmp_path / 'lr')
    return tmp_path / 'lr'


@pytest.fixture
def checkpoint(tmp_path, toy_settings):
    model = build_model(toy_settings)
    return save_checkpoint(tmp_path / 'toy.pt', model, settings=toy_settings.to_dict())


class TestParser:
    def test_help_lists_config_keys(self, capsys):
        assert run(['--help']) == EXIT_OK
        out = capsys.readouterr().out
        assert 'model.channels' in out
        assert 'livt.local_grid' in out

    def test_unknown_command(self):
        assert run(['bogus']) == EXIT_VALIDATION

    def test_missing_command(self):
        assert run([]) == EXIT_VALIDATION

    def test_missing_required_flag(self, lr_dir):
        assert run(['infer', '--frames-dir', str(lr_dir)]) == EXIT_VALIDATION

    def test_parse_times(self):
        assert parse_times('0, 0.5,1') == [0.0, 0.5, 1.0]
        for bad in ('', 'a,b', '0.2,1.5'):
            with pytest.raises(ValueError):
                parse_times(bad)


class TestSimulate:
    def test_writes_event_files(self, tmp_path, lr_dir):
        out = tmp_path / 'sim'
        assert run(['simulate', '--frames-dir', str(lr_dir), '--out', str(out)]) == EXIT_OK
        events = pd.read_csv(out / 'events.csv')
        assert list(events.columns) == ['t', 'x', 'y', 'p']
        assert len(events) > 0
        assert (out / 'voxel_fwd.evox').is_file()

    def test_default_output_dir(self, lr_dir, isolated_output):
        assert run(['simulate', '--frames-dir', str(lr_dir)]) == EXIT_OK
        assert (isolated_output / 'simulate' / 'events.csv').is_file()
        assert (isolated_output / 'logs' / 'app.log').is_file()

    def test_missing_frames(self, tmp_path):
        assert run(['simulate', '--frames-dir', str(tmp_path / 'none')]) == EXIT_VALIDATION

    def test_invalid_override(self, lr_dir):
        assert run(['simulate', '--frames-dir', str(lr_dir), 'model.channels=wide']) == EXIT_VALIDATION
        assert run(['simulate', '--frames-dir', str(lr_dir), 'model.width=3']) == EXIT_VALIDATION

    def test_inconsistent_settings(self, lr_dir):
        assert run(['simulate', '--frames-dir', str(lr_dir), 'livt.local_grid=[3,2,3]']) == EXIT_VALIDATION


class TestInfer:
    def test_uniform_scales(self, tmp_path, lr_dir, checkpoint):
        out = tmp_path / 'pred'
        code = run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                    '--s', '4', '--t', '8', '--out', str(out)])
        assert code == EXIT_OK
        frames = load_frames(out)
        assert frames.shape == (9, 32, 32, 3)

    def test_repeatable(self, tmp_path, lr_dir, checkpoint):
        for name in ('a', 'b'):
            assert run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                        '--s', '2', '--t', '2', '--out', str(tmp_path / name)]) == EXIT_OK
        np.testing.assert_array_equal(load_frames(tmp_path / 'a'), load_frames(tmp_path / 'b'))

    def test_explicit_times(self, tmp_path, lr_dir, checkpoint):
        out = tmp_path / 'times'
        code = run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                    '--s', '1.5', '--times', '0,0.25,1', '--out', str(out)])
        assert code == EXIT_OK
        assert load_frames(out).shape == (3, 12, 12, 3)

    def test_times_out_of_range(self, tmp_path, lr_dir, checkpoint):
        code = run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                    '--times', '0,1.5', '--out', str(tmp_path / 'bad')])
        assert code == EXIT_VALIDATION

    def test_event_csv_input(self, tmp_path, lr_dir, checkpoint):
        assert run(['simulate', '--frames-dir', str(lr_dir), '--out', str(tmp_path / 'sim')]) == EXIT_OK
        out = tmp_path / 'pred'
        code = run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                    '--events', str(tmp_path / 'sim' / 'events.csv'), '--s', '2', '--t', '2', '--out', str(out)])
        assert code == EXIT_OK
        assert load_frames(out).shape == (3, 16, 16, 3)

    def test_missing_checkpoint(self, tmp_path, lr_dir):
        code = run(['infer', '--checkpoint', str(tmp_path / 'none.pt'), '--frames-dir', str(lr_dir)])
        assert code == EXIT_VALIDATION

    def test_checkpoint_settings_mismatch(self, tmp_path, lr_dir, checkpoint):
        code = run(['infer', '--checkpoint', str(checkpoint), '--frames-dir', str(lr_dir),
                    '--out', str(tmp_path / 'pred'), 'model.channels=12'])
        assert code == EXIT_VALIDATION


class TestEval:
    def test_reports(self, tmp_path, checkpoint):
        gt = moving_square_sequence(num_frames=3, height=16, width=16, square=6, step=1)
        save_prediction(gt, tmp_path / 'gt')
        out = tmp_path / 'eval'
        code = run(['eval', '--checkpoint', str(checkpoint), '--gt-dir', str(tmp_path / 'gt'),
                    '--s', '2', '--t', '2', '--out', str(out)])
        assert code == EXIT_OK
        for name in ('frame_metrics.csv', 'summary.csv', 'metrics_report.html', 'summary.txt', 'metrics.jsonl'):
            assert (out / name).is_file()
        frames = pd.read_csv(out / 'frame_metrics.csv')
        assert len(frames) == 3

    def test_too_few_frames(self, tmp_path, checkpoint):
        save_prediction(moving_square_sequence(num_frames=2, height=16, width=16, square=6), tmp_path / 'gt')
        code = run(['eval', '--checkpoint', str(checkpoint), '--gt-dir', str(tmp_path / 'gt'),
                    '--s', '2', '--t', '2', '--out', str(tmp_path / 'eval')])
        assert code == EXIT_VALIDATION


class TestProfile:
    def test_writes_diagnostics(self, tmp_path):
        frames = moving_square_sequence(num_frames=3, height=8, width=8, square=4, step=1)
        save_prediction(frames, tmp_path / 'pred')
        save_prediction(np.clip(frames + 0.05, 0, 1), tmp_path / 'gt')
        out = tmp_path / 'profile'
        code = run(['profile', '--frames-dir', str(tmp_path / 'pred'), '--gt-dir', str(tmp_path / 'gt'),
                    '--row', '2', '--col', '3', '--out', str(out)])
        assert code == EXIT_OK
        names = sorted(p.name for p in out.glob('*.png'))
        assert names == ['diff_0000.png', 'diff_0001.png', 'diff_0002.png',
                         'profile_col0003_gt.png', 'profile_col0003_pred.png',
                         'profile_row0002_gt.png', 'profile_row0002_pred.png']

    def test_shape_mismatch(self, tmp_path):
        save_prediction(moving_square_sequence(num_frames=3, height=8, width=8, square=4), tmp_path / 'pred')
        save_prediction(moving_square_sequence(num_frames=2, height=8, width=8, square=4), tmp_path / 'gt')
        code = run(['profile', '--frames-dir', str(tmp_path / 'pred'), '--gt-dir', str(tmp_path / 'gt'),
                    '--out', str(tmp_path / 'profile')])
        assert code == EXIT_VALIDATION


class TestTrain:
    def test_synthetic_smoke_run(self, tmp_path):
        out = tmp_path / 'train'
        code = run(['train', '--preset', 'toy', '--out', str(out), 'model.frame_blocks=1', 'model.event_blocks=1',
                    'livt.mlp_hidden=[16,16]', 'data.t=2', 'data.crop=8', 'data.batch_size=1',
                    'train.stage1_iters=1', 'train.stage2_iters=1', 'train.stage1_scale=2'])
        assert code == EXIT_OK
        assert (out / 'final.pt').is_file()
        assert (out / 'best.pt').is_file()
        assert (out / 'metrics.jsonl').is_file()

    def test_resume_from_missing_checkpoint(self, tmp_path):
        code = run(['train', '--preset', 'toy', '--checkpoint', str(tmp_path / 'none.pt'),
                    '--out', str(tmp_path / 'train'), 'data.t=2', 'data.crop=8',
                    'train.stage1_iters=1', 'train.stage2_iters=1'])
        assert code == EXIT_VALIDATION


class TestSelftest:
    def test_subset_passes(self):
        assert run(['selftest', '--checks', 'encoding,training,selection']) == EXIT_OK

    def test_no_matching_checks_fails(self):
        assert run(['selftest', '--checks', 'nothing']) == EXIT_RUNTIME
