"""Tests for the metrics log and evaluation reports."""

import json
import math

import pandas as pd

from src.evaluation import MetricReport
from src.report import MetricsLog, ReportGenerator


def sample_reports():
    return [
        MetricReport(psnr=[30.0, 28.0, 32.0], ssim=[0.9, 0.8, 0.95], name='clip_a'),
        MetricReport(psnr=[25.0, 27.0, 29.0], ssim=[0.7, 0.75, 0.8], name='clip_b'),
    ]


class TestMetricsLog:
    def test_write_and_read(self, tmp_path):
        log = MetricsLog(tmp_path)
        log.write('train', step=1, loss=0.5)
        log.write('val', step=1, psnr=31.0)
        assert [r['kind'] for r in log.read()] == ['train', 'val']
        assert log.read('val') == [{'kind': 'val', 'psnr': 31.0, 'step': 1}]

    def test_non_finite_values_become_null(self, tmp_path):
        log = MetricsLog(tmp_path)
        log.write('eval', psnr=math.inf, ssim=math.nan)
        line = (tmp_path / 'metrics.jsonl').read_text().strip()
        assert json.loads(line) == {'kind': 'eval', 'psnr': None, 'ssim': None}

    def test_missing_log_reads_empty(self, tmp_path):
        assert MetricsLog(tmp_path / 'none').read() == []


class TestReportGenerator:
    def test_summary_table_has_mean_row(self):
        table = ReportGenerator.summary_table(sample_reports())
        assert table['sequence'].tolist() == ['clip_a', 'clip_b', 'mean']
        mean = table.iloc[-1]
        assert mean['frames'] == 6
        assert mean['average_psnr'] == 28.5

    def test_generate_all_reports(self, tmp_path):
        files = ReportGenerator(tmp_path).generate_all_reports(sample_reports(), {'s': 4, 't': 8})
        assert set(files) == {'frame_metrics', 'summary', 'html_report', 'text_summary'}
        frames = pd.read_csv(files['frame_metrics'])
        assert len(frames) == 6
        html = files['html_report'].read_text(encoding='utf-8')
        assert 'clip_b' in html and 'Center PSNR-Y' in html
        text = files['text_summary'].read_text(encoding='utf-8')
        assert 'Sequences Evaluated: 2' in text
        assert 's: 4' in text

    def test_nan_ssim_renders(self, tmp_path):
        report = MetricReport(psnr=[20.0, 21.0], ssim=[math.nan, math.nan], name='tiny')
        files = ReportGenerator(tmp_path).generate_all_reports([report])
        assert 'nan' in files['html_report'].read_text(encoding='utf-8')

    def test_empty_reports(self, tmp_path):
        generator = ReportGenerator(tmp_path)
        assert generator.create_summary_text([], {}) == "No sequences evaluated."
        assert generator.frame_table([]).empty
