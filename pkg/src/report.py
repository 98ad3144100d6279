"""
Report generation module for the space-time enhancer.
Creates CSV, text and HTML reports from evaluation metrics, and the
line-delimited metrics log written during training.
"""

import json
import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape

from .config import config
from .evaluation import MetricReport

logger = logging.getLogger(__name__)


def _finite(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsLog:
    """Appends one JSON object per line to ``metrics.jsonl``."""

    def __init__(self, out_dir: Path, filename: str = 'metrics.jsonl'):
        self.path = Path(out_dir) / filename
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, kind: str, **fields: Any) -> None:
        record = {'kind': kind, **{k: _finite(v) for k, v in fields.items()}}
        with self.path.open('a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open('r', encoding='utf-8') as f:
            records = [json.loads(line) for line in f if line.strip()]
        return [r for r in records if kind is None or r.get('kind') == kind]


class ReportGenerator:
    """Handles generation of CSV, text and HTML evaluation reports."""

    def __init__(self, out_dir: Optional[Path] = None):
        self.out_dir = Path(out_dir) if out_dir is not None else config.output_dir
        self.jinja_env = Environment(
            loader=FileSystemLoader(config.templates_dir),
            autoescape=select_autoescape(['html', 'xml'])
        )

    @staticmethod
    def frame_table(reports: Sequence[MetricReport]) -> pd.DataFrame:
        if not reports:
            return pd.DataFrame(columns=['sequence', 'frame', 'psnr_y', 'ssim_y', 'center'])
        return pd.concat([r.to_frame() for r in reports], ignore_index=True)

    @staticmethod
    def summary_table(reports: Sequence[MetricReport]) -> pd.DataFrame:
        rows = [r.summary() for r in reports]
        if rows:
            rows.append({
                'sequence': 'mean',
                'frames': sum(r['frames'] for r in rows),
                'center_psnr': float(pd.Series([r['center_psnr'] for r in rows]).mean()),
                'center_ssim': float(pd.Series([r['center_ssim'] for r in rows]).mean()),
                'average_psnr': float(pd.Series([r['average_psnr'] for r in rows]).mean()),
                'average_ssim': float(pd.Series([r['average_ssim'] for r in rows]).mean()),
            })
        return pd.DataFrame(rows)

    def save_csv_reports(self, reports: Sequence[MetricReport]) -> Dict[str, Path]:
        """
        Save CSV reports to the output directory.

        Args:
            reports: One MetricReport per evaluated sequence

        Returns:
            Dictionary with paths to saved files
        """
        saved_files = {}
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            frame_path = self.out_dir / 'frame_metrics.csv'
            self.frame_table(reports).to_csv(frame_path, index=False)
            saved_files['frame_metrics'] = frame_path
            logger.info(f"Saved frame metrics CSV: {frame_path}")

            summary_path = self.out_dir / 'summary.csv'
            self.summary_table(reports).to_csv(summary_path, index=False)
            saved_files['summary'] = summary_path
            logger.info(f"Saved summary CSV: {summary_path}")
        except Exception as e:
            logger.error(f"Error saving CSV reports: {e}")
            raise
        return saved_files

    def generate_html_report(self, reports: Sequence[MetricReport], run_info: Dict[str, Any]) -> Path:
        """
        Generate HTML report using Jinja2 template.

        Args:
            reports: One MetricReport per evaluated sequence
            run_info: Scales, checkpoint and other run details

        Returns:
            Path to generated HTML file
        """
        try:
            template = self.jinja_env.get_template('report.html')
            now = datetime.now()
            context = {
                'report_date': now.strftime('%Y-%m-%d'),
                'report_time': now.strftime('%H:%M:%S'),
                'summary': self.summary_table(reports).to_dict('records'),
                'frames': self.frame_table(reports).to_dict('records'),
                'run_info': run_info,
            }
            html_content = template.render(**context)

            html_path = self.out_dir / 'metrics_report.html'
            with open(html_path, 'w', encoding='utf-8') as f:
                f.write(html_content)
            logger.info(f"Generated HTML report: {html_path}")
            return html_path
        except Exception as e:
            logger.error(f"Error generating HTML report: {e}")
            raise

    def create_summary_text(self, reports: Sequence[MetricReport], run_info: Dict[str, Any]) -> str:
        """
        Create a text summary of the evaluation.

        Returns:
            Text summary string
        """
        if not reports:
            return "No sequences evaluated."

        summary = self.summary_table(reports)
        overall = summary.iloc[-1]
        summary_lines = [
            "Space-Time Enhancement Evaluation Summary",
            "=" * 40,
        ]
        summary_lines += [f"{key}: {value}" for key, value in run_info.items()]
        summary_lines += [
            "",
            f"Sequences Evaluated: {len(reports)}",
            f"  Center  PSNR-Y: {overall['center_psnr']:.2f} dB   SSIM-Y: {overall['center_ssim']:.4f}",
            f"  Average PSNR-Y: {overall['average_psnr']:.2f} dB   SSIM-Y: {overall['average_ssim']:.4f}",
            "",
            "Per Sequence:",
        ]
        for report in reports:
            summary_lines.append(f"  {report.name}: {report.psnr_mean:.2f} dB / {report.ssim_mean:.4f}")
        return "\n".join(summary_lines)

    def save_summary_text(self, reports: Sequence[MetricReport], run_info: Dict[str, Any]) -> Path:
        """Save text summary to file."""
        try:
            summary_path = self.out_dir / 'summary.txt'
            with open(summary_path, 'w', encoding='utf-8') as f:
                f.write(self.create_summary_text(reports, run_info))
            logger.info(f"Saved text summary: {summary_path}")
            return summary_path
        except Exception as e:
            logger.error(f"Error saving text summary: {e}")
            raise

    def generate_all_reports(self, reports: Sequence[MetricReport],
                             run_info: Optional[Dict[str, Any]] = None) -> Dict[str, Path]:
        """
        Generate all report formats.

        Returns:
            Dictionary with paths to all generated files
        """
        logger.info("Generating all reports...")
        run_info = run_info or {}
        all_files = self.save_csv_reports(reports)
        all_files['html_report'] = self.generate_html_report(reports, run_info)
        all_files['text_summary'] = self.save_summary_text(reports, run_info)
        logger.info(f"Generated {len(all_files)} report files in {self.out_dir}")
        return all_files
