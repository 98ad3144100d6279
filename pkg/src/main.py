"""
Main orchestrator for the space-time enhancer.
Command-line entry point: simulate, train, infer, eval, profile, selftest.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import colorlog
import numpy as np
import torch

from .config import PRESETS, Settings, config, describe_keys
from .data import (iter_clip_starts, load_checkpoint, load_frames, load_sequences, moving_square_sequence,
                   sample_clip, save_prediction)
from .evaluation import SSIM_WINDOW, evaluate_sequence, save_diagnostics
from .events import read_events_csv, save_voxel, simulate_events, voxelize, voxelize_clip, write_events_csv
from .model import build_model, count_parameters
from .report import MetricsLog, ReportGenerator
from .selftest import run_selftest
from .training import train
from .video_inr import QuerySpec

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_handlers: List[logging.Handler] = []


class UsageError(ValueError):
    """Invalid command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging():
    """Set up logging configuration with colors and file output."""

    # Ensure logs directory exists
    config.ensure_directories()

    console_formatter = colorlog.ColoredFormatter(
        '%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%H:%M:%S',
        log_colors={
            'DEBUG': 'cyan',
            'INFO': 'green',
            'WARNING': 'yellow',
            'ERROR': 'red',
            'CRITICAL': 'red,bg_white',
        }
    )

    file_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # Set up root logger; handlers from an earlier run in this process are replaced
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, config.log_level, logging.INFO))
    for handler in _handlers:
        root_logger.removeHandler(handler)
        handler.close()
    _handlers.clear()

    console_handler = colorlog.StreamHandler()
    console_handler.setFormatter(console_formatter)
    root_logger.addHandler(console_handler)
    _handlers.append(console_handler)

    log_file = config.logs_dir / 'app.log'
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setFormatter(file_formatter)
    root_logger.addHandler(file_handler)
    _handlers.append(file_handler)

    # Reduce noise from external libraries
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)


def print_banner():
    """Print application banner."""
    banner = """
    ╔══════════════════════════════════════════════════════════════╗
    ║                    Space-Time Enhancer                       ║
    ║        Event-guided continuous video super-resolution        ║
    ╚══════════════════════════════════════════════════════════════╝
    """
    print(banner)


def phase(logger: logging.Logger, title: str) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = _Parser(add_help=False)
    common.add_argument('--config', type=Path, help="JSON settings file (nested or flat keys)")
    common.add_argument('--preset', choices=sorted(PRESETS), help="settings preset applied before --config")
    common.add_argument('--seed', type=int, help=f"random seed (default: SEED env or {config.seed})")
    common.add_argument('--out', type=Path, help="output directory (default: OUTPUT_DIR/<command>)")
    common.add_argument('overrides', nargs='*', metavar='key=value', help="settings overrides")

    formatter = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog='enhancer', description="Event-guided continuous space-time video super-resolution.",
                     epilog=describe_keys(), formatter_class=formatter)
    commands = parser.add_subparsers(dest='command', metavar='command', parser_class=_Parser)
    commands.required = True

    def add(name, help_text):
        return commands.add_parser(name, parents=[common], help=help_text, description=help_text,
                                   epilog=describe_keys(), formatter_class=formatter)

    sim = add('simulate', "simulate an event CSV (and forward voxel grid) from a frame folder")
    sim.add_argument('--frames-dir', type=Path, required=True, help="folder of ordered PNG frames")

    tr = add('train', "two-stage training; writes checkpoints and metrics.jsonl")
    tr.add_argument('--frames-dir', type=Path, help="sequence folder or folder of sequence folders "
                                                     "(default: a synthetic moving square)")
    tr.add_argument('--checkpoint', type=Path, help="checkpoint to resume from")
    tr.add_argument('--val-dir', type=Path, help="validation sequences (default: hold out the last training clip)")

    inf = add('infer', "render frames at scales (s, t) or explicit timestamps from a checkpoint")
    inf.add_argument('--checkpoint', type=Path, required=True)
    inf.add_argument('--frames-dir', type=Path, required=True,
                     help="LR frames; the first and last are the endpoints")
    inf.add_argument('--events', type=Path, help="event CSV over the interval (default: simulated)")
    inf.add_argument('--s', type=float, default=4.0, help="spatial scale (default: 4)")
    inf.add_argument('--t', type=int, default=8, help="temporal scale (default: 8)")
    inf.add_argument('--times', type=str, help="comma-separated timestamps in [0, 1], overrides --t")

    ev = add('eval', "score a checkpoint against ground-truth sequences")
    ev.add_argument('--checkpoint', type=Path, required=True)
    ev.add_argument('--gt-dir', type=Path, required=True, help="HR sequence folder(s)")
    ev.add_argument('--events', type=Path, help="event CSV (single-clip evaluation only)")
    ev.add_argument('--s', type=float, default=4.0)
    ev.add_argument('--t', type=int, default=8)

    prof = add('profile', "temporal profiles and difference maps of predicted vs ground-truth frames")
    prof.add_argument('--frames-dir', type=Path, required=True, help="predicted frames")
    prof.add_argument('--gt-dir', type=Path, required=True, help="ground-truth frames")
    prof.add_argument('--row', type=int, action='append', default=[], help="profile row (repeatable)")
    prof.add_argument('--col', type=int, action='append', default=[], help="profile column (repeatable)")

    st = add('selftest', "run the oracle suite")
    st.add_argument('--checks', type=str, help="comma-separated subset of checks")
    return parser


def parse_times(text: str) -> List[float]:
    try:
        times = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise UsageError(f"--times: expected comma-separated numbers, got {text!r}") from None
    if not times:
        raise UsageError("--times: no timestamps given")
    bad = [v for v in times if not 0 <= v <= 1]
    if bad:
        raise UsageError(f"--times: {bad[0]} is outside [0, 1]")
    return times


def load_settings(args: argparse.Namespace, base: Optional[dict] = None) -> Settings:
    """Settings from a checkpoint table (if any), then --config and overrides."""
    settings = Settings.load(args.config, args.overrides, preset=args.preset, base=base)
    if args.seed is not None:
        settings.update({'train.seed': args.seed})
    issues = settings.validate()
    if issues:
        raise UsageError("invalid settings: " + "; ".join(issues))
    return settings


def _model_from_checkpoint(args, logger):
    payload = load_checkpoint(args.checkpoint)
    settings = load_settings(args, base=payload.get('settings'))
    model = build_model(settings)
    try:
        model.load_state_dict(payload['model'])
    except RuntimeError as e:
        raise ValueError(f"--checkpoint {args.checkpoint} does not match its settings: {e}") from None
    model.eval()
    for name, count in count_parameters(model).items():
        logger.info(f"  {name:<16} {count:>12,}")
    return model, settings


def _to_tensors(lr_pair: np.ndarray, voxel_fwd: np.ndarray, voxel_bwd: np.ndarray):
    lr = torch.from_numpy(np.ascontiguousarray(lr_pair)).permute(0, 3, 1, 2).unsqueeze(0).float()
    return lr, torch.from_numpy(voxel_fwd).unsqueeze(0).float(), torch.from_numpy(voxel_bwd).unsqueeze(0).float()


def cmd_simulate(args, settings, out_dir, logger) -> int:
    phase(logger, "PHASE 1: Simulating events")
    frames = load_frames(args.frames_dir)
    events = simulate_events(frames, threshold=settings['events.threshold'], log_eps=settings['events.log_eps'])
    logger.info(f"Simulated {len(events)} events from {len(frames)} frames")

    phase(logger, "PHASE 2: Writing event files")
    write_events_csv(events, out_dir / 'events.csv')
    voxel = voxelize(events, frames.shape[1], frames.shape[2], settings['model.num_segments'])
    save_voxel(voxel, out_dir / 'voxel_fwd.evox')
    return EXIT_OK


def cmd_train(args, settings, out_dir, logger) -> int:
    phase(logger, "PHASE 1: Loading sequences")
    if args.frames_dir is not None:
        sequences = load_sequences(args.frames_dir)
    else:
        logger.warning("No --frames-dir given, training on a synthetic moving-square sequence")
        sequences = [moving_square_sequence(num_frames=settings['data.t'] + 1)]
    val_sequences = load_sequences(args.val_dir) if args.val_dir is not None else []

    phase(logger, "PHASE 2: Training")
    result = train(settings, sequences, out_dir, resume=args.checkpoint, val_sequences=val_sequences)
    for name, path in result['checkpoints'].items():
        logger.info(f"  - {name}: {path}")
    return EXIT_OK


def cmd_infer(args, settings_unused, out_dir, logger) -> int:
    phase(logger, "PHASE 1: Loading model and inputs")
    model, settings = _model_from_checkpoint(args, logger)
    frames = load_frames(args.frames_dir)
    if len(frames) < 2:
        raise ValueError(f"--frames-dir {args.frames_dir} must hold at least 2 frames")
    if args.events is not None:
        events = read_events_csv(args.events)
    else:
        events = simulate_events(frames, threshold=settings['events.threshold'], log_eps=settings['events.log_eps'])
    voxel_fwd, voxel_bwd = voxelize_clip(events, frames.shape[1:3], settings['model.num_segments'])
    query = QuerySpec.explicit(args.s, parse_times(args.times)) if args.times else QuerySpec.uniform(args.s, args.t)

    phase(logger, "PHASE 2: Rendering")
    lr, fwd, bwd = _to_tensors(frames[[0, -1]], voxel_fwd.data, voxel_bwd.data)
    with torch.no_grad():
        pred = model(lr, fwd, query, bwd)[0].clamp(0, 1)
    saved = save_prediction(pred, out_dir)
    logger.info(f"Rendered {len(saved)} frames of {pred.shape[-1]}x{pred.shape[-2]} at s={args.s:g}")
    return EXIT_OK


def cmd_eval(args, settings_unused, out_dir, logger) -> int:
    phase(logger, "PHASE 1: Loading model and sequences")
    model, settings = _model_from_checkpoint(args, logger)
    sequences = load_sequences(args.gt_dir)
    events = read_events_csv(args.events) if args.events is not None else None
    metrics = MetricsLog(out_dir)

    phase(logger, "PHASE 2: Evaluating")
    reports = []
    for index, frames in enumerate(sequences):
        starts = list(iter_clip_starts(len(frames), args.t))
        if not starts:
            raise IndexError(f"--gt-dir sequence {index} has {len(frames)} frames, fewer than t + 1 = {args.t + 1}")
        if events is not None and len(starts) * len(sequences) > 1:
            raise ValueError("--events applies to a single clip; give exactly t + 1 ground-truth frames")
        for start in starts:
            sample = sample_clip(frames, args.t, args.s, start, num_segments=settings['model.num_segments'],
                                 events=events, threshold=settings['events.threshold'],
                                 log_eps=settings['events.log_eps'])
            lr, fwd, bwd = _to_tensors(sample.lr_pair, sample.voxel_fwd.data, sample.voxel_bwd.data)
            with torch.no_grad():
                pred = model(lr, fwd, QuerySpec.uniform(args.s, args.t), bwd)[0].clamp(0, 1)
            gt = sample.gt[:, :pred.shape[-2], :pred.shape[-1]]
            with_ssim = min(gt.shape[1:3]) >= SSIM_WINDOW
            if not with_ssim:
                logger.warning(f"Frames smaller than {SSIM_WINDOW}x{SSIM_WINDOW}, SSIM skipped")
            report = evaluate_sequence(pred, gt, name=f"seq{index:03d}_{start:04d}", with_ssim=with_ssim)
            metrics.write('eval', **report.summary())
            logger.info(f"{report.name}: Center {report.center_psnr:.2f} dB  Average {report.psnr_mean:.2f} dB")
            reports.append(report)

    phase(logger, "PHASE 3: Generating reports")
    run_info = {'checkpoint': str(args.checkpoint), 's': args.s, 't': args.t}
    ReportGenerator(out_dir).generate_all_reports(reports, run_info)
    return EXIT_OK


def cmd_profile(args, settings, out_dir, logger) -> int:
    phase(logger, "PHASE 1: Loading frames")
    pred = load_frames(args.frames_dir)
    gt = load_frames(args.gt_dir)
    if pred.shape != gt.shape:
        raise ValueError(f"--frames-dir {pred.shape} and --gt-dir {gt.shape} differ in shape")

    phase(logger, "PHASE 2: Writing diagnostics")
    save_diagnostics(pred, gt, out_dir, rows=args.row, cols=args.col)
    return EXIT_OK


def cmd_selftest(args, settings, out_dir, logger) -> int:
    phase(logger, "SELFTEST")
    checks = [c.strip() for c in args.checks.split(',')] if args.checks else None
    results = run_selftest(seed=args.seed if args.seed is not None else config.seed, checks=checks)
    failed = [r for r in results if not r.passed]
    logger.info(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if results and not failed else EXIT_RUNTIME


COMMANDS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'infer': cmd_infer,
    'eval': cmd_eval,
    'profile': cmd_profile,
    'selftest': cmd_selftest,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a validation error, 2 on a runtime failure
    """
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging()
    logger = logging.getLogger(__name__)
    start_time = datetime.now()

    try:
        issues = config.validate()
        if issues:
            for issue in issues:
                logger.error(f"  - {issue}")
            return EXIT_VALIDATION

        settings = load_settings(args)
        seed = args.seed if args.seed is not None else config.seed

        torch.manual_seed(seed)
        np.random.seed(seed % 2 ** 32)
        out_dir = args.out if args.out is not None else config.output_dir / args.command
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Starting {args.command} (seed {seed}, output {out_dir})")

        code = COMMANDS[args.command](args, settings, out_dir, logger)
        duration = datetime.now() - start_time
        logger.info(f"{args.command} finished in {duration.total_seconds():.1f} seconds")
        return code
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return EXIT_RUNTIME
    except (ValueError, TypeError, IndexError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME


def main():
    """Main application entry point."""
    print_banner()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
