"""
Space-Time Enhancer - event-guided continuous space-time video super-resolution.

This package provides functionality to:
- Simulate, voxelize and reverse event streams
- Encode frames and events, and synthesize per-segment features
- Render frames at arbitrary spatial scales and timestamps
- Train in two stages and evaluate with Y-channel PSNR/SSIM
- Generate reports and run an oracle-based self test

Main modules:
- config: Environment configuration and the settings table
- events: Event streams, voxel grids and the event simulator
- data: Clip sampling, augmentation, frame and checkpoint I/O
- encoders, synthesis, video_inr, model: The network
- training, evaluation, report: Optimization, metrics and reports
- selftest: Reference implementations and checks
- main: Command-line orchestrator
"""

__version__ = "1.0.0"
__author__ = "Space-Time Enhancer"
__description__ = "Event-guided continuous space-time video super-resolution"
