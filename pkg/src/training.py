"""
Two-stage training loop.

Stage 1 trains at a fixed spatial scale, stage 2 samples the scale from a
discrete set. Both stages run Adam with a cosine-annealed learning rate over
their own iteration budget and a Charbonnier loss.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import Settings
from .data import ClipDataset, TrainingSample, collate, load_checkpoint, save_checkpoint
from .evaluation import psnr_y
from .model import SpaceTimeEnhancer, build_model, count_parameters
from .report import MetricsLog
from .video_inr import QuerySpec

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization settings of a training run."""
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    betas: Tuple[float, float] = (0.9, 0.999)
    charbonnier_eps2: float = 1e-6
    stage1_scale: float = 4.0
    stage2_scales: Tuple[float, ...] = (1, 1.5, 2, 2.5, 3, 3.5, 4)
    t: int = 8
    batch_size: int = 2
    val_every: int = 200
    log_every: int = 10
    seed: int = 1234

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) must be smaller than lr_max ({self.lr_max})")
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("iteration budgets must be >= 1")
        if not self.stage2_scales:
            raise ValueError("stage-2 scale set is empty")

    @classmethod
    def from_settings(cls, settings: Settings) -> 'TrainConfig':
        return cls(
            stage1_iters=settings['train.stage1_iters'],
            stage2_iters=settings['train.stage2_iters'],
            lr_max=settings['train.lr_max'],
            lr_min=settings['train.lr_min'],
            betas=(settings['train.beta1'], settings['train.beta2']),
            charbonnier_eps2=settings['train.charbonnier_eps2'],
            stage1_scale=settings['train.stage1_scale'],
            stage2_scales=tuple(float(s) for s in settings['data.stage2_scales']),
            t=settings['data.t'],
            batch_size=settings['data.batch_size'],
            val_every=settings['train.val_every'],
            log_every=settings['train.log_every'],
            seed=settings['train.seed'],
        )

    def iters(self, stage: int) -> int:
        return self.stage1_iters if stage == 1 else self.stage2_iters


def charbonnier_loss(pred: torch.Tensor, gt: torch.Tensor, eps2: float = 1e-6) -> torch.Tensor:
    """Mean of sqrt((pred - gt)^2 + eps2)."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")
    return torch.sqrt((pred - gt) ** 2 + eps2).mean()


def lr_schedule(step: int, total: int, lr_max: float = 1e-4, lr_min: float = 1e-7) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step ``total``."""
    if total < 1:
        raise ValueError(f"schedule length must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


def sample_scales(stage: int, rng: Optional[np.random.Generator] = None,
                  stage1_scale: float = 4.0, stage2_scales: Sequence[float] = (1, 1.5, 2, 2.5, 3, 3.5, 4),
                  t: int = 8) -> Tuple[float, int]:
    """(s, t) for one step: fixed in stage 1, uniform over the allowed set in stage 2."""
    if stage == 1:
        return float(stage1_scale), t
    if stage == 2:
        rng = rng if rng is not None else np.random.default_rng()
        return float(stage2_scales[int(rng.integers(len(stage2_scales)))]), t
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step]))


class Trainer:
    """Runs both training stages, validation and checkpointing."""

    def __init__(self, model: SpaceTimeEnhancer, settings: Settings, dataset: ClipDataset,
                 out_dir: Path, val_samples: Sequence[TrainingSample] = ()):
        self.model = model
        self.settings = settings
        self.cfg = TrainConfig.from_settings(settings)
        self.dataset = dataset
        self.val_samples = list(val_samples)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics = MetricsLog(self.out_dir)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.cfg.lr_max, betas=self.cfg.betas)
        self.stage = 1
        self.step = 0
        self.best_psnr: Optional[float] = None
        self.history: List[float] = []

    def batch_for(self, stage: int, step: int) -> Tuple[Dict[str, torch.Tensor], float, int]:
        """Batch and scales of one step, derived only from (seed, stage, step)."""
        rng = step_rng(self.cfg.seed, stage, step)
        s, t = sample_scales(stage, rng, self.cfg.stage1_scale, self.cfg.stage2_scales, self.cfg.t)
        return self.dataset.batch(stage, step, self.cfg.batch_size, s), s, t

    def compute_loss(self, batch: Dict[str, torch.Tensor], s: float, t: int) -> torch.Tensor:
        query = QuerySpec.uniform(s, t)
        pred = self.model(batch['lr'], batch['voxel_fwd'], query, batch['voxel_bwd'])
        gt = batch['gt'][..., :pred.shape[-2], :pred.shape[-1]]
        return charbonnier_loss(pred, gt, self.cfg.charbonnier_eps2)

    def train_step(self, stage: int, step: int) -> float:
        """One optimization step; returns the loss."""
        self.model.train()
        lr = lr_schedule(step, self.cfg.iters(stage), self.cfg.lr_max, self.cfg.lr_min)
        for group in self.optimizer.param_groups:
            group['lr'] = lr

        batch, s, t = self.batch_for(stage, step)
        loss = self.compute_loss(batch, s, t)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at stage {stage} step {step}")

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

        self.metrics.write('train', stage=stage, step=step, loss=value, lr=lr, s=s, t=t)
        if step % self.cfg.log_every == 0:
            logger.info(f"stage {stage} step {step}/{self.cfg.iters(stage)}  loss {value:.5f}  "
                        f"lr {lr:.2e}  s={s:g}")
        return value

    @torch.no_grad()
    def validate(self) -> Optional[float]:
        """Mean Y-PSNR over the validation samples."""
        if not self.val_samples:
            return None
        self.model.eval()
        scores = []
        for sample in self.val_samples:
            batch = collate([sample])
            s, t = sample.scales
            pred = self.model(batch['lr'], batch['voxel_fwd'], QuerySpec.uniform(s, t), batch['voxel_bwd'])
            pred = pred.clamp(0, 1)[0].permute(0, 2, 3, 1).double().numpy()
            gt = sample.gt[:, :pred.shape[1], :pred.shape[2]]
            scores.append(float(np.mean([psnr_y(p, g) for p, g in zip(pred, gt)])))
        return float(np.mean(scores))

    def checkpoint(self, name: str) -> Path:
        return save_checkpoint(self.out_dir / name, self.model, self.optimizer, self.settings.to_dict(),
                               stage=self.stage, step=self.step, best_psnr=self.best_psnr)

    def resume(self, path: Path) -> None:
        """Restore model, optimizer and position from a checkpoint."""
        payload = load_checkpoint(path)
        self.model.load_state_dict(payload['model'])
        if payload.get('optimizer') is not None:
            self.optimizer.load_state_dict(payload['optimizer'])
        self.stage = int(payload['stage'])
        self.step = int(payload['step'])
        self.best_psnr = payload.get('best_psnr')
        logger.info(f"Resumed from {path} at stage {self.stage} step {self.step}")

    def validate_and_keep_best(self, force: bool = False) -> Optional[float]:
        """
        Validate, log the score and write ``best.pt`` on improvement.

        Args:
            force: Write ``best.pt`` even without an improvement
        """
        psnr = self.validate()
        if psnr is None:
            return None
        self.metrics.write('val', stage=self.stage, step=self.step, psnr=psnr)
        logger.info(f"validation PSNR-Y {psnr:.2f} dB over {len(self.val_samples)} clips "
                    f"at stage {self.stage} step {self.step}")
        improved = self.best_psnr is None or psnr > self.best_psnr
        if improved:
            self.best_psnr = psnr
        if improved or force:
            self.checkpoint('best.pt')
        return psnr

    def _after_step(self) -> None:
        if self.cfg.val_every > 0 and self.step % self.cfg.val_every == 0:
            self.validate_and_keep_best()

    def run(self, checkpoint_every: int = 0) -> Dict[str, Path]:
        """
        Run the remaining steps of both stages.

        Args:
            checkpoint_every: Also write ``last.pt`` every this many steps (0 = never)

        Returns:
            Dictionary with the paths of written checkpoints; ``best.pt`` is
            written by a closing validation when no periodic one produced it
        """
        for stage in (1, 2):
            if stage < self.stage:
                continue
            self.stage = stage
            total = self.cfg.iters(stage)
            logger.info(f"Stage {stage}: {total - self.step} of {total} steps to run")
            while self.step < total:
                self.history.append(self.train_step(stage, self.step))
                self.step += 1
                self._after_step()
                if checkpoint_every and self.step % checkpoint_every == 0:
                    self.checkpoint('last.pt')
            if stage == 1:
                self.stage, self.step = 2, 0

        best = self.out_dir / 'best.pt'
        if not best.exists():
            self.validate_and_keep_best(force=True)
        paths = {'final': self.checkpoint('final.pt')}
        if best.exists():
            paths['best'] = best
        return paths


def train(settings: Settings, sequences: Sequence[np.ndarray], out_dir: Path,
          resume: Optional[Path] = None, val_sequences: Sequence[np.ndarray] = ()) -> Dict[str, object]:
    """
    Train a model on frame sequences.

    Args:
        settings: Settings table
        sequences: (N, H, W, 3) frame sequences in [0, 1]
        out_dir: Directory for checkpoints and metrics.jsonl
        resume: Optional checkpoint to continue from
        val_sequences: Sequences whose clips are all validated; without them the
            last training clip is held out for validation

    Returns:
        Dictionary with the checkpoint paths, the loss history, parameter counts
        and the number of validation clips
    """
    settings.check()
    torch.manual_seed(settings['train.seed'])
    model = build_model(settings)
    counts = count_parameters(model)
    for name, count in counts.items():
        logger.info(f"  {name:<16} {count:>12,}")

    dataset = ClipDataset(sequences, num_segments=settings['model.num_segments'], t=settings['data.t'],
                          crop=settings['data.crop'], augment=settings['data.augment'],
                          threshold=settings['events.threshold'], log_eps=settings['events.log_eps'],
                          seed=settings['train.seed'], workers=settings['data.workers'])
    scale = settings['train.stage1_scale']
    if val_sequences:
        val_set = ClipDataset(val_sequences, num_segments=settings['model.num_segments'], t=settings['data.t'],
                              augment=False, threshold=settings['events.threshold'],
                              log_eps=settings['events.log_eps'], seed=settings['train.seed'])
        val_samples = [val_set.base_sample(clip, scale) for clip in val_set.clips]
    elif len(dataset) > 1:
        held_out = dataset.hold_out()
        logger.info(f"No validation sequences; holding out clip {held_out.start} of sequence {held_out.sequence_id}")
        val_samples = [dataset.base_sample(held_out, scale)]
    else:
        logger.warning("No validation sequences and a single training clip; validating on it")
        val_samples = [dataset.base_sample(dataset.clips[0], scale)]

    trainer = Trainer(model, settings, dataset, out_dir, val_samples)
    if resume is not None:
        trainer.resume(resume)
    paths = trainer.run()
    return {'checkpoints': paths, 'history': trainer.history, 'parameters': counts, 'model': model,
            'validation_clips': len(val_samples)}
