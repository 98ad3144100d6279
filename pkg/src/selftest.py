"""
Reference oracles and the built-in self-test.

The oracles are naive loops and exhaustive searches (exact rationals
for selection costs) and share no code with the implementations
they check. The test suite imports them too.
"""

import itertools
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .config import Settings
from .events import EventStream, TIME_RESOLUTION, reverse, reverse_voxel, voxelize
from .model import build_model
from .resample import bicubic_resize
from .synthesis import EventModulatedAlignment
from .training import charbonnier_loss, lr_schedule
from .video_inr import QuerySpec, cosine_encoding, local_attention, select_timestamps

logger = logging.getLogger(__name__)

# Central-difference step; float64 only.
GRADIENT_STEP = 1e-3
# Offset bias of the gradient check: deform taps sit half a pixel off the
# lattice, far from the floors of bilinear sampling.
OFF_LATTICE_OFFSET = 0.5


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def brute_force_voxelize(events: EventStream, height: int, width: int, num_segments: int) -> np.ndarray:
    """Per-event loop form of linear temporal binning."""
    grid = np.zeros((num_segments + 1, height, width), dtype=np.float64)
    for record in events.records():
        position = record.t * num_segments
        left = int(math.floor(position))
        frac = position - left
        grid[left, record.y, record.x] += record.p * (1.0 - frac)
        if left + 1 <= num_segments:
            grid[left + 1, record.y, record.x] += record.p * frac
    return grid


def random_stream(rng: np.random.Generator, count: int, height: int, width: int) -> EventStream:
    return EventStream(rng.integers(0, TIME_RESOLUTION + 1, count), rng.integers(0, width, count),
                       rng.integers(0, height, count), rng.choice([-1, 1], count))


def enumerate_selection(target, length: int, t_g: int) -> Tuple[int, ...]:
    """
    Exhaustive argmin of the summed distance over all size-T_G subsets.

    Arithmetic is exact: ``target`` is read as the shortest decimal fraction
    that round-trips its float value. Ties go to the lexicographically
    smallest index tuple.
    """
    target = Fraction(repr(float(target))) if not isinstance(target, Fraction) else target
    steps = max(length - 1, 1)
    times = [Fraction(i, steps) for i in range(length)]
    best, best_cost = None, None
    for subset in itertools.combinations(range(length), t_g):
        cost = sum(abs(times[i] - target) for i in subset)
        if best_cost is None or cost < best_cost:
            best, best_cost = subset, cost
    return best


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Loop-based local attention.

    q: (P, C); k, v: (P, T, G, C); bias: (P, T, G). Returns (P, T * C).
    """
    p_count, t_count, g_count, c = k.shape
    out = np.zeros((p_count, t_count * c))
    for p in range(p_count):
        for t in range(t_count):
            logits = [sum(q[p, j] * k[p, t, g, j] for j in range(c)) / math.sqrt(c) + bias[p, t, g]
                      for g in range(g_count)]
            top = max(logits)
            weights = [math.exp(x - top) for x in logits]
            norm = sum(weights)
            for j in range(c):
                out[p, t * c + j] = sum(weights[g] / norm * v[p, t, g, j] for g in range(g_count))
    return out


def reference_bicubic(image: np.ndarray, scale: float, a: float = -0.5) -> np.ndarray:
    """Per-pixel separable Keys bicubic downsampling with mirror borders."""
    def kernel(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    def mirror(i, n):
        if n == 1:
            return 0
        while i < 0 or i >= n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    h, w = image.shape
    out_h, out_w = int(h // scale), int(w // scale)
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        cy = (oy + 0.5) * scale - 0.5
        for ox in range(out_w):
            cx = (ox + 0.5) * scale - 0.5
            total = 0.0
            for iy in range(int(math.floor(cy)) - 1, int(math.floor(cy)) + 3):
                wy = kernel(cy - iy)
                for ix in range(int(math.floor(cx)) - 1, int(math.floor(cx)) + 3):
                    total += wy * kernel(cx - ix) * image[mirror(iy, h), mirror(ix, w)]
            out[oy, ox] = total
    return out


def trilinear_oracle(volume: np.ndarray, target: float, y: float, x: float) -> np.ndarray:
    """Direct-formula trilinear sample of a (N, C, h, w) volume with border clamping."""
    n, _, h, w = volume.shape
    u = target * (n - 1)
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    t0, y0, x0 = int(min(math.floor(u), max(n - 2, 0))), int(math.floor(y)), int(math.floor(x))
    out = 0.0
    for dt in (0, 1):
        wt = (u - t0) if dt else (1 - (u - t0))
        for dy in (0, 1):
            wy = (y - y0) if dy else (1 - (y - y0))
            for dx in (0, 1):
                wx = (x - x0) if dx else (1 - (x - x0))
                weight = wt * wy * wx
                if weight == 0:
                    continue
                out = out + weight * volume[min(t0 + dt, n - 1), :, min(y0 + dy, h - 1), min(x0 + dx, w - 1)]
    return out


def central_difference(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: int,
                       step: float = 1e-3) -> float:
    """d loss / d tensor.flat[index] by central differences."""
    flat = tensor.data.view(-1)
    original = flat[index].item()
    with torch.no_grad():
        flat[index] = original + step
        plus = float(loss_fn())
        flat[index] = original - step
        minus = float(loss_fn())
        flat[index] = original
    return (plus - minus) / (2 * step)


def gradients_agree(analytic: float, numeric: float, rel: float = 1e-3, abs_tol: float = 1e-7) -> bool:
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + abs_tol


def randomize_zero_parameters(model: nn.Module, scale: float = 0.1, seed: int = 0) -> None:
    """Give all-zero parameters (zero-initialized branches) random values."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.parameters():
            if not torch.any(param != 0):
                param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * scale)


def toy_gradient_settings() -> Settings:
    """Smallest full configuration: 8x8 frames, C=4, M=3, 3x3x3 local grid."""
    return Settings({
        'model.channels': 4,
        'model.num_segments': 3,
        'model.frame_blocks': 1,
        'model.event_blocks': 1,
        'livt.channels': 4,
        'livt.local_grid': [3, 3, 3],
        'livt.mlp_hidden': [16, 16, 16, 16],
    })


class ActivationSigns:
    """
    Records which LeakyReLU inputs are positive during a forward pass.

    Two passes with equal sign patterns ran through the same linear piece
    of every activation.
    """

    def __init__(self, model: nn.Module):
        self._pattern: Optional[List[torch.Tensor]] = None
        self._handles = [m.register_forward_hook(self._record)
                         for m in model.modules() if isinstance(m, nn.LeakyReLU)]

    def _record(self, module, inputs, output) -> None:
        if self._pattern is not None:
            self._pattern.append(inputs[0] > 0)

    @contextmanager
    def capture(self):
        self._pattern = []
        try:
            yield self._pattern
        finally:
            self._pattern = None

    def remove(self) -> None:
        for handle in self._handles:
            handle.remove()

    @staticmethod
    def same(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
        return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradientReport:
    agreeing: int
    sampled: int
    straddled: int = 0

    @property
    def fraction(self) -> float:
        return self.agreeing / self.sampled if self.sampled else 0.0


def gradient_check(model: nn.Module, forward: Callable[[], torch.Tensor], samples: int = 100,
                   step: float = GRADIENT_STEP, seed: int = 0, max_redraws: int = 1000) -> GradientReport:
    """
    Compare autograd against central differences on sampled parameters.

    A sample whose two evaluations put some LeakyReLU input on different
    sides of zero has no meaningful finite difference; it is counted as
    straddled and redrawn.

    Args:
        model: Module whose parameters are checked, already in float64
        forward: Runs the module on fixed inputs
        samples: Number of compared (parameter, element) pairs
        step: Central-difference step
        seed: Sampling seed
        max_redraws: Give up redrawing after this many straddled samples

    Returns:
        GradientReport
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        reference = forward()
    weights = torch.as_tensor(rng.standard_normal(tuple(reference.shape)), dtype=reference.dtype)

    def loss_fn():
        return (forward() * weights).sum()

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    sizes = np.array([p.numel() for p in params], dtype=np.float64)

    signs = ActivationSigns(model)
    patterns: List[List[torch.Tensor]] = []

    def monitored():
        with signs.capture() as pattern:
            value = loss_fn()
        patterns.append(pattern)
        return value

    report = GradientReport(0, 0)
    try:
        while report.sampled < samples:
            param = params[int(rng.choice(len(params), p=sizes / sizes.sum()))]
            index = int(rng.integers(param.numel()))
            patterns.clear()
            numeric = central_difference(monitored, param, index, step)
            if not ActivationSigns.same(*patterns):
                report.straddled += 1
                if report.straddled > max_redraws:
                    raise RuntimeError(f"more than {max_redraws} samples straddle an activation kink")
                continue
            report.sampled += 1
            report.agreeing += gradients_agree(float(param.grad.view(-1)[index]), numeric)
    finally:
        signs.remove()
    return report


# ---------------------------------------------------------------------------
# Self-test
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ''


def check_voxel_mass(rng: np.random.Generator) -> CheckResult:
    events = random_stream(rng, 1000, 16, 16)
    grid = voxelize(events, 16, 16, 7).data
    exact = np.array_equal(grid, brute_force_voxelize(events, 16, 16, 7))
    mass = grid.sum() == events.p.sum()
    return CheckResult('voxel oracle and mass', bool(exact and mass),
                       f"oracle match={exact}, mass {grid.sum():g} vs {events.p.sum()}")


def check_reversal(rng: np.random.Generator) -> CheckResult:
    for _ in range(100):
        events = random_stream(rng, int(rng.integers(0, 50)), 8, 8)
        if reverse(reverse(events)) != events:
            return CheckResult('reversal involution', False, "reverse(reverse(S)) != S")
        forward = voxelize(events, 8, 8, 5)
        if not np.array_equal(voxelize(reverse(events), 8, 8, 5).data, reverse_voxel(forward).data):
            return CheckResult('reversal involution', False, "voxel reversal mismatch")
    return CheckResult('reversal involution', True, "100 streams")


def check_selection() -> CheckResult:
    for m in (3, 5, 7):
        n = m + 2
        timestamps = np.arange(n) / (n - 1)
        for t_g in (1, 2, 3):
            for k in range(101):
                got = tuple(int(i) for i in select_timestamps(k / 100, timestamps, t_g))
                want = enumerate_selection(Fraction(k, 100), n, t_g)
                if got != want:
                    return CheckResult('temporal selection', False, f"M={m} T_G={t_g} t={k / 100}: {got} != {want}")
    return CheckResult('temporal selection', True, "M in {3,5,7}, T_G in {1,2,3}, 0.01 lattice")


def check_attention(rng: np.random.Generator) -> CheckResult:
    p, t, g, c = 4, 3, 9, 8
    q = rng.standard_normal((p, c))
    k = rng.standard_normal((p, t, g, c))
    v = rng.standard_normal((p, t, g, c))
    b = rng.standard_normal((p, t, g))
    out, weights = local_attention(*(torch.as_tensor(x).unsqueeze(0) for x in (q, k, v, b)), return_weights=True)
    error = float(np.abs(out[0].numpy() - dense_attention(q, k, v, b)).max())
    rows = float((weights.sum(-1) - 1).abs().max())
    return CheckResult('local attention oracle', error <= 1e-5 and rows <= 1e-6,
                       f"max error {error:.2e}, row-sum error {rows:.2e}")


def check_encoding() -> CheckResult:
    zero = cosine_encoding(torch.zeros(3, dtype=torch.float64), 10)
    pattern = torch.tensor([0.0, 1.0] * 30, dtype=torch.float64)
    rel = torch.tensor([0.3, -0.7, 0.45], dtype=torch.float64)
    plus, minus = cosine_encoding(rel, 10), cosine_encoding(-rel, 10)
    parity = (float((plus[0::2] + minus[0::2]).abs().max()) <= 1e-12
              and float((plus[1::2] - minus[1::2]).abs().max()) <= 1e-12)
    passed = zero.shape[-1] == 60 and bool(torch.equal(zero, pattern)) and parity
    return CheckResult('positional encoding', passed, f"width {zero.shape[-1]}")


def place_offsets_off_lattice(model: nn.Module, offset: float = OFF_LATTICE_OFFSET) -> None:
    """Set the offset bias of every alignment module to ``offset`` pixels."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, EventModulatedAlignment):
                for conv in module.offset_conv:
                    conv.bias[:2 * module.groups].fill_(offset)


def check_gradients(seed: int) -> CheckResult:
    torch.manual_seed(seed)
    model = build_model(toy_gradient_settings()).double()
    randomize_zero_parameters(model, seed=seed)
    place_offsets_off_lattice(model)
    generator = torch.Generator().manual_seed(seed)
    lr = torch.rand(1, 2, 3, 8, 8, generator=generator, dtype=torch.float64)
    voxel = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    query = QuerySpec.uniform(1, 1)
    report = gradient_check(model, lambda: model(lr, voxel, query), samples=100, step=GRADIENT_STEP, seed=seed)
    return CheckResult('end-to-end gradients', report.fraction >= 0.99,
                       f"{report.agreeing}/{report.sampled} agree at step {GRADIENT_STEP:g}, "
                       f"{report.straddled} redrawn across activation kinks")


def check_training_closed_forms() -> CheckResult:
    x = torch.rand(4, 3, 8, 8, dtype=torch.float64)
    loss = float(charbonnier_loss(x, x))
    lrs = (lr_schedule(0, 100), lr_schedule(100, 100), lr_schedule(50, 100))
    ok = (abs(loss - 1e-3) <= 1e-15 and abs(lrs[0] - 1e-4) <= 1e-12 and abs(lrs[1] - 1e-7) <= 1e-12
          and abs(lrs[2] - 5.00005e-5) <= 1e-12)
    return CheckResult('loss and schedule closed forms', ok, f"loss {loss:.6g}, lr {lrs}")


def check_bicubic(rng: np.random.Generator) -> CheckResult:
    image = np.zeros((8, 8))
    image[3, 4] = 1.0
    noisy = rng.standard_normal((12, 10))
    error = max(float(np.abs(bicubic_resize(image, 2) - reference_bicubic(image, 2)).max()),
                float(np.abs(bicubic_resize(noisy, 1.5) - reference_bicubic(noisy, 1.5)).max()))
    return CheckResult('bicubic resampler', error <= 1e-6, f"max error {error:.2e}")


def run_selftest(seed: int = 1234, checks: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run the oracle suite and log one line per check."""
    rng = np.random.default_rng(seed)
    suite = {
        'voxel': lambda: check_voxel_mass(rng),
        'reversal': lambda: check_reversal(rng),
        'selection': check_selection,
        'attention': lambda: check_attention(rng),
        'encoding': check_encoding,
        'bicubic': lambda: check_bicubic(rng),
        'training': check_training_closed_forms,
        'gradients': lambda: check_gradients(seed),
    }
    results = []
    for name, check in suite.items():
        if checks is not None and name not in checks:
            continue
        try:
            result = check()
        except Exception as e:
            result = CheckResult(name, False, f"raised {type(e).__name__}: {e}")
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"[{'PASS' if result.passed else 'FAIL'}] {result.name}: {result.detail}")
        results.append(result)
    return results
