"""Long-grid generation by fusing per-crop denoising updates.

A sliding window defines overlapping crops of a long latent grid. At every
sampling step each crop is denoised by the few-step consistency model, and
the per-crop clean estimates are merged by the analytic least-squares
solution: each cell becomes the mean of the estimates from all crops that
cover it. Because all crops read the same long-grid state and re-noising
uses one shared noise tensor, overlapping windows steer the individual
denoising paths into one coherent long sample. The independent baseline
(separate noise per crop, no fusion) is provided for seam comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import ConsistencySchedule, consistency_fn_batch, cm_sample, sample_levels
from .diffusion import NoiseSchedule, add_noise
from .errors import ConfigError, StructuralError
from .models import DenoiserModel
from .rng import derive_seed, rng_for


@dataclass(frozen=True)
class CropSpec:
    """One window into the long grid: top-left corner plus height/width."""
    row: int
    col: int
    h: int
    w: int


@dataclass(frozen=True)
class CropSet:
    crops: tuple[CropSpec, ...]
    step: int
    hp: int
    wp: int
    cover: np.ndarray  # (hp, wp) int cover counts

    def __len__(self) -> int:
        return len(self.crops)


def make_crops(hp: int, wp: int, h: int, w: int, step: int) -> CropSet:
    """Sliding-window crops at offsets (i*step, j*step) covering an hp x wp grid."""
    if h > hp or w > wp:
        raise ConfigError(f"crop {h}x{w} larger than grid {hp}x{wp}")
    if step < 1:
        raise ConfigError(f"stride must be >= 1, got {step}")
    if (hp - h) % step or (wp - w) % step:
        raise ConfigError(
            f"stride {step} must divide both {hp - h} and {wp - w}; "
            f"adjust the long dims or the stride")
    n_rows = (hp - h) // step + 1
    n_cols = (wp - w) // step + 1
    crops = []
    cover = np.zeros((hp, wp), dtype=np.int64)
    for i in range(n_rows):
        for j in range(n_cols):
            cs = CropSpec(row=i * step, col=j * step, h=h, w=w)
            crops.append(cs)
            cover[cs.row:cs.row + h, cs.col:cs.col + w] += 1
    assert cover.min() >= 1  # guaranteed by the stride divisibility above
    return CropSet(crops=tuple(crops), step=step, hp=hp, wp=wp, cover=cover)


def extract(grid: np.ndarray, crop: CropSpec) -> np.ndarray:
    return grid[:, crop.row:crop.row + crop.h, crop.col:crop.col + crop.w]


def fuse_lsq(updates, crops: CropSet) -> np.ndarray:
    """Least-squares merge of per-crop updates into one long grid.

    Minimizing the summed squared mismatch between each crop of the output
    and its update makes every cell the arithmetic mean of the updates that
    cover it. Accumulation runs in crop-index order for bit-determinism.
    """
    if len(updates) != len(crops):
        raise StructuralError(f"{len(updates)} updates for {len(crops)} crops")
    channels = np.asarray(updates[0]).shape[0]
    acc = np.zeros((channels, crops.hp, crops.wp), dtype=np.float64)
    for upd, cs in zip(updates, crops.crops):
        upd = np.asarray(upd, dtype=np.float64)
        if upd.shape != (channels, cs.h, cs.w):
            raise StructuralError(f"update shape {upd.shape} != {(channels, cs.h, cs.w)}")
        acc[:, cs.row:cs.row + cs.h, cs.col:cs.col + cs.w] += upd
    return acc / crops.cover[None, :, :]


def long_sample(student: DenoiserModel, csched: ConsistencySchedule, hp: int, wp: int, c,
                num_steps: int, step: int, seed: int, batch: int,
                sched: NoiseSchedule) -> np.ndarray:
    """Shared-restricted long sampling.

    One long noise grid is drawn; at every consistency level all crops of the
    current state are denoised (in batches of `batch` crops), fused by
    least squares, and the fused estimate is re-noised with a single shared
    noise tensor. With a single full-size crop this reduces exactly to
    cm_sample with the same seed.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    crops = make_crops(hp, wp, student.height, student.width, step)
    levels = sample_levels(sched.n_steps, num_steps)
    rng = rng_for(seed, "sample")
    shape = (student.channels, hp, wp)
    x = rng.standard_normal(shape)
    fused = x
    for i, n in enumerate(levels):
        updates = []
        for lo in range(0, len(crops), batch):
            chunk = crops.crops[lo:lo + batch]
            xs = np.stack([extract(x, cs) for cs in chunk])
            x0s = consistency_fn_batch(student, csched, xs, n, [c] * len(chunk)).data
            updates.extend(x0s)
        fused = fuse_lsq(updates, crops)
        if i + 1 < len(levels):
            eps = rng.standard_normal(shape)
            x = add_noise(fused, eps, levels[i + 1], sched)
    return fused


def independent_sample(student: DenoiserModel, csched: ConsistencySchedule, hp: int, wp: int,
                       c, num_steps: int, seed: int, sched: NoiseSchedule) -> np.ndarray:
    """Baseline: generate non-overlapping crops independently and stitch them.

    Each crop runs cm_sample with its own derived seed, so adjacent crops
    share nothing; seams show the full disagreement between samples.
    """
    h, w = student.height, student.width
    if hp % h or wp % w:
        raise ConfigError(f"independent stitching needs {h}x{w} to tile {hp}x{wp}")
    out = np.zeros((student.channels, hp, wp), dtype=np.float64)
    k = 0
    for i in range(hp // h):
        for j in range(wp // w):
            crop_seed = derive_seed(seed, f"crop{k}")
            out[:, i * h:(i + 1) * h, j * w:(j + 1) * w] = cm_sample(
                student, csched, (student.channels, h, w), c, num_steps, sched, crop_seed)
            k += 1
    return out


def seam_discontinuity(grid: np.ndarray, boundary_cols) -> float:
    """Mean absolute jump across the given column boundaries."""
    grid = np.asarray(grid, dtype=np.float64)
    cols = [int(b) for b in boundary_cols]
    if not cols:
        raise StructuralError("no boundary columns given")
    for b in cols:
        if not (1 <= b < grid.shape[2]):
            raise StructuralError(f"boundary column {b} outside grid width {grid.shape[2]}")
    jumps = [np.abs(grid[:, :, b] - grid[:, :, b - 1]).mean() for b in cols]
    return float(np.mean(jumps))


def tile_boundaries(wp: int, w: int) -> list[int]:
    """Interior columns where w-wide tiles meet inside a wp-wide grid."""
    if wp % w:
        raise ConfigError(f"{w} does not tile width {wp}")
    return [j * w for j in range(1, wp // w)]
