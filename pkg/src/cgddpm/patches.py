"""Sliding-window whole-volume synthesis with Gaussian-weighted blending."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .rng import Streams


def gaussian_mask(patch, sigma_fraction: float = 1.0 / 8.0) -> np.ndarray:
    """Separable Gaussian over ``patch`` centred at (extent - 1) / 2, peak 1.

    For even extents the peak falls between voxels; the mask is rescaled so
    its largest voxel is exactly 1.
    """
    if sigma_fraction <= 0:
        raise ValueError("sigma fraction must be positive")
    mask = np.ones((), dtype=np.float64)
    for e in patch:
        c = (e - 1) / 2.0
        sigma = e * sigma_fraction
        g = np.exp(-0.5 * ((np.arange(e) - c) / sigma) ** 2)
        mask = np.multiply.outer(mask, g / g.max())
    return mask


@dataclass(frozen=True)
class SlidingWindowPlan:
    volume: tuple[int, ...]
    patch: tuple[int, ...]
    stride: tuple[int, ...]
    origins: tuple[tuple[int, ...], ...]
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def window(self, i: int) -> tuple[slice, ...]:
        return tuple(slice(o, o + p) for o, p in zip(self.origins[i], self.patch))


def _axis_origins(v: int, p: int, stride: int) -> list[int]:
    origins = list(range(0, v - p + 1, stride))
    if origins[-1] != v - p:
        origins.append(v - p)
    return origins


def plan_windows(volume, patch, overlap: float = 0.5, sigma_fraction: float = 1.0 / 8.0) -> SlidingWindowPlan:
    volume, patch = tuple(int(v) for v in volume), tuple(int(p) for p in patch)
    if len(volume) != len(patch):
        raise ValueError("volume and patch ranks differ")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if any(p < 1 or p > v for p, v in zip(patch, volume)):
        raise ValueError(f"patch {patch} does not fit in volume {volume}")
    stride = tuple(max(1, math.floor(p * (1.0 - overlap) + 1e-9)) for p in patch)
    per_axis = [_axis_origins(v, p, s) for v, p, s in zip(volume, patch, stride)]
    return SlidingWindowPlan(volume, patch, stride, tuple(product(*per_axis)), gaussian_mask(patch, sigma_fraction))


def stitch(plan: SlidingWindowPlan, outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Weighted average of overlapping window outputs, accumulated in plan order."""
    if len(outputs) != len(plan):
        raise ValueError(f"need {len(plan)} window outputs, got {len(outputs)}")
    num = np.zeros(plan.volume, dtype=np.float64)
    den = np.zeros(plan.volume, dtype=np.float64)
    for i, out in enumerate(outputs):
        if out is None:
            raise ValueError(f"missing output for window {i}")
        out = np.asarray(out, dtype=np.float64)
        if out.shape != plan.patch:
            raise ValueError(f"window {i} output shape {out.shape} != patch {plan.patch}")
        sl = plan.window(i)
        num[sl] += plan.weights * out
        den[sl] += plan.weights
    return (num / den).astype(np.float32)


PatchSampler = Callable[[np.ndarray, list[Streams]], np.ndarray]


def predict_volume(source: np.ndarray, sampler: PatchSampler, plan: SlidingWindowPlan, seed: int | Streams,
                   batch: int = 8, threads: int = 1) -> np.ndarray:
    """Run ``sampler`` on every window of ``source`` and blend the results.

    ``sampler(patches[B, ...], streams)`` receives one ``Streams`` per window,
    derived from the master seed and the window index, so the output does not
    depend on batching order or on ``threads``.
    """
    source = np.asarray(source, dtype=np.float32)
    if source.shape != plan.volume:
        raise ValueError(f"source shape {source.shape} does not match plan {plan.volume}")
    root = seed if isinstance(seed, Streams) else Streams(seed)
    groups = [list(range(i, min(i + batch, len(plan)))) for i in range(0, len(plan), batch)]

    def run(group):
        patches = np.stack([source[plan.window(i)] for i in group])
        return np.asarray(sampler(patches, [root.child(i) for i in group]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    outputs = [out for res in results for out in res]
    return stitch(plan, outputs)
