"""Image-quality metrics and the Monte-Carlo consistency report.

All metrics assume intensities on [-1, 1] (data range 2). MS-SSIM is the
3D extension of the multi-scale SSIM with a separable Gaussian window
(11 voxels, sigma 1.5) that is clipped to the axis extent on thin axes.
It is evaluated on intensities shifted to [0, 2]: the luminance term
assumes non-negative signal and changes sign when local means straddle
zero, which on signed data would punish tissue whose value sits near 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DATA_RANGE = 2.0
MSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MIN_SCALE_EXTENT = 4
REPORT_SCHEMA = "cgddpm-report/1"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def window_1d(extent: int, size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalized Gaussian taps, shortened to the largest odd size fitting ``extent``."""
    n = min(size, extent)
    if n % 2 == 0:
        n -= 1
    x = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: Sequence[np.ndarray]) -> np.ndarray:
    for axis, w in enumerate(taps):
        view = sliding_window_view(x, w.size, axis=axis)
        x = view @ w
    return x


def ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term at one scale."""
    taps = [window_1d(e) for e in a.shape]
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    saa = _filter_valid(a * a, taps) - mu_a**2
    sbb = _filter_valid(b * b, taps) - mu_b**2
    sab = _filter_valid(a * b, taps) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return float(lum.mean()), float(cs.mean())


def max_scales(shape) -> int:
    smallest = min(shape)
    if smallest < MIN_SCALE_EXTENT:
        return 0
    return int(math.floor(math.log2(smallest / MIN_SCALE_EXTENT))) + 1


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """2x average pooling on every axis; a trailing odd voxel is dropped."""
    sl = tuple(slice(0, 2 * (e // 2)) for e in x.shape)
    x = x[sl]
    for axis in range(x.ndim):
        shape = x.shape[:axis] + (x.shape[axis] // 2, 2) + x.shape[axis + 1:]
        x = x.reshape(shape).mean(axis=axis + 1)
    return x


def combine_terms(lum: float, cs: Sequence[float], weights: Sequence[float]) -> float:
    """lum^w_M * prod_j cs_j^w_j, negative when any term is negative.

    Fractional powers of negative terms are taken on magnitudes; a single
    negative term marks the whole index as anti-correlated.
    """
    terms = list(cs[:-1]) + [cs[-1] * lum]
    value = 1.0
    for t, w in zip(terms, weights):
        value *= abs(t) ** w
    return -value if any(t < 0 for t in terms) else value


def mssim(a, b, scales: int | None = None, weights: Sequence[float] | None = None,
          data_range: float = DATA_RANGE, low: float = -1.0) -> float:
    """Multi-scale SSIM of two 3D volumes.

    The number of scales defaults to as many as the smallest axis supports
    (each scale needs at least 4 voxels per axis), capped at five. Weights
    default to the five standard exponents, truncated and renormalized.
    ``low`` is the bottom of the intensity range and is subtracted first.
    """
    a, b = _pair(a, b)
    a, b = a - low, b - low
    available = min(max_scales(a.shape), len(MSSIM_WEIGHTS))
    if available < 1:
        raise ValueError(f"volume {a.shape} too small for MS-SSIM")
    if scales is None:
        scales = available
    if not 1 <= scales <= max_scales(a.shape):
        raise ValueError(f"volume {a.shape} supports at most {max_scales(a.shape)} scales, asked {scales}")
    if weights is None:
        if scales > len(MSSIM_WEIGHTS):
            raise ValueError("give weights for more than five scales")
        weights = MSSIM_WEIGHTS[:scales]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != scales:
        raise ValueError(f"need {scales} weights, got {weights.size}")
    weights = weights / weights.sum()
    cs_list = []
    lum = 1.0
    for j in range(scales):
        lum, cs = ssim_terms(a, b, data_range)
        cs_list.append(cs)
        if j + 1 < scales:
            a, b = avg_pool2(a), avg_pool2(b)
    return combine_terms(lum, cs_list, weights)


def voxel_uncertainty(runs) -> float:
    """Mean over voxels of the population standard deviation across runs.

    Deviations are taken from the first run before averaging, which leaves
    the value unchanged but makes identical runs score exactly zero.
    """
    runs = np.asarray(runs, dtype=np.float64)
    if runs.shape[0] < 1:
        raise ValueError("need at least one run")
    return float(np.std(runs - runs[0], axis=0).mean())


@dataclass
class MCReport:
    runs: int
    uncertainty: float
    n_mssim: list[float]
    inconsistency: float
    mae: float
    psnr: float
    mssim: float
    raw_mssim: list[float] = field(default_factory=list)

    def rows(self, case: str, task: str, sampler: str) -> list[tuple]:
        out = [(case, task, sampler, "uncertainty", self.uncertainty),
               (case, task, sampler, "inconsistency", self.inconsistency)]
        out += [(case, task, sampler, f"n_mssim_mc{n}", v) for n, v in enumerate(self.n_mssim, 1)]
        out += [(case, task, sampler, f"mssim_mc{n}", v) for n, v in enumerate(self.raw_mssim, 1)]
        out += [(case, task, sampler, "mae", self.mae), (case, task, sampler, "psnr", self.psnr),
                (case, task, sampler, "mssim", self.mssim)]
        return out


def mc_consistency(runs: Sequence[np.ndarray], truth) -> MCReport:
    """Uncertainty, N-MSSIM over MC-1..MC-n and inconsistency for one case.

    MC-n is the mean of the first n runs; each is scored against ``truth``
    and divided by the best score over n. When no MC-n scores above zero
    the ratio has no meaning and N-MSSIM and inconsistency are NaN.
    """
    truth = np.asarray(truth, dtype=np.float64)
    runs = [np.asarray(r, dtype=np.float64) for r in runs]
    if not runs:
        raise ValueError("need at least one run")
    for i, r in enumerate(runs):
        if r.shape != truth.shape:
            raise ValueError(f"run {i} shape {r.shape} does not match truth {truth.shape}")
    stack = np.stack(runs)
    # cumulative means as offsets from the first run, so repeated runs reproduce it exactly
    csum = np.cumsum(stack - stack[0], axis=0)
    means = [stack[0] + csum[n - 1] / n for n in range(1, len(runs) + 1)]
    raw = [mssim(m, truth) for m in means]
    best = max(raw)
    normed = [v / best for v in raw] if best > 0 else [math.nan] * len(raw)
    mean = means[-1]
    return MCReport(
        runs=len(runs),
        uncertainty=voxel_uncertainty(stack),
        n_mssim=normed,
        inconsistency=float(np.std(normed)),
        mae=mae(mean, truth),
        psnr=psnr(mean, truth),
        mssim=raw[-1],
        raw_mssim=raw,
    )


def write_report(path, rows: Iterable[tuple]) -> None:
    """CSV with columns schema, case, task, sampler, metric, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema", "case", "task", "sampler", "metric", "value"])
        for case, task, sampler, metric, value in rows:
            w.writerow([REPORT_SCHEMA, case, task, sampler, metric, repr(float(value))])


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r, value=float(r["value"])) for r in csv.DictReader(fh)]
