"""Noise schedules and timestep respacing.

Arrays are stored 0-based (entry ``n - 1`` holds step ``n``); the accessor
methods take the 1-based step used everywhere else in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        alpha_bar = np.cumprod(alphas)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * b
        if b.size > 1:
            log_bt = np.log(np.concatenate([[beta_tilde[1]], beta_tilde[1:]]))
        else:
            # single-step schedule: beta_tilde is 0, fall back to beta
            log_bt = np.log(b)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "alpha_bar_prev", alpha_bar_prev)
        object.__setattr__(self, "beta_tilde", beta_tilde)
        object.__setattr__(self, "log_beta", np.log(b))
        object.__setattr__(self, "log_beta_tilde_clipped", log_bt)

    @property
    def N(self) -> int:
        return self.betas.size

    def check_step(self, n) -> np.ndarray:
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.N):
            raise ValueError(f"timestep out of range 1..{self.N}: {n}")
        return n.astype(np.int64)

    def at(self, table: str, n):
        """Look up ``table`` at 1-based step(s) ``n``; step 0 is allowed for alpha_bar."""
        arr = getattr(self, table)
        n = np.asarray(n, dtype=np.int64)
        if table == "alpha_bar" and np.any(n == 0):
            full = np.concatenate([[1.0], arr])
            return full[n]
        return arr[self.check_step(n) - 1]


def make_schedule(kind: str, N: int) -> DiffusionSchedule:
    if N < 2:
        raise ValueError("schedule needs at least 2 steps")
    if kind == "linear":
        scale = 1000.0 / N
        betas = np.linspace(scale * 1e-4, scale * 0.02, N, dtype=np.float64)
        betas = np.clip(betas, 1e-12, 0.999)
    elif kind == "cosine":
        def f(t):
            return math.cos((t / N + 0.008) / 1.008 * math.pi / 2) ** 2
        betas = np.array([min(1.0 - f(i + 1) / f(i), 0.999) for i in range(N)], dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    return DiffusionSchedule(betas)


@dataclass(frozen=True)
class TimestepMap:
    kept: tuple[int, ...]
    schedule: DiffusionSchedule

    def original(self, k):
        """Original step for respaced step(s) ``k`` (1-based)."""
        return np.asarray(self.kept, dtype=np.int64)[np.asarray(k, dtype=np.int64) - 1]


def respaced_indices(N: int, K: int) -> tuple[int, ...]:
    if not 1 <= K <= N:
        raise ValueError(f"respacing needs 1 <= K <= N, got K={K}, N={N}")
    return tuple(int(round(k * N / K)) for k in range(1, K + 1))


def respace_schedule(s: DiffusionSchedule, K: int | None = None, kept=None) -> tuple[DiffusionSchedule, TimestepMap]:
    """Compress ``s`` onto ``K`` evenly spaced steps ending at N (or onto ``kept``).

    The respaced betas are ``1 - alpha_bar[s_k] / alpha_bar[s_{k-1}]`` so the
    cumulative products agree with the original at every kept step.
    """
    if kept is None:
        if K is None:
            raise ValueError("give either K or kept")
        kept = respaced_indices(s.N, K)
    kept = tuple(int(k) for k in kept)
    if not kept or any(b <= a for a, b in zip(kept, kept[1:])) or kept[0] < 1 or kept[-1] > s.N:
        raise ValueError(f"kept steps must be strictly increasing within 1..{s.N}: {kept}")
    ab = s.at("alpha_bar", np.array(kept))
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / ab_prev
    new = DiffusionSchedule(betas)
    return new, TimestepMap(kept, new)
