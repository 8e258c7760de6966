"""Whole-volume translation with a trained network pair.

``direction`` names the translation: ``a2b`` synthesizes modality B from A
with ``net_b`` as the target network and ``net_a`` as the source network
that guides cycle-guided sampling; ``b2a`` is the mirror image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser
from .diffusion import (
    DiffusionSchedule,
    LatentTrace,
    TimestepMap,
    make_schedule,
    respace_schedule,
    sample_ancestral,
    sample_cycle_guided,
    sample_ddim,
)
from .patches import SlidingWindowPlan, plan_windows, predict_volume
from .rng import Streams

SAMPLERS = ("cg", "ancestral", "ddim")
DIRECTIONS = ("a2b", "b2a")


def pick_nets(net_a: Denoiser, net_b: Denoiser, direction: str) -> tuple[Denoiser, Denoiser]:
    """(target net, source net) for ``direction``."""
    if direction == "a2b":
        return net_b, net_a
    if direction == "b2a":
        return net_a, net_b
    raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


@dataclass
class PatchSampler:
    """Callable ``(patches, streams) -> outputs`` for :func:`predict_volume`.

    Cycle-guided runs keep the latent traces of every window they process,
    keyed by window stream, when ``keep_traces`` is set.
    """

    kind: str
    net_x: Denoiser
    net_y: Denoiser | None
    s: DiffusionSchedule
    tmap: TimestepMap
    keep_traces: bool = False
    traces: dict[tuple[int, ...], LatentTrace] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLERS}")
        if self.kind == "cg" and self.net_y is None:
            raise ValueError("cycle-guided sampling needs the source network")

    def __call__(self, patches: np.ndarray, streams: list[Streams]) -> np.ndarray:
        if self.kind == "cg":
            out, traces = sample_cycle_guided(patches, self.net_x, self.net_y, self.s, self.tmap, streams)
            if self.keep_traces:
                for st, tr in zip(streams, traces):
                    self.traces[st.key] = tr
            return out
        if self.kind == "ancestral":
            return sample_ancestral(patches, self.net_x, self.s, self.tmap, streams)
        return sample_ddim(patches, self.net_x, self.s, self.tmap, streams)


def sampling_schedule(kind: str, N: int, K: int) -> tuple[DiffusionSchedule, TimestepMap]:
    if not 1 <= K <= N:
        raise ValueError(f"sampling steps K={K} must lie in 1..N={N}")
    return respace_schedule(make_schedule(kind, N), K)


def translate_volume(source: np.ndarray, sampler: PatchSampler, patch, runs: int, seed: int,
                     overlap: float = 0.5, shared_start: bool = False, batch: int = 8,
                     threads: int = 1) -> list[np.ndarray]:
    """``runs`` independent whole-volume samples for one source volume."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    source = np.asarray(source, dtype=np.float32)
    sampler.net_x.config.check_patch(patch)
    plan: SlidingWindowPlan = plan_windows(source.shape, patch, overlap)
    root = Streams(seed)
    return [predict_volume(source, sampler, plan, root.run(r, shared_start), batch=batch, threads=threads)
            for r in range(runs)]
