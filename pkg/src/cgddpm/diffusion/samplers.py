"""Reverse-process samplers: cycle-guided, ancestral and implicit (eta = 0).

All samplers work on a respaced schedule ``s`` with its ``TimestepMap``;
moments use respaced step k while the networks receive the original step
``tmap.kept[k-1]``. Nets are callables ``net(x, cond, t) -> DenoiserOutput``.
Randomness comes from one ``Streams`` per batch element (see ``rng``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import REVERSE, START, Streams, as_stream_list, randn
from ..tensor import no_grad
from .process import (
    ReverseMoments,
    extract_latent,
    forward_chain,
    model_variance,
    posterior_moments,
    predict_x0_from_eps,
    reverse_step,
)
from .schedule import DiffusionSchedule, TimestepMap


@dataclass
class LatentTrace:
    """Reverse latent codes [z_{s_K}, ..., z_{s_1}] with their original timesteps."""

    steps: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        ts = [t for t, _ in self.steps]
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trace timesteps must be strictly decreasing")

    def append(self, t: int, z: np.ndarray) -> None:
        if self.steps and t >= self.steps[-1][0]:
            raise ValueError("trace timesteps must be strictly decreasing")
        if not np.all(np.isfinite(z)):
            raise ValueError(f"non-finite latent at step {t}")
        self.steps.append((int(t), np.asarray(z, dtype=np.float32)))

    def __len__(self) -> int:
        return len(self.steps)


def sampling_moments(net_out, xn, k: int, s: DiffusionSchedule) -> tuple[ReverseMoments, np.ndarray]:
    """Reverse moments built from the clipped x0 prediction (posterior mean form).

    Returns the moments and the clipped x0 estimate.
    """
    x0 = predict_x0_from_eps(xn, net_out.eps, k, s)
    mu = posterior_moments(x0, xn, k, s).mu
    return ReverseMoments(mu, model_variance(net_out.v, k, s)), x0.data


def _steps(s: DiffusionSchedule, tmap: TimestepMap):
    for k in range(s.N, 0, -1):
        yield k, np.full(1, tmap.kept[k - 1], dtype=np.int64)


def _t(tvec, batch):
    return np.repeat(tvec, batch)


def sample_cycle_guided(y0, net_x, net_y, s: DiffusionSchedule, tmap: TimestepMap, streams,
                        dtype=np.float32) -> tuple[np.ndarray, list[LatentTrace]]:
    """Generate the target modality for condition ``y0`` guided by the source chain.

    The source volume is pushed through the forward chain on the kept steps;
    the target chain starts at the noisiest source image and at every step
    takes the latent code the source model needs to reproduce its own chain.
    Returns the clipped target and one trace per batch element.
    """
    y0 = np.asarray(y0, dtype=dtype)
    B = y0.shape[0]
    streams = as_stream_list(streams, B)
    chain = [y0] + forward_chain(y0, s, streams, dtype)
    x = chain[-1].copy()
    traces = [LatentTrace() for _ in range(B)]
    with no_grad():
        for k, tvec in _steps(s, tmap):
            t = _t(tvec, B)
            out_x = net_x(x, y0, t)
            mom_x, x0_est = sampling_moments(out_x, x, k, s)
            out_y = net_y(chain[k], x0_est, t)
            mom_y, _ = sampling_moments(out_y, chain[k], k, s)
            z = extract_latent(chain[k - 1], mom_y).data
            for b in range(B):
                traces[b].append(int(tvec[0]), z[b])
            x = reverse_step(mom_x, z).data.astype(dtype)
    return np.clip(x, -1.0, 1.0), traces


def replay_trace(x_start, y0, net_x, s: DiffusionSchedule, tmap: TimestepMap, traces: list[LatentTrace],
                 dtype=np.float32) -> np.ndarray:
    """Re-run the target reverse path from ``x_start`` with stored latent codes."""
    x = np.asarray(x_start, dtype=dtype).copy()
    y0 = np.asarray(y0, dtype=dtype)
    B = x.shape[0]
    with no_grad():
        for i, (k, tvec) in enumerate(_steps(s, tmap)):
            if any(tr.steps[i][0] != int(tvec[0]) for tr in traces):
                raise ValueError("trace timesteps do not match the sampling schedule")
            out_x = net_x(x, y0, _t(tvec, B))
            mom_x, _ = sampling_moments(out_x, x, k, s)
            z = np.stack([tr.steps[i][1] for tr in traces])
            x = reverse_step(mom_x, z).data.astype(dtype)
    return np.clip(x, -1.0, 1.0)


def sample_ancestral(y0, net_x, s: DiffusionSchedule, tmap: TimestepMap, streams, dtype=np.float32) -> np.ndarray:
    """Standard learned-variance ancestral sampling from pure noise."""
    y0 = np.asarray(y0, dtype=dtype)
    B = y0.shape[0]
    streams = as_stream_list(streams, B)
    x = randn(streams, (START, 0), y0.shape[1:], dtype)
    with no_grad():
        for k, tvec in _steps(s, tmap):
            out = net_x(x, y0, _t(tvec, B))
            mom, _ = sampling_moments(out, x, k, s)
            if k > 1:
                x = reverse_step(mom, randn(streams, (REVERSE, k), y0.shape[1:], dtype)).data
            else:
                x = mom.mu.data
            x = x.astype(dtype)
    return np.clip(x, -1.0, 1.0)


def sample_ddim(y0, net_x, s: DiffusionSchedule, tmap: TimestepMap, streams, dtype=np.float32) -> np.ndarray:
    """Deterministic implicit sampler; only the starting noise is random."""
    y0 = np.asarray(y0, dtype=dtype)
    B = y0.shape[0]
    streams = as_stream_list(streams, B)
    x = randn(streams, (START, 0), y0.shape[1:], dtype)
    with no_grad():
        for k, tvec in _steps(s, tmap):
            out = net_x(x, y0, _t(tvec, B))
            x0 = predict_x0_from_eps(x, out.eps, k, s).data
            ab_prev = s.at("alpha_bar", k - 1)
            x = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * out.eps.data).astype(dtype)
    return np.clip(x, -1.0, 1.0)


def mc_sample(sampler, runs: int, seed: int, shared_start: bool = False) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run ``sampler(streams)`` ``runs`` times on per-run streams and average.

    With ``shared_start`` every run draws the same starting noise.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    root = Streams(seed)
    outs = [np.asarray(sampler(root.run(r, shared_start))) for r in range(runs)]
    return np.mean(outs, axis=0).astype(outs[0].dtype), outs
