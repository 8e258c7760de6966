"""Two-network training: independent diffusion losses, then cycle-guided joint training.

The two networks are ``net_a`` (generates modality A conditioned on B) and
``net_b`` (generates B conditioned on A). In the joint phase both chains
share the forward noise and the posterior noise, so the coupled pairs
(A_{n-1}, A_n) and (B_{n-1}, B_n) follow the same latent path and each
network is asked to reproduce its own step with the other's latent code.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (
    DiffusionSchedule,
    LatentTrace,
    ReverseMoments,
    cycle_loss,
    ddpm_terms,
    extract_latent,
    make_schedule,
    model_mean,
    model_variance,
    posterior_moments,
    q_sample,
    reverse_step,
)
from .rng import TRAIN, Streams
from .tensor import NonFiniteError, Tensor, backward, checkpoint, ops
from .tensor.optim import OptimizerState, adamw_step

INDEPENDENT = "independent"
JOINT = "joint"


class TrainingError(RuntimeError):
    """Non-finite loss; carries the timesteps and epoch that produced it."""

    def __init__(self, message: str, timesteps=None, epoch: int | None = None):
        super().__init__(message)
        self.timesteps = None if timesteps is None else [int(t) for t in np.ravel(timesteps)]
        self.epoch = epoch


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**d)


@dataclass
class TrainConfig:
    gamma: float = 0.05
    lam: float = 1.0
    schedule: str = "cosine"
    N: int = 256
    phase1_epochs: int = 40
    total_epochs: int = 80
    batch_size: int = 4
    patches_per_case: int = 2
    patch: tuple[int, int, int] = (32, 32, 8)
    lr: float = 4e-5
    weight_decay: float = 1e-3
    grad_clip: float = 1.0
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if not 0 <= self.phase1_epochs <= self.total_epochs:
            raise ValueError("need 0 <= phase1_epochs <= total_epochs")
        if self.N < 2 or self.batch_size < 1 or self.patches_per_case < 1 or self.checkpoint_every < 1:
            raise ValueError("N >= 2, batch_size, patches_per_case and checkpoint_every >= 1 required")
        if len(self.patch) != 3:
            raise ValueError("patch needs three extents")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    def phase(self, epoch: int) -> str:
        return INDEPENDENT if epoch < self.phase1_epochs else JOINT


@dataclass
class StepLosses:
    l1_a: float
    vlb_a: float
    l1_b: float
    vlb_b: float
    cycle: float
    total: float


def _moments(xn, out, n, s) -> ReverseMoments:
    return ReverseMoments(model_mean(xn, out.eps, n, s), model_variance(out.v, n, s))


def coupled_prev(x0, xn, n, xi, s: DiffusionSchedule) -> np.ndarray:
    """Draw x_{n-1} from the forward posterior given (x0, xn) with noise ``xi``."""
    post = posterior_moments(x0, xn, n, s)
    return (post.mu + ops.sqrt(post.var) * Tensor(xi)).data


def cg_losses(a0, b0, net_a, net_b, s: DiffusionSchedule, cfg: TrainConfig, streams: Streams, phase: str):
    """Build the training objective for one batch of paired patches.

    Returns (total tensor, StepLosses, timesteps). Timestep, forward noise and
    posterior noise come from the TRAIN keys of ``streams``.
    """
    a0 = np.asarray(a0, dtype=np.float32)
    b0 = np.asarray(b0, dtype=np.float32)
    if a0.shape != b0.shape:
        raise ValueError(f"paired patches differ in shape: {a0.shape} vs {b0.shape}")
    if phase not in (INDEPENDENT, JOINT):
        raise ValueError(f"unknown phase {phase!r}")
    B, shape = a0.shape[0], a0.shape[1:]
    n = streams.at(TRAIN, 0).integers(1, s.N + 1, size=B)
    eps_a = streams.at(TRAIN, 1).standard_normal(a0.shape).astype(np.float32)
    eps_b = eps_a if phase == JOINT else streams.at(TRAIN, 2).standard_normal(a0.shape).astype(np.float32)
    an = q_sample(a0, n, eps_a, s).data.astype(np.float32)
    bn = q_sample(b0, n, eps_b, s).data.astype(np.float32)
    try:
        out_a = net_a(an, b0, n)
        out_b = net_b(bn, a0, n)
        l1_a, vlb_a = ddpm_terms(a0, an, n, eps_a, out_a, s)
        l1_b, vlb_b = ddpm_terms(b0, bn, n, eps_b, out_b, s)
        total = l1_a + cfg.gamma * vlb_a + l1_b + cfg.gamma * vlb_b
        cyc = 0.0
        if phase == JOINT and cfg.lam > 0:
            xi = streams.at(TRAIN, 3).standard_normal(a0.shape).astype(np.float32)
            a_prev = coupled_prev(a0, an, n, xi, s).astype(np.float32)
            b_prev = coupled_prev(b0, bn, n, xi, s).astype(np.float32)
            mom_a, mom_b = _moments(an, out_a, n, s), _moments(bn, out_b, n, s)
            z_from_b = extract_latent(b_prev, mom_b)
            z_from_a = extract_latent(a_prev, mom_a)
            c = cycle_loss([(reverse_step(mom_a, z_from_b), a_prev), (reverse_step(mom_b, z_from_a), b_prev)])
            total = total + cfg.lam * c
            cyc = c.item()
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in training loss at timesteps {n.tolist()}: {exc}", n) from exc
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite training loss at timesteps {n.tolist()}", n)
    losses = StepLosses(l1_a.item(), vlb_a.item(), l1_b.item(), vlb_b.item(), cyc, total.item())
    return total, losses, n


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads]


def cg_train_step(a0, b0, net_a: Denoiser, net_b: Denoiser, opt_a: OptimizerState, opt_b: OptimizerState,
                  s: DiffusionSchedule, cfg: TrainConfig, streams: Streams, phase: str) -> StepLosses:
    """One optimizer step for each network on a batch of paired patches."""
    total, losses, _ = cg_losses(a0, b0, net_a, net_b, s, cfg, streams, phase)
    names_a, names_b = list(net_a.params), list(net_b.params)
    leaves = [net_a.params[k] for k in names_a] + [net_b.params[k] for k in names_b]
    grads = backward(total, leaves)
    grads_a = clip_grad_norm(grads[: len(names_a)], cfg.grad_clip)
    grads_b = clip_grad_norm(grads[len(names_a):], cfg.grad_clip)
    adamw_step(net_a.params, dict(zip(names_a, grads_a)), opt_a)
    adamw_step(net_b.params, dict(zip(names_b, grads_b)), opt_b)
    return losses


# ---------------------------------------------------------------- checkpoints


@dataclass
class TrainState:
    net_a: Denoiser
    net_b: Denoiser
    opt_a: OptimizerState
    opt_b: OptimizerState
    cfg: TrainConfig
    epoch: int = 0


def new_state(cfg: TrainConfig, denoiser: DenoiserConfig) -> TrainState:
    denoiser.check_patch(cfg.patch)
    return TrainState(
        Denoiser(denoiser, seed=cfg.seed * 2 + 1),
        Denoiser(denoiser, seed=cfg.seed * 2 + 2),
        OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay),
        OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay),
        cfg,
    )


def _opt_arrays(opt: OptimizerState, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}m.{k}": v for k, v in opt.m.items()}
    out.update({f"{prefix}v.{k}": v for k, v in opt.v.items()})
    return out


def state_bytes(state: TrainState) -> bytes:
    arrays = {}
    arrays.update(state.net_a.state("net_a."))
    arrays.update(state.net_b.state("net_b."))
    arrays.update(_opt_arrays(state.opt_a, "opt_a."))
    arrays.update(_opt_arrays(state.opt_b, "opt_b."))
    header = {
        "format": "cgddpm-train/1",
        "epoch": state.epoch,
        "train": state.cfg.to_dict(),
        "denoiser": json.loads(state.net_a.config.to_json()),
        "opt_steps": [state.opt_a.step, state.opt_b.step],
    }
    return checkpoint.dumps(arrays, header)


def save_state(state: TrainState, path) -> None:
    Path(path).write_bytes(state_bytes(state))


def load_nets(path) -> tuple[Denoiser, Denoiser, dict]:
    """Networks and header from a training checkpoint."""
    arrays, header = checkpoint.load(path)
    if header.get("format") != "cgddpm-train/1":
        raise checkpoint.CheckpointError("not a training checkpoint")
    dcfg = DenoiserConfig.from_dict(header["denoiser"])
    nets = []
    for tag in ("net_a.", "net_b."):
        net = Denoiser(dcfg, params={})
        net.load_state(arrays, tag)
        nets.append(net)
    return nets[0], nets[1], header


def load_state(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a training state; ``cfg`` (if given) replaces the stored training config.

    The schedule and patch geometry must agree with the stored ones.
    """
    net_a, net_b, header = load_nets(path)
    arrays, _ = checkpoint.load(path)
    stored = TrainConfig.from_dict({**header["train"], "patch": tuple(header["train"]["patch"])})
    cfg = cfg or stored
    if (cfg.schedule, cfg.N, cfg.patch) != (stored.schedule, stored.N, stored.patch):
        raise checkpoint.CheckpointError("checkpoint schedule or patch size differs from the config")
    opts = []
    for tag, step in zip(("opt_a.", "opt_b."), header["opt_steps"]):
        opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, step=int(step))
        for k, v in arrays.items():
            if k.startswith(tag + "m."):
                opt.m[k[len(tag) + 2:]] = v
            elif k.startswith(tag + "v."):
                opt.v[k[len(tag) + 2:]] = v
        opts.append(opt)
    return TrainState(net_a, net_b, opts[0], opts[1], cfg, int(header["epoch"]))


# ---------------------------------------------------------------- epoch loop

LOG_COLUMNS = ["epoch", "phase", "l1_a", "vlb_a", "l1_b", "vlb_b", "cycle", "total"]


def epoch_patches(cases, cfg: TrainConfig, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Random co-located patches, ``patches_per_case`` per case, in shuffled order."""
    rng = Streams(cfg.seed).at(TRAIN, epoch, 0)
    pa, pb = [], []
    for a, b in cases:
        a, b = np.asarray(a), np.asarray(b)
        for _ in range(cfg.patches_per_case):
            o = [int(rng.integers(0, e - p + 1)) for e, p in zip(a.shape, cfg.patch)]
            sl = tuple(slice(oi, oi + p) for oi, p in zip(o, cfg.patch))
            pa.append(a[sl])
            pb.append(b[sl])
    order = rng.permutation(len(pa))
    return np.stack(pa)[order].astype(np.float32), np.stack(pb)[order].astype(np.float32)


def train_epoch(state: TrainState, cases, s: DiffusionSchedule) -> StepLosses:
    cfg, epoch = state.cfg, state.epoch
    phase = cfg.phase(epoch)
    pa, pb = epoch_patches(cases, cfg, epoch)
    rows = []
    for i, start in enumerate(range(0, len(pa), cfg.batch_size)):
        sl = slice(start, start + cfg.batch_size)
        streams = Streams(cfg.seed).child(TRAIN, epoch, i + 1)
        try:
            rows.append(cg_train_step(pa[sl], pb[sl], state.net_a, state.net_b, state.opt_a, state.opt_b,
                                      s, cfg, streams, phase))
        except TrainingError as exc:
            exc.epoch = epoch
            raise TrainingError(f"epoch {epoch}: {exc}", exc.timesteps, epoch) from exc
    state.epoch += 1
    return StepLosses(*np.mean([list(asdict(r).values()) for r in rows], axis=0).tolist())


def train(cases, cfg: TrainConfig, denoiser: DenoiserConfig, out_dir, resume: bool = True,
          init=None, log=None) -> TrainState:
    """Train both networks up to ``cfg.total_epochs``.

    Checkpoints go to ``out_dir/epoch_XXXX.ckpt`` every ``checkpoint_every``
    epochs plus ``out_dir/last.ckpt``; the per-epoch losses are appended to
    ``out_dir/losses.csv``. ``init`` starts from another run's checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = out / "last.ckpt"
    if resume and last.exists():
        state = load_state(last, cfg)
    elif init is not None:
        state = load_state(init, cfg)
    else:
        state = new_state(cfg, denoiser)
    s = make_schedule(cfg.schedule, cfg.N)
    log_path = out / "losses.csv"
    if not log_path.exists():
        log_path.write_text(",".join(LOG_COLUMNS) + "\n")
    while state.epoch < cfg.total_epochs:
        losses = train_epoch(state, cases, s)
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [state.epoch, cfg.phase(state.epoch - 1)] + [repr(v) for v in asdict(losses).values()])
        if log is not None:
            log(state.epoch, losses)
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.total_epochs:
            data = state_bytes(state)
            (out / f"epoch_{state.epoch:04d}.ckpt").write_bytes(data)
            last.write_bytes(data)
    if not last.exists() or last.read_bytes() != state_bytes(state):
        save_state(state, last)
    return state


# ---------------------------------------------------------------- latent traces

TRACE_MAGIC = b"ZTRC1"


def trace_bytes(trace: LatentTrace) -> bytes:
    buf = bytearray(TRACE_MAGIC)
    buf += struct.pack("<I", len(trace))
    for t, z in trace.steps:
        buf += struct.pack("<I", t)
        checkpoint.write_tensor_record(buf, f"z{t}", z)
    return bytes(buf)


def trace_from_bytes(data: bytes) -> LatentTrace:
    if data[:5] != TRACE_MAGIC:
        raise checkpoint.CheckpointError("bad magic")
    try:
        (count,) = struct.unpack_from("<I", data, 5)
    except struct.error as exc:
        raise checkpoint.CheckpointError("truncated trace") from exc
    pos = 9
    trace = LatentTrace()
    for _ in range(count):
        try:
            (t,) = struct.unpack_from("<I", data, pos)
        except struct.error as exc:
            raise checkpoint.CheckpointError("truncated trace") from exc
        _, z, pos = checkpoint.read_tensor_record(data, pos + 4)
        trace.append(t, z)
    return trace


def save_trace(trace: LatentTrace, path) -> None:
    Path(path).write_bytes(trace_bytes(trace))


def load_trace(path) -> LatentTrace:
    return trace_from_bytes(Path(path).read_bytes())
