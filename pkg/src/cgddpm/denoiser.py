"""Conditional 3D U-shaped denoiser.

Input is the noisy target patch and the condition patch stacked as two
channels; output is the noise prediction and the variance coefficient.
Layout inside the network is channels-last, [B, X, Y, Z, C].

    conv_in -> [res, down] x (levels-1) -> res, W-MSA, SW-MSA, res
            -> [conv, upsample, concat skip, res] x (levels-1) -> norm, conv_out

Every residual block receives the projected timestep embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion.process import DenoiserOutput
from .tensor import Tensor, as_tensor, checkpoint, ops
from .tensor.core import ShapeError


@dataclass
class DenoiserConfig:
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 4)
    window: tuple[int, int, int] = (4, 4, 4)
    heads: int = 2
    time_width: int = 64
    groups: int = 4
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.window = tuple(int(w) for w in self.window)
        if len(self.window) != 3:
            raise ValueError("window needs three extents")
        if self.time_width % 2:
            raise ValueError("time_width must be even")
        for c in self.widths:
            if c % self.groups or c % self.heads:
                raise ValueError(f"width {c} not divisible by groups/heads")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]

    def check_patch(self, extents) -> None:
        f = 2 ** (self.levels - 1)
        if any(e % f for e in extents):
            raise ShapeError(f"patch extents {tuple(extents)} not divisible by {f}")
        coarse = [e // f for e in extents]
        win = attention_window(coarse, self.window)
        if any(c % w for c, w in zip(coarse, win)):
            raise ShapeError(f"coarsest extents {coarse} not divisible by window {win}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


def attention_window(extents, window) -> tuple[int, ...]:
    """Window clipped to the feature extents (a window never exceeds the grid)."""
    return tuple(min(w, e) for w, e in zip(window, extents))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(config: DenoiserConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, k=3, zero=False):
        shape = (cout, cin, k, k, k)
        fan_in = cin * k ** 3
        p[name + ".w"] = np.zeros(shape) if zero else rng.standard_normal(shape) / math.sqrt(fan_in)
        p[name + ".b"] = np.zeros(cout)

    def lin(name, cin, cout):
        p[name + ".w"] = rng.standard_normal((cin, cout)) / math.sqrt(cin)
        p[name + ".b"] = np.zeros(cout)

    def norm(name, c):
        p[name + ".g"] = np.ones(c)
        p[name + ".b"] = np.zeros(c)

    def res(name, cin, cout):
        norm(name + ".norm1", cin)
        conv(name + ".conv1", cin, cout)
        lin(name + ".temb", config.time_width, cout)
        norm(name + ".norm2", cout)
        conv(name + ".conv2", cout, cout)
        if cin != cout:
            conv(name + ".skip", cin, cout, k=1)

    def attn(name, c):
        norm(name + ".norm1", c)
        lin(name + ".qkv", c, 3 * c)
        lin(name + ".proj", c, c)
        norm(name + ".norm2", c)
        lin(name + ".mlp1", c, 2 * c)
        lin(name + ".mlp2", 2 * c, c)

    tw = config.time_width
    lin("time.lin1", tw, tw)
    lin("time.lin2", tw, tw)
    widths = config.widths
    conv("conv_in", config.in_channels, widths[0])
    cin = widths[0]
    for i, c in enumerate(widths[:-1]):
        res(f"enc{i}", cin, c)
        conv(f"down{i}", c, c)
        cin = c
    mid = widths[-1]
    res("mid.res1", cin, mid)
    attn("mid.attn1", mid)
    attn("mid.attn2", mid)
    res("mid.res2", mid, mid)
    cin = mid
    for i in reversed(range(config.levels - 1)):
        c = widths[i]
        conv(f"up{i}", cin, c)
        res(f"dec{i}", 2 * c, c)
        cin = c
    norm("out.norm", cin)
    conv("out.conv", cin, config.out_channels, zero=True)
    return {k: Tensor(v.astype(np.float32), requires_grad=True, name=k) for k, v in p.items()}


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def time_embed_raw(n, width: int) -> np.ndarray:
    """Interleaved sin/cos of ``n`` at geometric frequencies; [len(n), width]."""
    n = np.atleast_1d(np.asarray(n, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = n[:, None] * freqs[None, :]
    out = np.empty((n.size, width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def time_embed(n, width: int, params: dict[str, Tensor], dtype=np.float32) -> Tensor:
    raw = Tensor(time_embed_raw(n, width).astype(dtype))
    h = ops.silu(ops.linear(raw, params["time.lin1.w"], params["time.lin1.b"]))
    return ops.linear(h, params["time.lin2.w"], params["time.lin2.b"])


def _conv(x, params, name, stride=1):
    k = params[name + ".w"].shape[-1]
    return ops.conv3d_cl(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=k // 2)


def _gn(x, params, name, groups):
    return ops.group_norm(x, groups, params[name + ".g"], params[name + ".b"], channels_last=True)


def res_block(x, emb, params, name, groups):
    h = _conv(ops.silu(_gn(x, params, name + ".norm1", groups)), params, name + ".conv1")
    t = ops.linear(ops.silu(emb), params[name + ".temb.w"], params[name + ".temb.b"])
    h = h + ops.reshape(t, (t.shape[0], 1, 1, 1, t.shape[1]))
    h = _conv(ops.silu(_gn(h, params, name + ".norm2", groups)), params, name + ".conv2")
    skip = _conv(x, params, name + ".skip") if (name + ".skip.w") in params else x
    return skip + h


def _window_labels(extents, window, shift) -> np.ndarray:
    """Region id per voxel after a cyclic shift; tokens may only attend within a region."""
    labels = np.zeros(extents, dtype=np.int64)
    for ax, (e, w, s) in enumerate(zip(extents, window, shift)):
        ids = np.zeros(e, dtype=np.int64)
        if s:
            ids[e - w:e - s] = 1
            ids[e - s:] = 2
        shape = [1, 1, 1]
        shape[ax] = e
        labels = labels * 3 + ids.reshape(shape)
    return labels


def _partition(x: Tensor, window) -> Tensor:
    B, D, H, W, C = x.shape
    wd, wh, ww = window
    x = ops.reshape(x, (B, D // wd, wd, H // wh, wh, W // ww, ww, C))
    x = ops.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return ops.reshape(x, (-1, wd * wh * ww, C))


def _merge(tokens: Tensor, window, shape) -> Tensor:
    B, D, H, W, C = shape
    wd, wh, ww = window
    x = ops.reshape(tokens, (B, D // wd, H // wh, W // ww, wd, wh, ww, C))
    x = ops.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return ops.reshape(x, shape)


def _shift_mask(extents, window, shift) -> np.ndarray | None:
    if not any(shift):
        return None
    labels = _window_labels(extents, window, shift)
    lab = labels.reshape(extents[0] // window[0], window[0], extents[1] // window[1], window[1],
                         extents[2] // window[2], window[2])
    lab = lab.transpose(0, 2, 4, 1, 3, 5).reshape(-1, int(np.prod(window)))
    same = lab[:, :, None] == lab[:, None, :]
    return np.where(same, 0.0, -100.0)


def windowed_attention(x, window, heads: int, shift: bool, params: dict, prefix: str = "",
                       channels_last: bool = True) -> Tensor:
    """Multi-head self-attention inside non-overlapping 3D windows.

    ``params`` holds ``{prefix}qkv.w/b`` ([C, 3C]) and ``{prefix}proj.w/b``.
    With ``shift`` the grid is rolled by half a window first (and back after),
    and tokens that wrapped around only attend to their own region.
    """
    x = as_tensor(x)
    if not channels_last:
        x = ops.transpose(x, (0, 2, 3, 4, 1))
    B, D, H, W, C = x.shape
    extents = (D, H, W)
    if any(e % w for e, w in zip(extents, window)):
        raise ShapeError(f"extents {extents} not divisible by window {tuple(window)}")
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    window = tuple(window)
    shifts = tuple(w // 2 if (shift and w < e) else 0 for w, e in zip(window, extents))
    h = ops.roll(x, [-s for s in shifts], (1, 2, 3)) if any(shifts) else x
    tok = _partition(h, window)
    nwin_total, T, _ = tok.shape
    hd = C // heads
    qkv = ops.linear(tok, params[prefix + "qkv.w"], params[prefix + "qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (nwin_total, T, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    mask = _shift_mask(extents, window, shifts)
    if mask is not None:
        nwin = mask.shape[0]
        logits = ops.reshape(logits, (B, nwin, heads, T, T)) + mask[None, :, None].astype(logits.dtype)
        logits = ops.reshape(logits, (nwin_total, heads, T, T))
    attn = ops.softmax(logits, axis=-1)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (nwin_total, T, C))
    out = ops.linear(out, params[prefix + "proj.w"], params[prefix + "proj.b"])
    out = _merge(out, window, (B, D, H, W, C))
    if any(shifts):
        out = ops.roll(out, shifts, (1, 2, 3))
    if not channels_last:
        out = ops.transpose(out, (0, 4, 1, 2, 3))
    return out


def attention_block(x, params, name, window, heads, shift):
    """Pre-norm transformer block: windowed attention then a two-layer MLP."""
    h = ops.layer_norm(x, params[name + ".norm1.g"], params[name + ".norm1.b"])
    x = x + windowed_attention(h, window, heads, shift, params, prefix=name + ".")
    h = ops.layer_norm(x, params[name + ".norm2.g"], params[name + ".norm2.b"])
    h = ops.linear(ops.silu(ops.linear(h, params[name + ".mlp1.w"], params[name + ".mlp1.b"])),
                   params[name + ".mlp2.w"], params[name + ".mlp2.b"])
    return x + h


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def denoise_forward(x_n, cond, n, params: dict[str, Tensor], config: DenoiserConfig) -> DenoiserOutput:
    """Predict (eps, v) for noisy patches ``x_n`` [B,X,Y,Z] given ``cond`` at steps ``n``."""
    x_n, cond = as_tensor(x_n), as_tensor(cond)
    if x_n.shape != cond.shape:
        raise ShapeError(f"noisy patch {x_n.shape} and condition {cond.shape} differ")
    if x_n.ndim != 4:
        raise ShapeError(f"expected [B, X, Y, Z] patches, got {x_n.shape}")
    config.check_patch(x_n.shape[1:])
    B = x_n.shape[0]
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), (B,))
    if np.any(n < 0):
        raise ValueError("timesteps must be >= 0")
    g = config.groups
    emb = time_embed(n, config.time_width, params, dtype=x_n.dtype)
    h = ops.concat([ops.reshape(x_n, x_n.shape + (1,)), ops.reshape(cond, cond.shape + (1,))], axis=-1)
    h = _conv(h, params, "conv_in")
    skips = []
    for i in range(config.levels - 1):
        h = res_block(h, emb, params, f"enc{i}", g)
        skips.append(h)
        h = _conv(h, params, f"down{i}", stride=2)
    h = res_block(h, emb, params, "mid.res1", g)
    window = attention_window(h.shape[1:4], config.window)
    h = attention_block(h, params, "mid.attn1", window, config.heads, shift=False)
    h = attention_block(h, params, "mid.attn2", window, config.heads, shift=True)
    h = res_block(h, emb, params, "mid.res2", g)
    for i in reversed(range(config.levels - 1)):
        h = ops.upsample_nearest(_conv(h, params, f"up{i}"), (2, 2, 2), axes=(1, 2, 3))
        h = ops.concat([h, skips[i]], axis=-1)
        h = res_block(h, emb, params, f"dec{i}", g)
    h = _conv(ops.silu(_gn(h, params, "out.norm", g)), params, "out.conv")
    eps = h[..., 0]
    v = ops.sigmoid(h[..., 1])
    return DenoiserOutput(eps, v)


@dataclass
class Denoiser:
    """Parameters plus config; calling it runs :func:`denoise_forward`."""

    config: DenoiserConfig = field(default_factory=DenoiserConfig)
    params: dict[str, Tensor] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config, self.seed)

    def __call__(self, x_n, cond, n) -> DenoiserOutput:
        return denoise_forward(x_n, cond, n, self.params, self.config)

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        expected = init_params(self.config, 0)
        missing = [k for k in expected if prefix + k not in arrays]
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint is missing parameters: {missing[:5]}")
        params = {}
        for k, ref in expected.items():
            arr = arrays[prefix + k]
            if arr.shape != ref.shape:
                raise checkpoint.CheckpointError(f"parameter '{k}' has shape {arr.shape}, expected {ref.shape}")
            params[k] = Tensor(arr.astype(np.float32), requires_grad=True, name=k)
        self.params = params
