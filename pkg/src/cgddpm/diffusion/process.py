"""Forward process, reverse-step moments, latent codes and losses.

Patches are arrays or tensors shaped [B, X, Y, Z] (or any shape whose
leading axis is the batch when ``n`` is given per sample). Timesteps are
1-based; ``n`` may be a scalar or an integer array with one entry per
sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..rng import CHAIN, Streams, randn
from ..tensor import Tensor, as_tensor, ops
from .schedule import DiffusionSchedule


@dataclass
class DenoiserOutput:
    eps: Tensor
    v: Tensor


@dataclass
class ReverseMoments:
    mu: Tensor
    var: Tensor  # Gaussian variance, not standard deviation


def _coef(values, like) -> np.ndarray:
    """Shape per-sample coefficients to broadcast against ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (len(like.shape) - 1))


def q_sample(x0, n, eps, s: DiffusionSchedule) -> Tensor:
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    ab = s.at("alpha_bar", s.check_step(n))
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def forward_chain(x0, s: DiffusionSchedule, streams: list[Streams], dtype=np.float32) -> list[np.ndarray]:
    """Run the Markov chain x_n = sqrt(1-beta_n) x_{n-1} + sqrt(beta_n) e_n.

    Returns [x_1, ..., x_N]; step n draws from stream key (CHAIN, n).
    """
    x = np.asarray(x0, dtype=dtype)
    out = []
    for n in range(1, s.N + 1):
        e = randn(streams, (CHAIN, n), x.shape[1:], dtype)
        b = s.betas[n - 1]
        x = (math.sqrt(1.0 - b) * x + math.sqrt(b) * e).astype(dtype)
        out.append(x)
    return out


def posterior_moments(x0, xn, n, s: DiffusionSchedule) -> ReverseMoments:
    x0, xn = as_tensor(x0), as_tensor(xn)
    n = s.check_step(n)
    ab = s.at("alpha_bar", n)
    ab_prev = s.at("alpha_bar_prev", n)
    beta = s.at("betas", n)
    alpha = s.at("alphas", n)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    cn = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    mean = _coef(c0, x0) * x0 + _coef(cn, xn) * xn
    var = np.broadcast_to(_coef(s.at("beta_tilde", n), xn), xn.shape).astype(xn.dtype)
    return ReverseMoments(mean, Tensor(var))


def model_mean(xn, eps_pred, n, s: DiffusionSchedule) -> Tensor:
    """(x_n - beta_n / sqrt(1 - alpha_bar_n) * eps) / sqrt(alpha_n)."""
    xn, eps_pred = as_tensor(xn), as_tensor(eps_pred)
    if xn.shape != eps_pred.shape:
        raise ValueError(f"x_n and eps shapes differ: {xn.shape} vs {eps_pred.shape}")
    n = s.check_step(n)
    beta = s.at("betas", n)
    ab = s.at("alpha_bar", n)
    alpha = s.at("alphas", n)
    return _coef(1.0 / np.sqrt(alpha), xn) * (xn - _coef(beta / np.sqrt(1.0 - ab), xn) * eps_pred)


def model_variance(v, n, s: DiffusionSchedule) -> Tensor:
    """exp(v log beta_n + (1 - v) log beta_tilde_n), log beta_tilde clipped at n=1."""
    v = as_tensor(v)
    if np.any(v.data < 0) or np.any(v.data > 1):
        raise ValueError("variance coefficient outside [0, 1]")
    n = s.check_step(n)
    lb = _coef(s.at("log_beta", n), v)
    lbt = _coef(s.at("log_beta_tilde_clipped", n), v)
    return ops.exp(v * lb + (1.0 - v) * lbt)


def predict_x0_from_eps(xn, eps_pred, n, s: DiffusionSchedule, clip: bool = True) -> Tensor:
    xn, eps_pred = as_tensor(xn), as_tensor(eps_pred)
    n = s.check_step(n)
    ab = s.at("alpha_bar", n)
    x0 = (xn - _coef(np.sqrt(1.0 - ab), xn) * eps_pred) * _coef(1.0 / np.sqrt(ab), xn)
    if clip:
        x0 = Tensor(np.clip(x0.data, -1.0, 1.0))
    return x0


def reverse_step(moments: ReverseMoments, z) -> Tensor:
    """mu + sqrt(var) * z."""
    z = as_tensor(z)
    if z.shape != moments.mu.shape:
        raise ValueError(f"latent shape {z.shape} does not match mean shape {moments.mu.shape}")
    if np.any(moments.var.data <= 0):
        raise ValueError("reverse variance must be positive")
    return moments.mu + ops.sqrt(moments.var) * z


STD_FLOOR = 1e-10


def extract_latent(x_prev, moments: ReverseMoments) -> Tensor:
    """(x_prev - mu) / sqrt(var), the code that reverse_step would need to land on x_prev."""
    x_prev = as_tensor(x_prev)
    std = ops.maximum(ops.sqrt(moments.var), STD_FLOOR)
    return (x_prev - moments.mu) / std


def kl_normal(mu1, var1, mu2, var2, reduce: bool = True) -> Tensor:
    """KL(N(mu1, var1) || N(mu2, var2)) per element, averaged unless ``reduce`` is False."""
    mu1, var1, mu2, var2 = (as_tensor(t) for t in (mu1, var1, mu2, var2))
    if np.any(var1.data <= 0) or np.any(var2.data <= 0):
        raise ValueError("variances must be positive")
    d = mu1 - mu2
    kl = 0.5 * (ops.log(var2) - ops.log(var1) + (var1 + d * d) / var2 - 1.0)
    return ops.mean(kl) if reduce else kl


def discretized_gaussian_nll(x0, mean, var) -> Tensor:
    """-log P(x0) with P the Gaussian mass of x0's bin among 256 bins on [-1, 1].

    Edge bins extend to +-infinity. Returned per element.
    """
    x0 = np.asarray(as_tensor(x0).data)
    mean, var = as_tensor(mean), as_tensor(var)
    inv_std = 1.0 / ops.sqrt(var)
    centered = x0 - mean
    half = 1.0 / 255.0
    cdf_plus = ops.normal_cdf((centered + half) * inv_std)
    cdf_min = ops.normal_cdf((centered - half) * inv_std)
    log_cdf_plus = ops.log(ops.maximum(cdf_plus, 1e-12))
    log_one_minus_cdf_min = ops.log(ops.maximum(1.0 - cdf_min, 1e-12))
    log_delta = ops.log(ops.maximum(cdf_plus - cdf_min, 1e-12))
    low = (x0 < -0.999).astype(mean.dtype)
    high = (x0 > 0.999).astype(mean.dtype)
    mid = 1.0 - low - high
    return -(low * log_cdf_plus + high * log_one_minus_cdf_min + mid * log_delta)


def _per_sample_mean(t: Tensor) -> Tensor:
    return ops.mean(t, axis=tuple(range(1, t.ndim))) if t.ndim > 1 else t


def vlb_term(x0, xn, n, out: DenoiserOutput, s: DiffusionSchedule) -> Tensor:
    """Variational bound term for one step, trained through the variance head only.

    KL(posterior || model) for n > 1, discretized NLL of x0 for n = 1.
    ``n`` is a scalar or per-sample array; the result is the batch mean.
    """
    x0, xn = as_tensor(x0), as_tensor(xn)
    n_arr = np.broadcast_to(s.check_step(n), (xn.shape[0],)) if np.ndim(n) else s.check_step(n)
    post = posterior_moments(x0, xn, n, s)
    mu_model = model_mean(xn, ops.detach(out.eps), n, s)
    var_model = model_variance(out.v, n, s)
    is_first = np.asarray(n_arr) == 1
    # posterior variance at n=1 is 0; substitute the clipped value (masked out anyway)
    var_post = Tensor(np.broadcast_to(np.exp(_coef(s.at("log_beta_tilde_clipped", n), xn)), xn.shape).astype(xn.dtype))
    kl = _per_sample_mean(kl_normal(post.mu, var_post, mu_model, var_model, reduce=False))
    if not np.any(is_first):
        return ops.mean(kl)
    nll = _per_sample_mean(discretized_gaussian_nll(x0, mu_model, var_model))
    if np.ndim(n) == 0:
        return ops.mean(nll)
    w_first = is_first.astype(xn.dtype)
    return ops.mean(kl * (1.0 - w_first) + nll * w_first)


def ddpm_terms(x0, xn, n, eps, out: DenoiserOutput, s: DiffusionSchedule) -> tuple[Tensor, Tensor]:
    """(MAE between true and predicted noise, VLB term)."""
    return ops.mae(out.eps, eps), vlb_term(x0, xn, n, out, s)


def ddpm_loss(x0, cond, n, eps, net, s: DiffusionSchedule, gamma: float = 0.05) -> Tensor:
    """MAE(eps, eps_pred) + gamma * VLB for noisy input q_sample(x0, n, eps)."""
    xn = q_sample(x0, n, eps, s)
    out = net(xn, cond, n)
    l1, vlb = ddpm_terms(x0, xn, n, eps, out, s)
    return l1 + gamma * vlb


def cycle_loss(pairs) -> Tensor:
    """Sum of MAE(estimate, truth) over the (x, y) pairs."""
    total = None
    for est, truth in pairs:
        est, truth = as_tensor(est), as_tensor(truth)
        if est.shape != truth.shape:
            raise ValueError(f"cycle pair shapes differ: {est.shape} vs {truth.shape}")
        term = ops.mae(est, truth)
        total = term if total is None else total + term
    return total
