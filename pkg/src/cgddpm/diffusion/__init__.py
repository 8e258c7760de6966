from .process import (
    DenoiserOutput,
    ReverseMoments,
    cycle_loss,
    ddpm_loss,
    ddpm_terms,
    discretized_gaussian_nll,
    extract_latent,
    forward_chain,
    kl_normal,
    model_mean,
    model_variance,
    posterior_moments,
    predict_x0_from_eps,
    q_sample,
    reverse_step,
    vlb_term,
)
from .samplers import LatentTrace, mc_sample, replay_trace, sample_ancestral, sample_cycle_guided, sample_ddim
from .schedule import DiffusionSchedule, TimestepMap, make_schedule, respace_schedule
