"""Reward fine-tuning of toy diffusion and flow models by generalized
rejection sampling, with noise-level correction for flows and the
diagnostics that explain when partial fine-tuning helps."""

from .diagnostics import AnalyticMixture, analytic_mixture_score, conditional_variance_curve, rollout_histogram_test, score_energy
from .diffusion import (NoiseSchedule, dsm_loss, pgraft_training_pair, recalibrate_schedule,
                        sample_stitched, sample_trajectory)
from .flow import bwd_euler, fwd_euler, gauss_velocity, rf_loss, rf_train_target
from .inverse_noise import (build_inverse_dataset, corrected_sample, distribution_distance,
                            dpi_identity_check, velocity_kl_identity_check)
from .numerics import FieldModel, finite_difference_grad, optimizer_step, rng_stream
from .pipelines import pgraft_sample, run_graft, run_pgraft_train
from .rejection import (BinaryDedup, Classical, Preference, RewardedBatch, TopK, classical_accept,
                        dedup_binary_accept, empirical_cdf, mc_reshaped_reward, pgrs_accept,
                        preference_reshaped_reward, topk_reshaped_reward, topk_select)

__all__ = [
    "AnalyticMixture",
    "BinaryDedup",
    "Classical",
    "FieldModel",
    "NoiseSchedule",
    "Preference",
    "RewardedBatch",
    "TopK",
    "analytic_mixture_score",
    "build_inverse_dataset",
    "bwd_euler",
    "classical_accept",
    "conditional_variance_curve",
    "corrected_sample",
    "dedup_binary_accept",
    "distribution_distance",
    "dpi_identity_check",
    "dsm_loss",
    "empirical_cdf",
    "finite_difference_grad",
    "fwd_euler",
    "gauss_velocity",
    "mc_reshaped_reward",
    "optimizer_step",
    "pgraft_sample",
    "pgraft_training_pair",
    "pgrs_accept",
    "preference_reshaped_reward",
    "recalibrate_schedule",
    "rf_loss",
    "rf_train_target",
    "rng_stream",
    "rollout_histogram_test",
    "run_graft",
    "run_pgraft_train",
    "sample_stitched",
    "sample_trajectory",
    "score_energy",
    "velocity_kl_identity_check",
    "topk_reshaped_reward",
    "topk_select",
]

__version__ = "0.1.0"
