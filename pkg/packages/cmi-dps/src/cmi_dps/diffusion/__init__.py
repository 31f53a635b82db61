"""Diffusion posterior sampling with conditional-mutual-information guidance.

The library is built around closed-form Gaussian-mixture priors, for which
the score and its second and third derivatives are exact:

- ``schedule`` builds the discrete variance-preserving noise schedule;
- ``score_models`` provides scores, Hessian-vector products and third-order
  contractions;
- ``operators`` holds the linear measurement operators and noise models;
- ``cmi`` evaluates the CMI and its exact or Hutchinson-estimated gradient;
- ``samplers`` runs DDPM, DPS, PiGDM and their CMI-guided variants;
- ``oracles`` supplies independent ground truth and reconstruction metrics.

Steps are 1-based, ``t in 1..N``; ``t = 0`` denotes clean data.
"""

from __future__ import annotations

from cmi_dps.diffusion.base import LinearOperator, ScoreModel
from cmi_dps.diffusion.cmi import (
    CmiEvaluation,
    MeasurementPosterior,
    PosteriorMoments,
    cmi_grad_exact,
    cmi_grad_hutchinson,
    cmi_value,
    contract1,
    contract2,
    evaluate_cmi,
    gaussian_entropy,
    grad_sigma_post,
    grad_sigma_post_y,
    measurement_posterior_cov,
    posterior_cov,
    posterior_moments,
    trace_slices,
)
from cmi_dps.diffusion.operators import (
    NoiseModel,
    make_box_mask,
    make_downsample,
    make_gaussian_blur,
    make_random_mask,
    measure,
)
from cmi_dps.diffusion.oracles import (
    GaussianDist,
    conjugate_gaussian_posterior,
    finite_diff_grad,
    mc_posterior_moments,
    metrics,
)
from cmi_dps.diffusion.samplers import (
    GuidanceConfig,
    RunRecord,
    ddpm_ancestral_step,
    dps_correction,
    pigdm_correction,
    sample,
)
from cmi_dps.diffusion.schedule import NoiseSchedule, build_schedule, forward_marginal
from cmi_dps.diffusion.score_models import (
    GaussianMixturePrior,
    GaussianMixtureScore,
    dense_third_tensor,
    finite_diff_wrap,
    gmm_hessian,
    gmm_score,
    hvp,
    third_bilinear_grad,
    tweedie_denoise,
)

__all__ = [
    "CmiEvaluation",
    "GaussianDist",
    "GaussianMixturePrior",
    "GaussianMixtureScore",
    "GuidanceConfig",
    "LinearOperator",
    "MeasurementPosterior",
    "NoiseModel",
    "NoiseSchedule",
    "PosteriorMoments",
    "RunRecord",
    "ScoreModel",
    "build_schedule",
    "cmi_grad_exact",
    "cmi_grad_hutchinson",
    "cmi_value",
    "conjugate_gaussian_posterior",
    "contract1",
    "contract2",
    "ddpm_ancestral_step",
    "dense_third_tensor",
    "dps_correction",
    "evaluate_cmi",
    "finite_diff_grad",
    "finite_diff_wrap",
    "forward_marginal",
    "gaussian_entropy",
    "gmm_hessian",
    "gmm_score",
    "grad_sigma_post",
    "grad_sigma_post_y",
    "hvp",
    "make_box_mask",
    "make_downsample",
    "make_gaussian_blur",
    "make_random_mask",
    "mc_posterior_moments",
    "measure",
    "measurement_posterior_cov",
    "metrics",
    "pigdm_correction",
    "posterior_cov",
    "posterior_moments",
    "sample",
    "third_bilinear_grad",
    "trace_slices",
    "tweedie_denoise",
]
