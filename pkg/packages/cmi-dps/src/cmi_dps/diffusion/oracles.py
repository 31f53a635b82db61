"""Independent ground truth for the sampler and the CMI engine.

Nothing here reuses the engine's algebra: the conjugate posterior uses the
Kalman-gain form, the Monte-Carlo oracle reweights prior draws, and the
derivative oracles are plain central differences.  :func:`metrics` scores a
reconstruction against the ground truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from cmi_dps.diffusion.linalg import chol_solve, cholesky, symmetrize
from cmi_dps.exceptions import ConfigurationError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.random import Generator

    from cmi_dps.diffusion.base import LinearOperator
    from cmi_dps.diffusion.operators import NoiseModel
    from cmi_dps.diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

MIN_MC_SAMPLES = 1_000
MIN_EFFECTIVE_SAMPLES = 50.0

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, i.e. an 11-tap window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True, eq=False)
class GaussianDist:
    """A Gaussian with SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.array(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            msg = f"covariance shape {cov.shape} does not match mean {mean.shape}"
            raise ShapeError(msg)
        cholesky(cov, "Gaussian covariance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True, eq=False)
class MonteCarloMoments:
    """Self-normalised importance-sampling moments of ``p(x0 | x_t)``.

    Attributes:
        mean: Weighted mean.
        cov: Weighted covariance.
        ess: Effective sample size ``1 / sum(w**2)``.
        unreliable: ``True`` when ``ess`` fell below the reliability floor.
    """

    mean: np.ndarray
    cov: np.ndarray
    ess: float
    unreliable: bool


def conjugate_gaussian_posterior(
    prior: GaussianDist, A: LinearOperator, noise: NoiseModel, y: np.ndarray
) -> GaussianDist:
    """Exact posterior of ``x ~ prior`` given ``y = A x + n``.

    Uses the Kalman update ``K = C A^T S^{-1}`` with innovation covariance
    ``S = A C A^T + Sigma_n``.
    """
    y = np.asarray(y, dtype=np.float64)
    if A.in_dim != prior.mean.size or y.shape != (A.out_dim,):
        msg = (
            f"inconsistent dimensions: prior d={prior.mean.size}, "
            f"operator {A.out_dim}x{A.in_dim}, y {y.shape}"
        )
        raise ShapeError(msg)
    if A.out_dim == 0:
        return prior
    dense = A.to_dense()
    cross = prior.cov @ dense.T
    innovation = symmetrize(dense @ cross + noise.covariance())
    chol = cholesky(innovation, "innovation covariance")
    gain = chol_solve(chol, cross.T).T
    mean = prior.mean + gain @ (y - dense @ prior.mean)
    cov = symmetrize(prior.cov - gain @ innovation @ gain.T)
    return GaussianDist(mean, cov)


def mc_posterior_moments(
    prior_sampler: Callable[[Generator, int], np.ndarray],
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    n_samples: int,
    rng: Generator,
) -> MonteCarloMoments:
    """Estimate the mean and covariance of ``p(x0 | x_t)`` by importance sampling.

    Prior draws are weighted by ``N(x_t; sqrt(a) x0, (1 - a) I)``.

    Args:
        prior_sampler: ``(rng, n) -> (n, d)`` prior draws, e.g.
            :meth:`GaussianMixturePrior.sample`.
        schedule: Noise schedule.
        x_t: Conditioning state.
        t: Diffusion step.
        n_samples: Number of prior draws, at least 1000.
        rng: Seeded stream.

    Raises:
        ConfigurationError: If ``n_samples < 1000``.
    """
    if n_samples < MIN_MC_SAMPLES:
        msg = f"n_samples must be >= {MIN_MC_SAMPLES}, got {n_samples}"
        raise ConfigurationError(msg)
    x_t = np.asarray(x_t, dtype=np.float64)
    alpha_bar = schedule.alpha_bar(t)
    draws = np.asarray(prior_sampler(rng, n_samples), dtype=np.float64)
    sq = np.sum((x_t - math.sqrt(alpha_bar) * draws) ** 2, axis=1)
    log_w = -0.5 * sq / (1.0 - alpha_bar)
    weights = np.exp(log_w - logsumexp(log_w))
    mean = weights @ draws
    centred = draws - mean
    cov = symmetrize((centred * weights[:, None]).T @ centred)
    ess = float(1.0 / np.sum(weights**2))
    unreliable = ess < MIN_EFFECTIVE_SAMPLES
    if unreliable:
        logger.warning(
            "Importance-sampling estimate unreliable: ESS %.1f from %d draws",
            ess,
            n_samples,
        )
    return MonteCarloMoments(mean=mean, cov=cov, ess=ess, unreliable=unreliable)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar field."""
    if not h > 0.0:
        msg = f"finite-difference step must be > 0, got {h}"
        raise ConfigurationError(msg)
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for k, e in enumerate(np.eye(x.size)):
        grad[k] = (f(x + h * e) - f(x - h * e)) / (2.0 * h)
    return grad


def finite_diff_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian; column ``k`` differentiates along ``e_k``.

    ``f`` may return an array of any shape; the result stacks the
    derivative along a new trailing axis.
    """
    if not h > 0.0:
        msg = f"finite-difference step must be > 0, got {h}"
        raise ConfigurationError(msg)
    x = np.asarray(x, dtype=np.float64)
    columns = [
        (np.asarray(f(x + h * e)) - np.asarray(f(x - h * e))) / (2.0 * h)
        for e in np.eye(x.size)
    ]
    return np.stack(columns, axis=-1)


# ---------------------------------------------------------------------------
# Reconstruction metrics
# ---------------------------------------------------------------------------


def psnr(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """PSNR in dB for data range 1, after clamping to ``[0, 1]``; ``inf`` if equal."""
    err = float(np.mean((np.clip(x_hat, 0.0, 1.0) - np.clip(x_true, 0.0, 1.0)) ** 2))
    if err == 0.0:
        return math.inf
    return -10.0 * math.log10(err)


def ssim(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """Mean SSIM of two ``[0, 1]``-clamped images with an 11-tap Gaussian window."""
    x = np.clip(np.asarray(x_hat, dtype=np.float64), 0.0, 1.0)
    y = np.clip(np.asarray(x_true, dtype=np.float64), 0.0, 1.0)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def window(image: np.ndarray) -> np.ndarray:
        return gaussian_filter(
            image, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect"
        )

    mu_x, mu_y = window(x), window(y)
    var_x = window(x * x) - mu_x * mu_x
    var_y = window(y * y) - mu_y * mu_y
    cov_xy = window(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def metrics(
    x_hat: np.ndarray,
    x_true: np.ndarray,
    image_dims: tuple[int, int] | None = None,
) -> dict[str, float]:
    """Score a reconstruction.

    Args:
        x_hat: Reconstruction.
        x_true: Ground truth of the same length.
        image_dims: ``(height, width)``; when given, SSIM is included.

    Returns:
        ``{"mse", "psnr"}`` plus ``"ssim"`` for grid-shaped data.

    Raises:
        ShapeError: If the inputs differ in shape or do not fit ``image_dims``.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.shape != x_true.shape:
        msg = f"shape mismatch: {x_hat.shape} vs {x_true.shape}"
        raise ShapeError(msg)
    result = {
        "mse": float(np.mean((x_hat - x_true) ** 2)),
        "psnr": psnr(x_hat, x_true),
    }
    if image_dims is not None:
        height, width = image_dims
        if height * width != x_true.size:
            msg = f"{x_true.size} values do not fill a {height}x{width} grid"
            raise ShapeError(msg)
        result["ssim"] = ssim(
            x_hat.reshape(height, width), x_true.reshape(height, width)
        )
    return result
