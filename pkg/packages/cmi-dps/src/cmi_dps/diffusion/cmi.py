"""Conditional mutual information between ``x0`` and ``y`` given ``x_t``.

With ``p(x0 | x_t)`` treated as Gaussian, Tweedie's formula gives its
covariance from the score Hessian ``H``::

    Sigma_post = (1 - a) / a * (I + (1 - a) H),      a = alpha_bar_t

and a linear-Gaussian measurement ``y = A x0 + n`` updates it to
``Sigma_post_y = (Sigma_post^{-1} + A^T Sigma_n^{-1} A)^{-1}``.  The CMI is
``0.5 * (logdet Sigma_post - logdet Sigma_post_y)``.

Its gradient in ``x_t`` needs the third derivative of ``log p_t``.  The
exact path materialises that rank-3 tensor; the Hutchinson path only
contracts it against random Rademacher probes through
:meth:`~cmi_dps.diffusion.base.ScoreModel.third_bilinear_grad`.

Tensor conventions: a ``Tensor3`` is a ``(d, d, d)`` array whose last index
is the slice index ``k``; ``contract1(E, F)[:, :, k] = E @ F[:, :, k]`` and
``contract2(F, E)[:, :, k] = F[:, :, k] @ E``.  No explicit inverse is ever
formed; every ``Sigma^{-1}`` product is a Cholesky solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from cmi_dps.diffusion.base import (
    DEFAULT_DENSE_LIMIT,
    DEFAULT_TENSOR_LIMIT,
    check_tensor_limit,
)
from cmi_dps.diffusion.linalg import (
    chol_solve,
    cholesky,
    logdet,
    logdet_spd,
    symmetrize,
)
from cmi_dps.diffusion.score_models import tweedie_denoise
from cmi_dps.exceptions import ConfigurationError, DegenerateStepError, ShapeError

if TYPE_CHECKING:
    from numpy.random import Generator

    from cmi_dps.diffusion.base import LinearOperator, ScoreModel
    from cmi_dps.diffusion.operators import NoiseModel
    from cmi_dps.diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

JITTER_EPS = 1e-8
_LOG_2PI_E = math.log(2.0 * math.pi * math.e)

GradientMethod = Literal["exact", "hutchinson"]


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


class PosteriorCovariance(NamedTuple):
    """``Sigma_post`` and the diagonal jitter added to keep it SPD."""

    matrix: np.ndarray
    jitter: float


@dataclass(frozen=True, eq=False)
class PosteriorMoments:
    """Gaussian approximation of ``p(x0 | x_t)``.

    Attributes:
        mu_post: Tweedie mean.
        sigma_post: Posterior covariance.
        sigma_post_chol: Lower Cholesky factor of ``sigma_post``.
        t: Diffusion step.
        jitter: Amount added to ``I + (1 - a) H`` before scaling; ``0.0``
            when no regularisation was needed.
    """

    mu_post: np.ndarray
    sigma_post: np.ndarray
    sigma_post_chol: np.ndarray
    t: int
    jitter: float = 0.0

    @property
    def jitter_applied(self) -> bool:
        return self.jitter > 0.0


@dataclass(frozen=True, eq=False)
class MeasurementPosterior:
    """``Sigma_post_y`` together with the measurement that produced it.

    Attributes:
        sigma_post_y: Covariance of ``p(x0 | x_t, y)``.
        sigma_post_y_chol: Its lower Cholesky factor.
        information: ``A^T Sigma_n^{-1} A`` as a dense ``d x d`` matrix.
        operator: The measurement operator ``A``.
        noise: The measurement noise model.
    """

    sigma_post_y: np.ndarray
    sigma_post_y_chol: np.ndarray
    information: np.ndarray
    operator: LinearOperator
    noise: NoiseModel


@dataclass(frozen=True, eq=False)
class CmiEvaluation:
    """Everything one CMI guidance step computes at ``(x_t, t)``.

    Attributes:
        gradient: Exact or estimated ``grad_{x_t} I(x0; y | x_t)``.
        value: The CMI in nats.
        jitter: Jitter applied to ``Sigma_post``.
        probe_estimates: ``(r, d)`` single-probe estimates on the
            Hutchinson path, ``None`` on the exact path.
    """

    gradient: np.ndarray
    value: float
    jitter: float
    probe_estimates: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Covariances and entropies
# ---------------------------------------------------------------------------


def posterior_cov(
    hessian: np.ndarray, schedule: NoiseSchedule, t: int, eps: float = JITTER_EPS
) -> PosteriorCovariance:
    """Tweedie covariance ``(1 - a)/a * (I + (1 - a) H)``.

    If ``I + (1 - a) H`` has an eigenvalue below ``eps`` it is shifted by
    ``(eps - lambda_min) I``; the shift is returned as ``jitter``.

    Raises:
        DegenerateStepError: If ``alpha_bar_t`` is zero.
        ShapeError: If ``hessian`` is not square.
    """
    hessian = np.asarray(hessian, dtype=np.float64)
    if hessian.ndim != 2 or hessian.shape[0] != hessian.shape[1]:
        msg = f"hessian must be square, got shape {hessian.shape}"
        raise ShapeError(msg)
    alpha_bar = schedule.alpha_bar(t)
    if alpha_bar <= 0.0:
        msg = f"alpha_bar_{t} is zero; posterior covariance undefined"
        raise DegenerateStepError(msg)
    d = hessian.shape[0]
    inner = np.eye(d) + (1.0 - alpha_bar) * symmetrize(hessian)
    jitter = 0.0
    lam_min = float(np.linalg.eigvalsh(inner)[0])
    if lam_min < eps:
        jitter = eps - lam_min
        inner = inner + jitter * np.eye(d)
        logger.warning(
            "Sigma_post indefinite at t=%d (lambda_min=%.3e); added jitter %.3e",
            t,
            lam_min,
            jitter,
        )
    return PosteriorCovariance((1.0 - alpha_bar) / alpha_bar * inner, jitter)


def posterior_moments(
    model: ScoreModel, schedule: NoiseSchedule, x_t: np.ndarray, t: int
) -> PosteriorMoments:
    """Tweedie mean, ``Sigma_post`` and its factor at ``(x_t, t)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    sigma, jitter = posterior_cov(model.hessian(x_t, t), schedule, t)
    return PosteriorMoments(
        mu_post=tweedie_denoise(model, schedule, x_t, t),
        sigma_post=sigma,
        sigma_post_chol=cholesky(sigma, "Sigma_post"),
        t=t,
        jitter=jitter,
    )


def _information(
    A: LinearOperator, noise: NoiseModel, d: int, limit: int
) -> np.ndarray:
    if A.in_dim != d:
        msg = f"operator input dimension {A.in_dim} does not match d={d}"
        raise ShapeError(msg)
    if A.out_dim == 0:
        return np.zeros((d, d))
    if noise.dim != A.out_dim:
        msg = f"noise dimension {noise.dim} does not match operator output {A.out_dim}"
        raise ShapeError(msg)
    dense = A.to_dense(limit)
    return symmetrize(dense.T @ noise.solve(dense))


def measurement_posterior_cov(
    sigma_post: np.ndarray,
    A: LinearOperator,
    noise: NoiseModel,
    limit: int = DEFAULT_DENSE_LIMIT,
) -> MeasurementPosterior:
    """Kalman update of ``Sigma_post`` by the measurement ``(A, Sigma_n)``.

    Computed in information form: with ``Sigma_post = L L^T`` and
    ``F = A^T Sigma_n^{-1} A``, ``Sigma_post_y = L (I + L^T F L)^{-1} L^T``.

    Raises:
        FactorizationError: If ``sigma_post`` is not SPD.
        DenseLimitError: If ``A`` is too large to materialise.
    """
    sigma_post = np.asarray(sigma_post, dtype=np.float64)
    d = sigma_post.shape[0]
    chol = cholesky(sigma_post, "Sigma_post")
    info = _information(A, noise, d, limit)
    inner = np.eye(d) + chol.T @ info @ chol
    inner_chol = cholesky(symmetrize(inner), "I + L^T F L")
    half = solve_triangular(inner_chol, chol.T, lower=True)
    sigma_post_y = symmetrize(half.T @ half)
    return MeasurementPosterior(
        sigma_post_y=sigma_post_y,
        sigma_post_y_chol=cholesky(sigma_post_y, "Sigma_post_y"),
        information=info,
        operator=A,
        noise=noise,
    )


def cmi_value(sigma_post: np.ndarray, sigma_post_y: np.ndarray) -> float:
    """``0.5 * (logdet Sigma_post - logdet Sigma_post_y)`` in nats."""
    return 0.5 * (
        logdet_spd(sigma_post, "Sigma_post")
        - logdet_spd(sigma_post_y, "Sigma_post_y")
    )


def cmi_value_measurement_space(
    sigma_post: np.ndarray, A: LinearOperator, noise: NoiseModel
) -> float:
    """The same CMI evaluated in measurement space.

    ``0.5 * logdet(A Sigma_post A^T + Sigma_n) - 0.5 * logdet(Sigma_n)``,
    equal to :func:`cmi_value` by the determinant lemma.
    """
    if A.out_dim == 0:
        return 0.0
    dense = A.to_dense()
    predicted = dense @ np.asarray(sigma_post, dtype=np.float64) @ dense.T
    predicted = symmetrize(predicted + noise.covariance())
    chol = cholesky(predicted, "A Sigma_post A^T + Sigma_n")
    return 0.5 * (logdet(chol) - noise.logdet())


def gaussian_entropy(sigma: np.ndarray) -> float:
    """Differential entropy ``0.5 * logdet(2 pi e Sigma)`` in nats."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    return 0.5 * (d * _LOG_2PI_E + logdet_spd(sigma, "covariance"))


# ---------------------------------------------------------------------------
# Tensor contractions
# ---------------------------------------------------------------------------


def _check_pair(
    matrix: np.ndarray, tensor: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    matrix = np.asarray(matrix, dtype=np.float64)
    tensor = np.asarray(tensor, dtype=np.float64)
    d = tensor.shape[0]
    if tensor.shape != (d, d, d) or matrix.shape != (d, d):
        msg = f"incompatible shapes: matrix {matrix.shape}, tensor {tensor.shape}"
        raise ShapeError(msg)
    return matrix, tensor


def contract1(E: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Slice-wise left product ``E @ F[:, :, k]``."""
    E, F = _check_pair(E, F)
    return np.einsum("ia,ajk->ijk", E, F)


def contract2(F: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Slice-wise right product ``F[:, :, k] @ E``."""
    E, F = _check_pair(E, F)
    return np.einsum("ibk,bj->ijk", F, E)


def trace_slices(M: np.ndarray, F: np.ndarray) -> np.ndarray:
    """``Tr(M @ F[:, :, k])`` for every slice ``k``."""
    M, F = _check_pair(M, F)
    return np.einsum("ia,aik->k", M, F)


def _solve_slices(chol: np.ndarray, F: np.ndarray) -> np.ndarray:
    """``Sigma^{-1} @ F[:, :, k]`` for every slice, with ``Sigma = L L^T``."""
    d = F.shape[0]
    return chol_solve(chol, F.reshape(d, d * d)).reshape(d, d, d)


def grad_sigma_post(third: np.ndarray, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """``grad_{x_t} Sigma_post = (1 - a)^2 / a * grad^3 log p_t``."""
    alpha_bar = schedule.alpha_bar(t)
    if alpha_bar <= 0.0:
        msg = f"alpha_bar_{t} is zero; posterior covariance undefined"
        raise DegenerateStepError(msg)
    return (1.0 - alpha_bar) ** 2 / alpha_bar * np.asarray(third, dtype=np.float64)


def grad_sigma_post_y(
    sigma_post: np.ndarray,
    sigma_post_y: np.ndarray,
    grad_sp: np.ndarray,
    limit: int = DEFAULT_TENSOR_LIMIT,
) -> np.ndarray:
    """``Sigma_py Sigma_p^{-1} (grad Sigma_p)_k Sigma_p^{-1} Sigma_py`` per slice."""
    grad_sp = np.asarray(grad_sp, dtype=np.float64)
    check_tensor_limit(grad_sp.shape[0], limit)
    sigma_post_y, grad_sp = _check_pair(sigma_post_y, grad_sp)
    propagator = chol_solve(cholesky(sigma_post, "Sigma_post"), sigma_post_y)
    return np.einsum("ai,abk,bj->ijk", propagator, grad_sp, propagator)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _exact_gradient(
    moments: PosteriorMoments,
    posterior: MeasurementPosterior,
    grad_sp: np.ndarray,
    *,
    reduced: bool,
    limit: int,
) -> np.ndarray:
    solved = _solve_slices(moments.sigma_post_chol, grad_sp)
    first = np.einsum("iik->k", solved)
    if reduced:
        propagator = chol_solve(moments.sigma_post_chol, posterior.sigma_post_y)
        return 0.5 * (first - np.einsum("ia,aik->k", propagator, solved))
    grad_spy = grad_sigma_post_y(
        moments.sigma_post, posterior.sigma_post_y, grad_sp, limit=limit
    )
    second = np.einsum("iik->k", _solve_slices(posterior.sigma_post_y_chol, grad_spy))
    return 0.5 * (first - second)


def cmi_grad_exact(
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    *,
    reduced: bool = False,
    limit: int = DEFAULT_TENSOR_LIMIT,
) -> np.ndarray:
    """Exact ``grad_{x_t} I(x0; y | x_t)`` from the dense third-derivative tensor.

    ``0.5 * [Tr(Sigma_p^{-1} dSigma_p_k) - Tr(Sigma_py^{-1} dSigma_py_k)]``, or
    with ``reduced=True`` the single-trace form
    ``0.5 * Tr((Sigma_p^{-1} - Sigma_p^{-1} Sigma_py Sigma_p^{-1}) dSigma_p_k)``.

    Raises:
        DenseLimitError: If ``d`` exceeds ``limit``; use
            :func:`cmi_grad_hutchinson` instead.
    """
    return evaluate_cmi(
        model, schedule, x_t, t, A, noise, method="exact", reduced=reduced, limit=limit
    ).gradient


def _draw_probes(rng: Generator, r: int, d: int) -> np.ndarray:
    if r < 1:
        msg = f"probe count r must be >= 1, got {r}"
        raise ConfigurationError(msg)
    return rng.integers(0, 2, size=(r, d)).astype(np.float64) * 2.0 - 1.0


def _probe_estimates(
    model: ScoreModel,
    x_t: np.ndarray,
    t: int,
    moments: PosteriorMoments,
    posterior: MeasurementPosterior,
    probes: np.ndarray,
    scale: float,
    *,
    two_term: bool,
) -> np.ndarray:
    chol = moments.sigma_post_chol
    solved = chol_solve(chol, probes.T).T
    if two_term:
        propagated = chol_solve(chol, posterior.sigma_post_y @ probes.T).T
        first = model.third_bilinear_grad(x_t, t, solved, probes)
        second = model.third_bilinear_grad(x_t, t, solved, propagated)
        return 0.5 * scale * (first - second)
    combined = solved - chol_solve(chol, posterior.sigma_post_y @ solved.T).T
    return 0.5 * scale * model.third_bilinear_grad(x_t, t, combined, probes)


def hutchinson_probe_estimates(
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    r: int,
    rng: Generator,
    *,
    two_term: bool = False,
) -> np.ndarray:
    """Single-probe gradient estimates, one row per Rademacher probe.

    All ``r`` probes are drawn from ``rng`` up front, so the result does not
    depend on how the rows are later evaluated or averaged.
    """
    estimates = evaluate_cmi(
        model,
        schedule,
        x_t,
        t,
        A,
        noise,
        method="hutchinson",
        probes=r,
        rng=rng,
        two_term=two_term,
    ).probe_estimates
    assert estimates is not None
    return estimates


def cmi_grad_hutchinson(
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    r: int,
    rng: Generator,
    *,
    two_term: bool = False,
) -> np.ndarray:
    """Unbiased Hutchinson estimate of ``grad_{x_t} I(x0; y | x_t)``.

    For each probe ``v`` the combined matrix
    ``M = Sigma_p^{-1} - Sigma_p^{-1} Sigma_py Sigma_p^{-1}`` is applied by
    Cholesky solves and a single third-order contraction
    ``third_bilinear_grad(x_t, t, M v, v)`` yields every slice at once.
    ``two_term=True`` instead estimates both traces separately.

    Raises:
        ConfigurationError: If ``r < 1``.
    """
    return evaluate_cmi(
        model,
        schedule,
        x_t,
        t,
        A,
        noise,
        method="hutchinson",
        probes=r,
        rng=rng,
        two_term=two_term,
    ).gradient


def evaluate_cmi(
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    *,
    method: GradientMethod = "hutchinson",
    probes: int = 8,
    rng: Generator | None = None,
    two_term: bool = False,
    reduced: bool = False,
    limit: int = DEFAULT_TENSOR_LIMIT,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> CmiEvaluation:
    """Compute the CMI value and its gradient at ``(x_t, t)`` in one pass.

    Args:
        model: Score model with third-order capability.
        schedule: Noise schedule.
        x_t: Current diffusion state.
        t: Diffusion step.
        A: Measurement operator.
        noise: Measurement noise model.
        method: ``"exact"`` (dense tensor) or ``"hutchinson"`` (probes).
        probes: Number of Rademacher probes ``r`` for the Hutchinson path.
        rng: Probe stream; required for the Hutchinson path.
        two_term: Estimate the two traces separately.
        reduced: Use the single-trace form on the exact path.
        limit: Dense tensor limit for the exact path.
        dense_limit: Limit for materialising ``A``.

    Returns:
        A :class:`CmiEvaluation`.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    moments = posterior_moments(model, schedule, x_t, t)
    posterior = measurement_posterior_cov(moments.sigma_post, A, noise, dense_limit)
    value = 0.5 * (
        logdet(moments.sigma_post_chol) - logdet(posterior.sigma_post_y_chol)
    )
    if method == "exact":
        third = model.dense_third_tensor(x_t, t, limit=limit)
        grad_sp = grad_sigma_post(third, schedule, t)
        gradient = _exact_gradient(
            moments, posterior, grad_sp, reduced=reduced, limit=limit
        )
        return CmiEvaluation(gradient, value, moments.jitter)
    if method != "hutchinson":
        msg = f"unknown CMI gradient method: {method!r}"
        raise ConfigurationError(msg)
    if rng is None:
        msg = "the Hutchinson gradient needs a seeded probe stream"
        raise ConfigurationError(msg)
    alpha_bar = schedule.alpha_bar(t)
    draws = _draw_probes(rng, probes, x_t.shape[0])
    estimates = _probe_estimates(
        model,
        x_t,
        t,
        moments,
        posterior,
        draws,
        (1.0 - alpha_bar) ** 2 / alpha_bar,
        two_term=two_term,
    )
    return CmiEvaluation(estimates.mean(axis=0), value, moments.jitter, estimates)
