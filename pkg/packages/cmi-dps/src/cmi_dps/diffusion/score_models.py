"""Score models with exact derivatives for Gaussian-mixture priors.

Under the VP forward process a Gaussian mixture stays a Gaussian mixture:
component ``k`` diffuses to mean ``sqrt(a) mu_k`` and covariance
``a C_k + (1 - a) I`` with ``a = alpha_bar_t``.  All derivatives of
``log p_t`` are therefore available in closed form from the component
precisions ``P_k`` and the responsibilities ``gamma_k(x)``.  Writing
``g_k = -P_k (x - m_k)``, ``s = sum_k gamma_k g_k`` and ``delta_k = g_k - s``:

- score: ``s``
- Hessian: ``sum_k gamma_k (-P_k + delta_k delta_k^T)``
- third derivative: ``sum_k gamma_k [delta (x) delta (x) delta +
  sym(-P_k (x) delta)]``

For a single component ``delta`` is identically zero, so the third
derivative and everything built from it vanish exactly.

:func:`finite_diff_wrap` turns any score function into a
:class:`~cmi_dps.diffusion.base.ScoreModel` whose higher derivatives are
central differences of the score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import logsumexp

from cmi_dps.diffusion.base import DEFAULT_TENSOR_LIMIT, ScoreModel, check_tensor_limit
from cmi_dps.diffusion.linalg import chol_solve, cholesky, logdet, symmetrize
from cmi_dps.exceptions import ConfigurationError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.random import Generator

    from cmi_dps.diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMixturePrior:
    """A finite Gaussian mixture on ``R^d``.

    Attributes:
        weights: ``(K,)`` positive mixture weights summing to one.
        means: ``(K, d)`` component means.
        covariances: ``(K, d, d)`` symmetric positive-definite covariances.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.array(self.means, dtype=np.float64))
        covariances = np.array(self.covariances, dtype=np.float64)
        if covariances.ndim == 2:
            covariances = covariances[None]
        k, d = means.shape
        if weights.shape != (k,) or covariances.shape != (k, d, d):
            msg = (
                f"inconsistent mixture shapes: weights {weights.shape}, "
                f"means {means.shape}, covariances {covariances.shape}"
            )
            raise ShapeError(msg)
        if np.any(weights <= 0.0):
            msg = "mixture weights must be positive"
            raise ConfigurationError(msg)
        if abs(weights.sum() - 1.0) > 1e-12:
            msg = f"mixture weights must sum to 1, got {weights.sum():.15g}"
            raise ConfigurationError(msg)
        if not np.allclose(covariances, covariances.transpose(0, 2, 1), atol=1e-12):
            msg = "mixture covariances must be symmetric"
            raise ConfigurationError(msg)
        for index, cov in enumerate(covariances):
            cholesky(cov, what=f"covariance of component {index}")
        for name, value in (
            ("weights", weights),
            ("means", means),
            ("covariances", covariances),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def standard_normal(cls, d: int) -> GaussianMixturePrior:
        """``N(0, I_d)``, the fixed point of the VP forward process."""
        return cls(np.ones(1), np.zeros((1, d)), np.eye(d)[None])

    @classmethod
    def gaussian(cls, mean: np.ndarray, cov: np.ndarray) -> GaussianMixturePrior:
        """A single Gaussian component."""
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.ones(1), mean[None], np.asarray(cov, dtype=np.float64)[None])

    @property
    def dimension(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    def sample(self, rng: Generator, n: int) -> np.ndarray:
        """Draw ``n`` samples, returned as an ``(n, d)`` array."""
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dimension))
        chols = np.linalg.cholesky(self.covariances)
        return self.means[labels] + np.einsum("nij,nj->ni", chols[labels], eps)

    def log_density(
        self, x: np.ndarray, alpha_bar: float = 1.0
    ) -> np.ndarray | float:
        """Log-density of the mixture diffused to level ``alpha_bar``."""
        return diffuse(self, alpha_bar).log_density(x)


# ---------------------------------------------------------------------------
# Diffused mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiffusedMixture:
    """Component parameters of a mixture after forward diffusion.

    Attributes:
        log_weights: ``(K,)`` log mixture weights.
        means: ``(K, d)`` diffused means ``sqrt(a) mu_k``.
        precisions: ``(K, d, d)`` inverses of ``a C_k + (1 - a) I``.
        log_norms: ``(K,)`` Gaussian log-normalisers of each component.
    """

    log_weights: np.ndarray
    means: np.ndarray
    precisions: np.ndarray
    log_norms: np.ndarray

    def _local(
        self, x: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-point responsibilities, component scores and log-joint terms."""
        diff = x[:, None, :] - self.means[None]
        g = -np.einsum("kij,nkj->nki", self.precisions, diff)
        quad = -np.einsum("nki,nki->nk", diff, g)
        log_joint = self.log_weights + self.log_norms - 0.5 * quad
        log_total = logsumexp(log_joint, axis=1)
        gamma = np.exp(log_joint - log_total[:, None])
        return gamma, g, log_joint, log_total

    def log_density(self, x: np.ndarray) -> np.ndarray | float:
        points = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, _, _, log_total = self._local(points)
        return float(log_total[0]) if np.ndim(x) == 1 else log_total

    def score(self, x: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(x, dtype=np.float64))
        gamma, g, _, _ = self._local(points)
        s = np.einsum("nk,nkd->nd", gamma, g)
        return s[0] if np.ndim(x) == 1 else s

    def deviations(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Responsibilities and deviations ``delta_k = g_k - s`` at one point."""
        point = np.asarray(x, dtype=np.float64).reshape(1, -1)
        gamma, g, _, _ = self._local(point)
        gamma, g = gamma[0], g[0]
        s = gamma @ g
        return gamma, g - s


def diffuse(prior: GaussianMixturePrior, alpha_bar: float) -> DiffusedMixture:
    """Push ``prior`` through the forward process to level ``alpha_bar``."""
    d = prior.dimension
    eye = np.eye(d)
    root = math.sqrt(alpha_bar)
    precisions = np.empty_like(prior.covariances)
    log_norms = np.empty(prior.n_components)
    for k, cov in enumerate(prior.covariances):
        diffused = alpha_bar * cov + (1.0 - alpha_bar) * eye
        chol = cholesky(diffused, what=f"diffused covariance of component {k}")
        precisions[k] = symmetrize(chol_solve(chol, eye))
        log_norms[k] = -0.5 * (d * _LOG_2PI + logdet(chol))
    return DiffusedMixture(
        log_weights=np.log(prior.weights),
        means=root * prior.means,
        precisions=precisions,
        log_norms=log_norms,
    )


# ---------------------------------------------------------------------------
# Score models
# ---------------------------------------------------------------------------


class GaussianMixtureScore(ScoreModel):
    """Exact score model of a diffused :class:`GaussianMixturePrior`.

    Diffused component factorisations are memoised per step.
    """

    has_dense_hessian = True
    has_third_order = True

    def __init__(self, prior: GaussianMixturePrior, schedule: NoiseSchedule) -> None:
        self.prior = prior
        self.schedule = schedule
        self._cache: dict[int, DiffusedMixture] = {}

    @property
    def dimension(self) -> int:
        return self.prior.dimension

    def components(self, t: int) -> DiffusedMixture:
        """Return the diffused mixture at step ``t`` (``t = 0`` is the prior)."""
        cached = self._cache.get(t)
        if cached is None:
            cached = diffuse(self.prior, self.schedule.alpha_bar(t))
            self._cache[t] = cached
        return cached

    def _point(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            msg = f"expected a point of shape ({self.dimension},), got {x.shape}"
            raise ShapeError(msg)
        return x

    def _directions(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dimension or v.ndim > 2:
            msg = f"directions must have trailing dimension {self.dimension}"
            raise ShapeError(msg)
        return v

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dimension:
            msg = f"expected trailing dimension {self.dimension}, got {x.shape}"
            raise ShapeError(msg)
        return self.components(t).score(x)

    def log_density(self, x: np.ndarray, t: int) -> np.ndarray | float:
        return self.components(t).log_density(x)

    def hessian(self, x: np.ndarray, t: int) -> np.ndarray:
        mixture = self.components(t)
        gamma, delta = mixture.deviations(self._point(x))
        hess = -np.einsum("k,kij->ij", gamma, mixture.precisions)
        hess += np.einsum("k,ki,kj->ij", gamma, delta, delta)
        return symmetrize(hess)

    def hvp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        mixture = self.components(t)
        gamma, delta = mixture.deviations(self._point(x))
        v = self._directions(v)
        directions = np.atleast_2d(v)
        along = directions @ delta.T
        out = -np.einsum("k,kij,rj->ri", gamma, mixture.precisions, directions)
        out += np.einsum("k,ki,rk->ri", gamma, delta, along)
        return out[0] if v.ndim == 1 else out

    def third_bilinear_grad(
        self, x: np.ndarray, t: int, u: np.ndarray, v: np.ndarray
    ) -> np.ndarray:
        mixture = self.components(t)
        gamma, delta = mixture.deviations(self._point(x))
        u, v = self._directions(u), self._directions(v)
        if u.shape != v.shape:
            msg = f"direction shapes differ: {u.shape} vs {v.shape}"
            raise ShapeError(msg)
        us, vs = np.atleast_2d(u), np.atleast_2d(v)
        u_delta = us @ delta.T
        v_delta = vs @ delta.T
        hu = -np.einsum("kij,rj->rki", mixture.precisions, us)
        hv = -np.einsum("kij,rj->rki", mixture.precisions, vs)
        u_h_v = np.einsum("rki,ri->rk", hu, vs)
        coeff = gamma * (u_delta * v_delta + u_h_v)
        out = coeff @ delta
        out += np.einsum("k,rkc,rk->rc", gamma, hu, v_delta)
        out += np.einsum("k,rkc,rk->rc", gamma, hv, u_delta)
        return out[0] if u.ndim == 1 else out

    def dense_third_tensor(
        self, x: np.ndarray, t: int, limit: int = DEFAULT_TENSOR_LIMIT
    ) -> np.ndarray:
        check_tensor_limit(self.dimension, limit)
        mixture = self.components(t)
        gamma, delta = mixture.deviations(self._point(x))
        hk = -mixture.precisions
        tensor = np.einsum("k,ka,kb,kc->abc", gamma, delta, delta, delta)
        tensor += np.einsum("k,kab,kc->abc", gamma, hk, delta)
        tensor += np.einsum("k,kac,kb->abc", gamma, hk, delta)
        tensor += np.einsum("k,kbc,ka->abc", gamma, hk, delta)
        return tensor


class ScoreFunction(ScoreModel):
    """A bare score callable with no derivative capabilities."""

    def __init__(
        self, fn: Callable[[np.ndarray, int], np.ndarray], dimension: int | None = None
    ) -> None:
        self.fn = fn
        self._dimension = dimension

    @property
    def dimension(self) -> int | None:
        return self._dimension

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        value = self.fn(np.asarray(x, dtype=np.float64), t)
        return np.asarray(value, dtype=np.float64)


class FiniteDifferenceScore(ScoreFunction):
    """Score callable whose higher derivatives are central differences.

    ``hvp`` differences the score along ``v``; ``third_bilinear_grad`` is the
    mixed second difference of the score along ``u`` and ``v``, which equals
    the contraction of the third derivative by its full index symmetry.
    Both are accurate to ``O(h**2)``.
    """

    has_dense_hessian = True
    has_third_order = True

    def __init__(
        self,
        fn: Callable[[np.ndarray, int], np.ndarray],
        h: float = 1e-4,
        dimension: int | None = None,
    ) -> None:
        if not h > 0.0:
            msg = f"finite-difference step must be > 0, got {h}"
            raise ConfigurationError(msg)
        super().__init__(fn, dimension)
        self.h = h

    def hvp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        h = self.h
        rows = [
            (self.score(x + h * direction, t) - self.score(x - h * direction, t))
            / (2.0 * h)
            for direction in np.atleast_2d(v)
        ]
        out = np.stack(rows)
        return out[0] if v.ndim == 1 else out

    def third_bilinear_grad(
        self, x: np.ndarray, t: int, u: np.ndarray, v: np.ndarray
    ) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        h = self.h
        rows = []
        for a, b in zip(np.atleast_2d(u), np.atleast_2d(v), strict=True):
            plus, minus = h * (a + b), h * (a - b)
            rows.append(
                (
                    self.score(x + plus, t)
                    - self.score(x + minus, t)
                    - self.score(x - minus, t)
                    + self.score(x - plus, t)
                )
                / (4.0 * h * h)
            )
        out = np.stack(rows)
        return out[0] if u.ndim == 1 else out


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def gmm_score(
    prior: GaussianMixturePrior, schedule: NoiseSchedule, x: np.ndarray, t: int
) -> np.ndarray:
    """Closed-form score of the diffused mixture at step ``t``."""
    return GaussianMixtureScore(prior, schedule).score(x, t)


def gmm_hessian(
    prior: GaussianMixturePrior, schedule: NoiseSchedule, x: np.ndarray, t: int
) -> np.ndarray:
    """Closed-form Hessian of the diffused mixture log-density at step ``t``."""
    return GaussianMixtureScore(prior, schedule).hessian(x, t)


def hvp(model: ScoreModel, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
    return model.hvp(x, t, v)


def third_bilinear_grad(
    model: ScoreModel, x: np.ndarray, t: int, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    return model.third_bilinear_grad(x, t, u, v)


def dense_third_tensor(
    model: ScoreModel, x: np.ndarray, t: int, limit: int = DEFAULT_TENSOR_LIMIT
) -> np.ndarray:
    return model.dense_third_tensor(x, t, limit=limit)


def tweedie_denoise(
    model: ScoreModel, schedule: NoiseSchedule, x_t: np.ndarray, t: int
) -> np.ndarray:
    """Tweedie estimate ``(x_t + (1 - a) score) / sqrt(a)`` of ``x_0``."""
    alpha_bar = schedule.alpha_bar(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t + (1.0 - alpha_bar) * model.score(x_t, t)) / math.sqrt(alpha_bar)


def finite_diff_wrap(
    base_score: Callable[[np.ndarray, int], np.ndarray],
    h: float = 1e-4,
    dimension: int | None = None,
) -> FiniteDifferenceScore:
    """Give a score callable ``(x, t) -> grad log p_t(x)`` numerical derivatives."""
    return FiniteDifferenceScore(base_score, h=h, dimension=dimension)
