"""Discrete variance-preserving noise schedule.

Steps are 1-based: ``t`` runs over ``1..N`` and ``t = 0`` denotes clean data.
Every array attribute of :class:`NoiseSchedule` is indexed by ``t - 1``;
the accessor methods take ``t`` directly and accept ``t = 0`` wherever the
convention ``alpha_bar(0) = 1`` is meaningful.

Usage::

    from cmi_dps.diffusion.schedule import build_schedule

    schedule = build_schedule("linear", 100, 1e-4, 0.02, reference_steps=1000)
    x_t = forward_marginal(schedule, x0, t=50, eps=rng.standard_normal(x0.shape))
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from cmi_dps.exceptions import ConfigurationError, ShapeError, StepIndexError

logger = logging.getLogger(__name__)

ScheduleKind = Literal["linear"]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable discretised VP-SDE coefficients.

    Attributes:
        n_steps: Number of diffusion steps ``N``.
        betas: ``beta_t`` for ``t = 1..N``.
        alphas: ``1 - beta_t``.
        alpha_bars: Cumulative products ``prod_{j <= t} alpha_j``.
        sampler_stds: Ancestral sampler noise scale ``sigma~_t``; zero at ``t = 1``.
    """

    n_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sampler_stds: np.ndarray

    def _check_step(self, t: int, *, allow_zero: bool = False) -> None:
        lower = 0 if allow_zero else 1
        if not lower <= t <= self.n_steps:
            msg = f"step t={t} outside {lower}..{self.n_steps}"
            raise StepIndexError(msg)

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Return ``alpha_bar_t``, with ``alpha_bar_0 = 1``."""
        self._check_step(t, allow_zero=True)
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def sampler_std(self, t: int) -> float:
        self._check_step(t)
        return float(self.sampler_stds[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of ``q(x_{t-1} | x_t, x_0)``, i.e. ``sigma~_t ** 2``."""
        return self.sampler_std(t) ** 2


def build_schedule(
    kind: ScheduleKind,
    n_steps: int,
    beta_min: float,
    beta_max: float,
    reference_steps: int | None = None,
) -> NoiseSchedule:
    """Build a discrete noise schedule.

    Args:
        kind: Schedule family; only ``"linear"`` is supported.
        n_steps: Number of steps ``N >= 1``.
        beta_min: First beta, ``0 < beta_min <= beta_max``.
        beta_max: Last beta, ``< 1``.
        reference_steps: When given, the betas are scaled by
            ``reference_steps / n_steps`` so a short chain reaches the same
            terminal noise level as a ``reference_steps``-long one.

    Returns:
        The schedule with all derived vectors filled in.

    Raises:
        ConfigurationError: If a bound is out of range, naming the bound.
    """
    if kind != "linear":
        msg = f"unsupported schedule kind: {kind!r}"
        raise ConfigurationError(msg)
    if n_steps < 1:
        msg = f"n_steps must be >= 1, got {n_steps}"
        raise ConfigurationError(msg)
    if not beta_min > 0.0:
        msg = f"beta_min must be > 0, got {beta_min}"
        raise ConfigurationError(msg)
    if not beta_max < 1.0:
        msg = f"beta_max must be < 1, got {beta_max}"
        raise ConfigurationError(msg)
    if beta_min > beta_max:
        msg = f"beta_min ({beta_min}) must not exceed beta_max ({beta_max})"
        raise ConfigurationError(msg)

    betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    if reference_steps is not None:
        if reference_steps < 1:
            msg = f"reference_steps must be >= 1, got {reference_steps}"
            raise ConfigurationError(msg)
        betas = betas * (reference_steps / n_steps)
        if betas[-1] >= 1.0:
            msg = (
                f"beta_max rescaled by {reference_steps}/{n_steps} reaches "
                f"{betas[-1]:.4g}; must stay below 1"
            )
            raise ConfigurationError(msg)

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    previous = np.concatenate(([1.0], alpha_bars[:-1]))
    sampler_vars = (1.0 - previous) / (1.0 - alpha_bars) * betas
    sampler_stds = np.sqrt(sampler_vars)

    for array in (betas, alphas, alpha_bars, sampler_stds):
        array.setflags(write=False)
    logger.debug(
        "Built %s schedule: N=%d, alpha_bar_N=%.3e", kind, n_steps, alpha_bars[-1]
    )
    return NoiseSchedule(
        n_steps=n_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sampler_stds=sampler_stds,
    )


def forward_marginal(
    schedule: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray
) -> np.ndarray:
    """Sample ``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``.

    Raises:
        StepIndexError: If ``t`` is outside ``1..N``.
        ShapeError: If ``x0`` and ``eps`` differ in shape.
    """
    schedule._check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        msg = f"x0 shape {x0.shape} does not match eps shape {eps.shape}"
        raise ShapeError(msg)
    alpha_bar = schedule.alpha_bar(t)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
