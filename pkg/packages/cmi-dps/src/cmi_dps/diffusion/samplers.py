"""Reverse-diffusion samplers with DPS, PiGDM and CMI guidance.

One reverse step from ``x_t`` is::

    x0_hat = tweedie_denoise(x_t)
    x'     = ancestral mean(x_t, x0_hat) + sigma~_t z        (z = 0 at t = 1)
    x'     = x' + eta_t * grad_{x_t} I(x0; y | x_t)          (cmi_* modes)
    x'     = x' - zeta_t * grad_{x_t} ||y - A x0_hat||       (dps, cmi_dps)
    x'     = x' + pigdm_correction(x_t)                      (pigdm, cmi_pigdm)

Both guidance gradients are evaluated at ``x_t`` and added to ``x'``.

Random streams are split by purpose: the initial state and the ancestral
noise come from a stream that depends only on the seed, so every mode run
with the same seed starts from the same ``x_N`` and sees the same noise;
Hutchinson probes come from a second stream keyed by seed and sampler label.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass as pydantic_dataclass

from cmi_dps.diffusion.base import DEFAULT_DENSE_LIMIT
from cmi_dps.diffusion.cmi import (
    cmi_value,
    evaluate_cmi,
    measurement_posterior_cov,
    posterior_cov,
)
from cmi_dps.diffusion.linalg import chol_solve, cholesky, symmetrize
from cmi_dps.diffusion.score_models import tweedie_denoise
from cmi_dps.exceptions import NonFiniteStateError, ShapeError

if TYPE_CHECKING:
    from numpy.random import Generator

    from cmi_dps.diffusion.base import LinearOperator, ScoreModel
    from cmi_dps.diffusion.operators import NoiseModel
    from cmi_dps.diffusion.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

SamplerMode = Literal["none", "dps", "pigdm", "cmi_dps", "cmi_pigdm"]

_NOISE_STREAM = 0
_PROBE_STREAM = 1


# ---------------------------------------------------------------------------
# Configuration and records
# ---------------------------------------------------------------------------


@pydantic_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class GuidanceConfig:
    """Hyperparameters of one sampler."""

    mode: SamplerMode = Field("dps", description="Sampler variant")
    eta0: float = Field(
        0.05, ge=0.0, allow_inf_nan=False, description="CMI step scale eta_0"
    )
    zeta0: float = Field(
        1.0, ge=0.0, allow_inf_nan=False, description="DPS step scale zeta_0"
    )
    cmi_mode: Literal["exact", "hutchinson"] = Field(
        "hutchinson", description="CMI gradient path"
    )
    probes: int = Field(8, ge=1, description="Hutchinson probe count r")
    normalize_cmi_step: bool = Field(
        False, description="Use eta_t = eta0 / (||grad I|| + 1e-12)"
    )
    seed: int = Field(0, ge=0, description="Seed of the sampler streams")
    label: str | None = Field(None, description="Row key in outputs; defaults to mode")
    two_term: bool = Field(False, description="Estimate both CMI traces separately")
    record_cmi_value: bool = Field(
        False, description="Record the CMI value at every step for non-CMI modes"
    )

    @property
    def name(self) -> str:
        return self.label or self.mode

    @property
    def uses_cmi(self) -> bool:
        return self.mode.startswith("cmi_")

    @property
    def correction(self) -> Literal["dps", "pigdm"] | None:
        if self.mode in ("dps", "cmi_dps"):
            return "dps"
        if self.mode in ("pigdm", "cmi_pigdm"):
            return "pigdm"
        return None


@dataclass
class StepDiagnostics:
    """Per-step record; ``None`` marks a quantity the mode did not compute."""

    t: int
    grad_norm: float | None = None
    cmi_value: float | None = None
    jitter: float = 0.0
    residual: float | None = None


@dataclass
class RunRecord:
    """Seeded, serialisable outcome of one sampling run.

    Attributes:
        seed: Seed of the sampler streams.
        config: Snapshot of the :class:`GuidanceConfig`.
        x0: Final sample.
        steps: Diagnostics for ``t = N..1``, in that order.
        wall_ms: Wall time of the run in milliseconds.
        operator: Description of the measurement operator, if any.
    """

    seed: int
    config: GuidanceConfig
    x0: np.ndarray
    steps: list[StepDiagnostics] = field(default_factory=list)
    wall_ms: float = 0.0
    operator: dict[str, Any] | None = None

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def label(self) -> str:
        return self.config.name

    @property
    def cmi_steps_nonzero(self) -> int:
        return sum(1 for step in self.steps if step.grad_norm)

    @property
    def jitter_steps(self) -> int:
        return sum(1 for step in self.steps if step.jitter > 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "label": self.label,
            "eta0": self.config.eta0,
            "zeta0": self.config.zeta0,
            "r": self.config.probes,
            "config": asdict(self.config),
            "operator": self.operator,
            "wall_ms": self.wall_ms,
            "steps": [asdict(step) for step in self.steps],
            "x0": [float(value) for value in self.x0],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunRecord:
        return cls(
            seed=int(data["seed"]),
            config=GuidanceConfig(**data["config"]),
            x0=np.asarray(data["x0"], dtype=np.float64),
            steps=[StepDiagnostics(**step) for step in data.get("steps", [])],
            wall_ms=float(data.get("wall_ms", 0.0)),
            operator=data.get("operator"),
        )


def sampler_streams(seed: int, label: str) -> tuple[Generator, Generator]:
    """Return the ``(noise, probe)`` generators for one run."""
    noise = np.random.SeedSequence(seed, spawn_key=(_NOISE_STREAM,))
    probes = np.random.SeedSequence(
        seed, spawn_key=(_PROBE_STREAM, zlib.crc32(label.encode()))
    )
    return np.random.default_rng(noise), np.random.default_rng(probes)


# ---------------------------------------------------------------------------
# Steps and corrections
# ---------------------------------------------------------------------------


def ddpm_ancestral_step(
    x_t: np.ndarray,
    t: int,
    model: ScoreModel,
    schedule: NoiseSchedule,
    z: np.ndarray,
    x0_hat: np.ndarray | None = None,
) -> np.ndarray:
    """One DDPM ancestral step; works on a point or an ``(n, d)`` batch.

    No noise is added at ``t = 1`` whatever ``z`` holds.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x0_hat is None:
        x0_hat = tweedie_denoise(model, schedule, x_t, t)
    alpha_bar = schedule.alpha_bar(t)
    alpha_bar_prev = schedule.alpha_bar(t - 1)
    beta = schedule.beta(t)
    mean = (
        math.sqrt(schedule.alpha(t)) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * x_t
        + math.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar) * x0_hat
    )
    if t == 1:
        return mean
    return mean + schedule.sampler_std(t) * np.asarray(z, dtype=np.float64)


def _jacobian_transpose(
    model: ScoreModel, schedule: NoiseSchedule, x_t: np.ndarray, t: int, w: np.ndarray
) -> np.ndarray:
    """``J^T w`` for ``J = (I + (1 - a) H) / sqrt(a)``, the Jacobian of ``x0_hat``."""
    alpha_bar = schedule.alpha_bar(t)
    return (w + (1.0 - alpha_bar) * model.hvp(x_t, t, w)) / math.sqrt(alpha_bar)


def dps_correction(
    x_t: np.ndarray,
    t: int,
    model: ScoreModel,
    schedule: NoiseSchedule,
    A: LinearOperator,
    noise: NoiseModel,  # noqa: ARG001
    y: np.ndarray,
    zeta0: float,
) -> np.ndarray:
    """DPS correction ``zeta_t * grad_{x_t} ||y - A x0_hat(x_t)||``.

    ``grad ||res|| = -J^T A^T res / ||res||`` and ``zeta_t = zeta0 / ||res||``,
    so the result is ``-zeta0 J^T A^T res / ||res||^2``.  The sampler subtracts
    this vector.  A zero residual gives a zero correction.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    residual = np.asarray(y, dtype=np.float64) - A.apply(
        tweedie_denoise(model, schedule, x_t, t)
    )
    norm = float(np.linalg.norm(residual))
    if norm == 0.0:
        return np.zeros_like(x_t)
    grad = -_jacobian_transpose(model, schedule, x_t, t, A.adjoint(residual)) / norm
    return (zeta0 / norm) * grad


def pigdm_correction(
    x_t: np.ndarray,
    t: int,
    model: ScoreModel,
    schedule: NoiseSchedule,
    A: LinearOperator,
    noise: NoiseModel,
    y: np.ndarray,
    *,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> np.ndarray:
    """Pseudoinverse guidance for noisy linear measurements.

    ``sqrt(a_{t-1} a_t) r_t^2 J^T A^T (r_t^2 A A^T + Sigma_n)^{-1} (y - A x0_hat)``
    with ``r_t^2 = (1 - a_t) / a_t``.  For noiseless measurements this is the
    pseudoinverse step ``sqrt(a_{t-1} a_t) J^T A^+ (y - A x0_hat)``.  The
    sampler adds this vector.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    residual = np.asarray(y, dtype=np.float64) - A.apply(
        tweedie_denoise(model, schedule, x_t, t)
    )
    if not np.any(residual):
        return np.zeros_like(x_t)
    alpha_bar = schedule.alpha_bar(t)
    dense = A.to_dense(dense_limit)
    r2 = (1.0 - alpha_bar) / alpha_bar
    gram = symmetrize(r2 * dense @ dense.T + noise.covariance())
    weighted = chol_solve(cholesky(gram, "r_t^2 A A^T + Sigma_n"), residual)
    scale = r2 * math.sqrt(schedule.alpha_bar(t - 1) * alpha_bar)
    return scale * _jacobian_transpose(model, schedule, x_t, t, A.adjoint(weighted))


# ---------------------------------------------------------------------------
# Sampling loop
# ---------------------------------------------------------------------------


def _cmi_value_only(
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    dense_limit: int,
) -> tuple[float, float]:
    sigma, jitter = posterior_cov(model.hessian(x_t, t), schedule, t)
    posterior = measurement_posterior_cov(sigma, A, noise, dense_limit)
    return cmi_value(sigma, posterior.sigma_post_y), jitter


def sample(
    y: np.ndarray,
    A: LinearOperator,
    noise: NoiseModel,
    model: ScoreModel,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    rng: Generator | None = None,
    *,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> RunRecord:
    """Run one reverse chain from ``x_N ~ N(0, I)`` to ``x_0``.

    Args:
        y: Measurement vector of length ``A.out_dim``.
        A: Measurement operator.
        noise: Measurement noise model.
        model: Score model of the prior.
        schedule: Noise schedule.
        config: Sampler hyperparameters.
        rng: Optional parent generator; when omitted the streams are derived
            from ``config.seed`` and ``config.name``.
        dense_limit: Largest ``d`` for which ``A`` is materialised.

    Returns:
        The :class:`RunRecord` of the run.

    Raises:
        NonFiniteStateError: If the state stops being finite; ``step``
            records the offending ``t``.
        ShapeError: If ``y`` does not match the operator.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (A.out_dim,):
        msg = f"measurement shape {y.shape} does not match operator output {A.out_dim}"
        raise ShapeError(msg)
    if rng is None:
        noise_rng, probe_rng = sampler_streams(config.seed, config.name)
    else:
        noise_rng, probe_rng = rng.spawn(2)

    d = A.in_dim
    start = time.perf_counter()
    steps: list[StepDiagnostics] = []
    x = noise_rng.standard_normal(d)
    for t in range(schedule.n_steps, 0, -1):
        x0_hat = tweedie_denoise(model, schedule, x, t)
        z = noise_rng.standard_normal(d) if t > 1 else np.zeros(d)
        x_next = ddpm_ancestral_step(x, t, model, schedule, z, x0_hat=x0_hat)
        diagnostics = StepDiagnostics(t=t)

        if config.uses_cmi:
            evaluation = evaluate_cmi(
                model,
                schedule,
                x,
                t,
                A,
                noise,
                method=config.cmi_mode,
                probes=config.probes,
                rng=probe_rng,
                two_term=config.two_term,
                dense_limit=dense_limit,
            )
            grad_norm = float(np.linalg.norm(evaluation.gradient))
            eta = config.eta0
            if config.normalize_cmi_step:
                eta = config.eta0 / (grad_norm + 1e-12)
            x_next = x_next + eta * evaluation.gradient
            diagnostics.grad_norm = grad_norm
            diagnostics.cmi_value = evaluation.value
            diagnostics.jitter = evaluation.jitter
        elif config.record_cmi_value and A.out_dim:
            diagnostics.cmi_value, diagnostics.jitter = _cmi_value_only(
                model, schedule, x, t, A, noise, dense_limit
            )

        if config.correction == "dps":
            x_next = x_next - dps_correction(
                x, t, model, schedule, A, noise, y, config.zeta0
            )
        elif config.correction == "pigdm":
            x_next = x_next + pigdm_correction(
                x, t, model, schedule, A, noise, y, dense_limit=dense_limit
            )
        if config.correction is not None:
            diagnostics.residual = float(np.linalg.norm(y - A.apply(x0_hat)))

        if not np.all(np.isfinite(x_next)):
            raise NonFiniteStateError(step=t)
        logger.debug(
            "t=%d residual=%s grad_norm=%s",
            t,
            diagnostics.residual,
            diagnostics.grad_norm,
        )
        steps.append(diagnostics)
        x = x_next

    return RunRecord(
        seed=config.seed,
        config=config,
        x0=x,
        steps=steps,
        wall_ms=(time.perf_counter() - start) * 1e3,
        operator=A.describe(),
    )


def replay(
    record: RunRecord,
    y: np.ndarray,
    A: LinearOperator,
    noise: NoiseModel,
    model: ScoreModel,
    schedule: NoiseSchedule,
) -> RunRecord:
    """Rerun the sampler recorded in ``record``; ``x0`` is reproduced exactly."""
    return sample(y, A, noise, model, schedule, record.config)
