"""Invariant checks on a configured problem instance.

:func:`run_diagnostics` builds the prior, schedule and operator of an
:class:`~cmi_dps.experiment.config.ExperimentConfig`, picks a noisy state
``x_t`` at the configured step and checks the library against its oracles:
operator adjoints, score derivatives, the CMI gradient against finite
differences, Hutchinson convergence and the CMI identities.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from cmi_dps.diffusion.base import DEFAULT_TENSOR_LIMIT
from cmi_dps.diffusion.cmi import (
    cmi_value,
    cmi_value_measurement_space,
    evaluate_cmi,
    measurement_posterior_cov,
    posterior_cov,
)
from cmi_dps.diffusion.operators import NoiseModel
from cmi_dps.diffusion.oracles import finite_diff_grad, finite_diff_jacobian
from cmi_dps.diffusion.schedule import forward_marginal
from cmi_dps.experiment.config import (
    build_model,
    build_noise,
    build_noise_schedule,
    build_operator,
    build_prior,
    validate_config,
)

if TYPE_CHECKING:
    from cmi_dps.diffusion.base import LinearOperator, ScoreModel
    from cmi_dps.diffusion.schedule import NoiseSchedule
    from cmi_dps.experiment.config import ExperimentConfig

logger = logging.getLogger(__name__)

REDUCED_FORM_TOLERANCE = 1e-9
NONNEGATIVITY_SLACK = 1e-12
SCORE_FD_STEP = 1e-5

_DIAGNOSTICS_STREAM = 3


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one invariant check.

    Attributes:
        name: Short check name.
        passed: Whether ``value`` met ``tolerance``.
        value: Measured error (or the quantity the check bounds).
        tolerance: Threshold the check compares against.
        detail: Free-form context.
        skipped: The check did not apply to this instance.
    """

    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    skipped: bool = False

    @property
    def status(self) -> str:
        if self.skipped:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"


@dataclass
class DiagnosticsReport:
    """All checks run on one instance.

    Attributes:
        checks: One :class:`CheckResult` per check, in run order.
        t: Diffusion step the state-dependent checks used.
        cmi_grad_norm: Norm of the exact CMI gradient at the probe state,
            ``nan`` when the exact path was skipped.
    """

    checks: list[CheckResult] = field(default_factory=list)
    t: int = 0
    cmi_grad_norm: float = math.nan

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def n_passed(self) -> int:
        return sum(1 for check in self.checks if check.passed and not check.skipped)

    @property
    def n_total(self) -> int:
        return sum(1 for check in self.checks if not check.skipped)

    def check(self, name: str) -> CheckResult:
        for result in self.checks:
            if result.name == name:
                return result
        msg = f"no check named {name!r}"
        raise KeyError(msg)

    def summary(self) -> str:
        """Return a human-readable summary of the checks."""
        lines = [
            f"Diagnostics: {self.n_passed}/{self.n_total} checks passed at t={self.t}",
            f"CMI gradient norm: {self.cmi_grad_norm:.6g}",
            "",
        ]
        width = max((len(c.name) for c in self.checks), default=10)
        for c in self.checks:
            line = (
                f"  [{c.status}]  {c.name:<{width}}  "
                f"value={c.value:10.3e}  tol={c.tolerance:8.1e}"
            )
            if c.detail:
                line += f"  {c.detail}"
            lines.append(line)
        return "\n".join(lines)

    def as_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "t": self.t,
            "cmi_grad_norm": self.cmi_grad_norm,
            "checks": [
                {
                    "name": c.name,
                    "status": c.status,
                    "value": c.value,
                    "tolerance": c.tolerance,
                    "detail": c.detail,
                }
                for c in self.checks
            ],
        }


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / ||b||``, or the absolute error when ``b`` is zero."""
    scale = float(np.linalg.norm(b))
    error = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    return error / scale if scale > 0.0 else error


def _check(name: str, value: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value <= tolerance), value, tolerance, detail)


def _skip(name: str, tolerance: float, reason: str) -> CheckResult:
    return CheckResult(name, True, math.nan, tolerance, reason, skipped=True)


# ---------------------------------------------------------------------------
# Operator checks
# ---------------------------------------------------------------------------


def check_adjoint(
    A: LinearOperator, rng: np.random.Generator, pairs: int, tolerance: float
) -> CheckResult:
    """Largest ``|<A x, y> - <x, A^T y>|`` over random pairs, relative to scale."""
    if A.out_dim == 0:
        return _skip("operator adjoint", tolerance, "empty measurement")
    worst = 0.0
    for _ in range(pairs):
        x = rng.standard_normal(A.in_dim)
        y = rng.standard_normal(A.out_dim)
        lhs = float(A.apply(x) @ y)
        rhs = float(x @ A.adjoint(y))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return _check("operator adjoint", worst, tolerance, f"{pairs} pairs")


def check_dense_form(
    A: LinearOperator, rng: np.random.Generator, limit: int, tolerance: float
) -> CheckResult:
    if A.in_dim > limit:
        return _skip("operator dense form", tolerance, f"d > {limit}")
    dense = A.to_dense(limit)
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal(A.in_dim)
        worst = max(worst, float(np.max(np.abs(dense @ x - A.apply(x)), initial=0.0)))
    return _check("operator dense form", worst, tolerance)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run_diagnostics(
    config: ExperimentConfig, *, operator: LinearOperator | None = None
) -> DiagnosticsReport:
    """Run every invariant check on the instance described by ``config``.

    Args:
        config: Experiment configuration; its ``diagnostics`` section holds
            the tolerances.
        operator: Replaces the configured operator, e.g. to test a custom
            implementation.

    Returns:
        The :class:`DiagnosticsReport`; ``report.passed`` is ``False`` if any
        check failed.
    """
    validate_config(config)
    spec = config.diagnostics
    prior = build_prior(config.prior)
    schedule = build_noise_schedule(config.schedule)
    model = build_model(prior, schedule)
    A = operator if operator is not None else build_operator(config)
    noise = build_noise(config, A)
    d = prior.dimension
    t = spec.t if spec.t is not None else max(1, schedule.n_steps // 2)

    rng = np.random.default_rng(
        np.random.SeedSequence(config.base_seed, spawn_key=(_DIAGNOSTICS_STREAM,))
    )
    x0 = prior.sample(rng, 1)[0]
    x_t = forward_marginal(schedule, x0, t, rng.standard_normal(d))
    report = DiagnosticsReport(t=t)
    checks = report.checks

    checks.append(check_adjoint(A, rng, spec.adjoint_pairs, spec.adjoint_tolerance))
    checks.append(check_dense_form(A, rng, config.dense_limit, spec.adjoint_tolerance))

    jacobian = finite_diff_jacobian(lambda x: model.score(x, t), x_t, SCORE_FD_STEP)
    checks.append(
        _check(
            "hessian vs score differences",
            _relative(model.hessian(x_t, t), jacobian),
            spec.hessian_tolerance,
        )
    )

    def cmi_at(x: np.ndarray, noise_model: NoiseModel = noise) -> float:
        sigma, _ = posterior_cov(model.hessian(x, t), schedule, t)
        posterior = measurement_posterior_cov(
            sigma, A, noise_model, config.dense_limit
        )
        return cmi_value(sigma, posterior.sigma_post_y)

    if d <= DEFAULT_TENSOR_LIMIT:
        third = model.dense_third_tensor(x_t, t)
        asymmetry = max(
            float(np.max(np.abs(third - third.transpose(perm))))
            for perm in itertools.permutations(range(3))
        )
        checks.append(
            _check("third derivative symmetry", asymmetry, spec.symmetry_tolerance)
        )

        exact = evaluate_cmi(
            model,
            schedule,
            x_t,
            t,
            A,
            noise,
            method="exact",
            dense_limit=config.dense_limit,
        )
        reduced = evaluate_cmi(
            model,
            schedule,
            x_t,
            t,
            A,
            noise,
            method="exact",
            reduced=True,
            dense_limit=config.dense_limit,
        )
        report.cmi_grad_norm = float(np.linalg.norm(exact.gradient))
        reference = finite_diff_grad(cmi_at, x_t, spec.fd_step)
        checks.append(
            _check(
                "CMI gradient vs finite differences",
                _relative(exact.gradient, reference),
                spec.gradient_tolerance,
                f"|grad|={report.cmi_grad_norm:.3e}",
            )
        )
        checks.append(
            _check(
                "CMI gradient reduced form",
                _relative(reduced.gradient, exact.gradient),
                REDUCED_FORM_TOLERANCE,
            )
        )
        checks.append(
            _hutchinson_check(config, model, schedule, x_t, t, A, noise, exact.gradient)
        )
    else:
        reason = f"d={d} above the dense tensor limit"
        for name, tolerance in (
            ("third derivative symmetry", spec.symmetry_tolerance),
            ("CMI gradient vs finite differences", spec.gradient_tolerance),
            ("CMI gradient reduced form", REDUCED_FORM_TOLERANCE),
            ("Hutchinson convergence", spec.hutchinson_tolerance),
        ):
            checks.append(_skip(name, tolerance, reason))

    sigma, _ = posterior_cov(model.hessian(x_t, t), schedule, t)
    posterior = measurement_posterior_cov(sigma, A, noise, config.dense_limit)
    value = cmi_value(sigma, posterior.sigma_post_y)
    dual = cmi_value_measurement_space(sigma, A, noise)
    checks.append(
        _check(
            "CMI determinant duality",
            abs(value - dual) / max(1.0, abs(value)),
            spec.duality_tolerance,
            f"I={value:.6g} nats",
        )
    )
    checks.append(_check("CMI nonnegativity", max(0.0, -value), NONNEGATIVITY_SLACK))
    lowest = float(np.linalg.eigvalsh(sigma - posterior.sigma_post_y)[0])
    checks.append(
        _check(
            "posterior covariance ordering",
            max(0.0, -lowest),
            spec.ordering_tolerance,
            f"lambda_min={lowest:.3e}",
        )
    )

    if A.out_dim:
        values = [
            cmi_at(x_t, NoiseModel.isotropic(s, A.out_dim))
            for s in sorted(spec.noise_grid)
        ]
        violations = sum(1 for a, b in itertools.pairwise(values) if not b < a)
        checks.append(
            _check(
                "CMI noise monotonicity",
                float(violations),
                0.0,
                f"{len(values)} noise levels",
            )
        )
    else:
        checks.append(_skip("CMI noise monotonicity", 0.0, "empty measurement"))

    for check in checks:
        if not check.passed:
            logger.warning("Check failed: %s (value=%.3e)", check.name, check.value)
    return report


def _hutchinson_check(
    config: ExperimentConfig,
    model: ScoreModel,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    exact: np.ndarray,
) -> CheckResult:
    """Mean relative error of single Hutchinson gradients per probe count.

    Each of ``probe_seeds`` independent probe streams gives one estimate; its
    relative error to the exact gradient is taken before averaging over the
    streams.  Passes when the error does not grow with ``r`` and the largest
    ``r`` meets the tolerance.
    """
    spec = config.diagnostics
    errors = []
    for r in spec.probe_counts:
        seed_errors = []
        for j in range(spec.probe_seeds):
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    config.base_seed, spawn_key=(_DIAGNOSTICS_STREAM, r, j)
                )
            )
            estimate = evaluate_cmi(
                model,
                schedule,
                x_t,
                t,
                A,
                noise,
                probes=r,
                rng=rng,
                dense_limit=config.dense_limit,
            ).gradient
            seed_errors.append(_relative(estimate, exact))
        errors.append(float(np.mean(seed_errors)))
    monotone = all(b <= a for a, b in itertools.pairwise(errors))
    detail = ", ".join(
        f"r={r}: {e:.2e}" for r, e in zip(spec.probe_counts, errors, strict=True)
    )
    passed = monotone and errors[-1] <= spec.hutchinson_tolerance
    return CheckResult(
        "Hutchinson convergence",
        passed,
        errors[-1],
        spec.hutchinson_tolerance,
        detail,
    )
