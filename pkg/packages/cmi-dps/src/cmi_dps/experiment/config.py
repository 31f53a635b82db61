"""Experiment configuration: validated sections, YAML loading and builders."""

from __future__ import annotations

import math
from dataclasses import asdict
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
import yaml
from pydantic import ConfigDict, Field, TypeAdapter, ValidationError
from pydantic.dataclasses import dataclass

from cmi_dps.diffusion.operators import (
    Box,
    DenseOperator,
    NoiseModel,
    make_box_mask,
    make_downsample,
    make_gaussian_blur,
    make_random_mask,
)
from cmi_dps.diffusion.samplers import GuidanceConfig
from cmi_dps.diffusion.schedule import build_schedule
from cmi_dps.diffusion.score_models import GaussianMixturePrior, GaussianMixtureScore
from cmi_dps.exceptions import ConfigurationError

if TYPE_CHECKING:
    from cmi_dps.diffusion.base import LinearOperator
    from cmi_dps.diffusion.schedule import NoiseSchedule

_DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[5] / "config"

_STRICT = ConfigDict(extra="forbid")

Location = tuple[str | int, ...]


@dataclass(frozen=True, config=_STRICT)
class PriorSpec:
    """Data prior.

    ``standard_normal`` needs only ``dimension``; ``gaussian_mixture`` lists
    its components explicitly; ``random_mixture`` draws ``components``
    isotropic components with means ``N(0, mean_scale^2 I)`` from
    ``prior_seed``.
    """

    kind: Literal["standard_normal", "gaussian_mixture", "random_mixture"] = (
        "random_mixture"
    )
    dimension: int = Field(16, ge=1, description="Data dimension d")
    weights: tuple[float, ...] | None = None
    means: tuple[tuple[float, ...], ...] | None = None
    covariances: tuple[tuple[tuple[float, ...], ...], ...] | None = None
    components: int = Field(3, ge=1, description="Components of a random mixture")
    mean_scale: float = Field(1.0, gt=0.0, description="Spread of random means")
    component_std: float = Field(
        0.3, gt=0.0, description="Per-coordinate std of each random component"
    )
    prior_seed: int = Field(0, ge=0, description="Seed for random mixtures")


@dataclass(frozen=True, config=_STRICT)
class ScheduleSpec:
    kind: Literal["linear"] = "linear"
    n_steps: int = Field(100, ge=1, description="Reverse steps N")
    beta_min: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_max: float = Field(0.02, gt=0.0, lt=1.0)
    reference_steps: int | None = Field(
        1000, ge=1, description="Rescale betas by reference_steps / n_steps"
    )


@dataclass(frozen=True, config=_STRICT)
class OperatorSpec:
    """Measurement operator; image kinds need the ``image`` section."""

    kind: Literal["identity", "mask", "box_mask", "blur", "downsample"] = "mask"
    keep_fraction: float = Field(0.5, gt=0.0, le=1.0)
    mask_seed: int = Field(0, ge=0, description="Seed of the random mask")
    box: tuple[int, int, int, int] | None = Field(
        None, description="Hidden box as (row, col, height, width)"
    )
    kernel_size: int = Field(5, ge=1)
    sigma: float = Field(1.0, gt=0.0)
    factor: int = Field(2, ge=1)


@dataclass(frozen=True, config=_STRICT)
class ImageSpec:
    height: int = Field(4, ge=1)
    width: int = Field(4, ge=1)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True, config=_STRICT)
class DiagnosticsSpec:
    """Tolerances and sizes of the invariant checks."""

    t: int | None = Field(None, ge=1, description="Step to probe; default N // 2")
    fd_step: float = Field(1e-4, gt=0.0)
    gradient_tolerance: float = Field(1e-4, gt=0.0)
    hessian_tolerance: float = Field(1e-5, gt=0.0)
    adjoint_pairs: int = Field(100, ge=1)
    adjoint_tolerance: float = Field(1e-10, gt=0.0)
    symmetry_tolerance: float = Field(1e-8, gt=0.0)
    duality_tolerance: float = Field(1e-8, gt=0.0)
    ordering_tolerance: float = Field(1e-8, gt=0.0)
    probe_counts: tuple[int, ...] = (1, 100, 10_000)
    probe_seeds: int = Field(20, ge=1)
    hutchinson_tolerance: float = Field(0.01, gt=0.0)
    noise_grid: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)


def _default_samplers() -> tuple[GuidanceConfig, ...]:
    return (GuidanceConfig(mode="dps"), GuidanceConfig(mode="cmi_dps"))


@dataclass(frozen=True, config=_STRICT)
class ExperimentConfig:
    """Everything :func:`~cmi_dps.experiment.runner.run_experiment` needs."""

    prior: PriorSpec = Field(default_factory=PriorSpec)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    operator: OperatorSpec = Field(default_factory=OperatorSpec)
    image: ImageSpec | None = None
    noise_sigma: float = Field(
        0.05, gt=0.0, allow_inf_nan=False, description="Measurement noise std"
    )
    samplers: tuple[GuidanceConfig, ...] = Field(default_factory=_default_samplers)
    batch: int = Field(10, ge=1, description="Number of seeds")
    base_seed: int = Field(0, ge=0)
    output_dir: str = "results"
    workers: int = Field(1, ge=1)
    dump_grids: bool = False
    dense_limit: int = Field(256, ge=1)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)

    @property
    def dimension(self) -> int:
        return self.prior.dimension

    @property
    def image_dims(self) -> tuple[int, int] | None:
        return self.image.dims if self.image is not None else None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Cross-field validation
# ---------------------------------------------------------------------------


def consistency_errors(config: ExperimentConfig) -> list[tuple[Location, str]]:
    """Return ``(location, message)`` for each cross-field inconsistency."""
    errors: list[tuple[Location, str]] = []
    prior = config.prior
    d = prior.dimension

    if config.image is not None and config.image.height * config.image.width != d:
        errors.append(
            (
                ("image",),
                f"image {config.image.height}x{config.image.width} does not "
                f"hold prior dimension {d}",
            )
        )

    if prior.kind == "gaussian_mixture":
        if prior.weights is None or prior.means is None or prior.covariances is None:
            errors.append(
                (("prior",), "gaussian_mixture needs weights, means and covariances")
            )
        else:
            k = len(prior.weights)
            if len(prior.means) != k or len(prior.covariances) != k:
                errors.append(
                    (("prior", "means"), "weights, means and covariances differ in K")
                )
            if any(len(mean) != d for mean in prior.means):
                errors.append((("prior", "means"), f"every mean must have length {d}"))
            if any(
                len(cov) != d or any(len(row) != d for row in cov)
                for cov in prior.covariances
            ):
                errors.append(
                    (("prior", "covariances"), f"every covariance must be {d}x{d}")
                )
            if not math.isclose(sum(prior.weights), 1.0, abs_tol=1e-12):
                errors.append((("prior", "weights"), "weights must sum to 1"))

    schedule = config.schedule
    if schedule.beta_min > schedule.beta_max:
        errors.append((("schedule", "beta_min"), "beta_min exceeds beta_max"))
    if (
        schedule.reference_steps is not None
        and schedule.beta_max * schedule.reference_steps / schedule.n_steps >= 1.0
    ):
        errors.append(
            (
                ("schedule", "reference_steps"),
                f"beta_max rescaled by {schedule.reference_steps}/{schedule.n_steps} "
                "must stay below 1",
            )
        )

    operator = config.operator
    if operator.kind in ("box_mask", "blur", "downsample") and config.image is None:
        errors.append(
            (("operator", "kind"), f"operator {operator.kind!r} needs an image section")
        )
    if operator.kind == "box_mask" and operator.box is None:
        errors.append((("operator", "box"), "box_mask needs a box"))
    if operator.kind == "blur" and operator.kernel_size % 2 == 0:
        errors.append((("operator", "kernel_size"), "kernel_size must be odd"))
    if operator.kind == "downsample" and config.image is not None:
        height, width = config.image.dims
        if height % operator.factor or width % operator.factor:
            errors.append(
                (
                    ("operator", "factor"),
                    f"factor {operator.factor} does not divide {height}x{width}",
                )
            )

    labels = [sampler.name for sampler in config.samplers]
    for index, label in enumerate(labels):
        if labels.index(label) != index:
            errors.append(
                (("samplers", index), f"duplicate sampler label {label!r}")
            )
    if not config.samplers:
        errors.append((("samplers",), "at least one sampler is required"))

    if config.diagnostics.t is not None and config.diagnostics.t > schedule.n_steps:
        errors.append(
            (("diagnostics", "t"), f"t must not exceed n_steps={schedule.n_steps}")
        )
    return errors


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Raise :class:`ConfigurationError` on the first inconsistency."""
    errors = consistency_errors(config)
    if errors:
        location, message = errors[0]
        msg = f"{_format_location(location)}: {message}"
        raise ConfigurationError(msg)
    return config


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _format_location(location: Location) -> str:
    return ".".join(str(part) for part in location) or "<root>"


def _line_of(root: yaml.Node | None, location: Location) -> int | None:
    """1-based line of the deepest YAML node along ``location``."""
    if root is None:
        return None
    node = root
    for part in location:
        child = None
        if isinstance(node, yaml.MappingNode):
            child = next(
                (value for key, value in node.value if key.value == str(part)), None
            )
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            if 0 <= part < len(node.value):
                child = node.value[part]
        if child is None:
            break
        node = child
    return node.start_mark.line + 1


def load_config(path: Path | None = None) -> ExperimentConfig:
    """Load an experiment configuration from a YAML file.

    Args:
        path: Path to a YAML config file.  When *None* the shipped
              ``config/experiment.yml`` is used; a missing file yields the
              defaults.

    Returns:
        A validated :class:`ExperimentConfig`.

    Raises:
        ConfigurationError: On YAML syntax errors, invalid values or
            inconsistent sections; the message names the field and the
            line number.
    """
    if path is None:
        path = _DEFAULT_CONFIG_PATH / "experiment.yml"

    text = path.read_text(encoding="utf-8") if path.exists() else ""
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        msg = f"invalid YAML in {path}: {exc.problem}"
        raise ConfigurationError(msg, line=line) from exc

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        msg = f"{path} must contain a mapping at the top level"
        raise ConfigurationError(msg, line=_line_of(root, ()))

    try:
        config = TypeAdapter(ExperimentConfig).validate_python(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = tuple(error["loc"])
        msg = f"{_format_location(location)}: {error['msg']}"
        raise ConfigurationError(msg, line=_line_of(root, location)) from exc

    errors = consistency_errors(config)
    if errors:
        location, message = errors[0]
        msg = f"{_format_location(location)}: {message}"
        raise ConfigurationError(msg, line=_line_of(root, location))
    return config


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_prior(spec: PriorSpec) -> GaussianMixturePrior:
    d = spec.dimension
    if spec.kind == "standard_normal":
        return GaussianMixturePrior.standard_normal(d)
    if spec.kind == "gaussian_mixture":
        return GaussianMixturePrior(
            weights=np.asarray(spec.weights, dtype=np.float64),
            means=np.asarray(spec.means, dtype=np.float64),
            covariances=np.asarray(spec.covariances, dtype=np.float64),
        )
    rng = np.random.default_rng(spec.prior_seed)
    k = spec.components
    means = rng.normal(0.0, spec.mean_scale, size=(k, d))
    covariances = np.broadcast_to(spec.component_std**2 * np.eye(d), (k, d, d))
    return GaussianMixturePrior(
        weights=np.full(k, 1.0 / k), means=means, covariances=covariances
    )


def build_noise_schedule(spec: ScheduleSpec) -> NoiseSchedule:
    return build_schedule(
        spec.kind, spec.n_steps, spec.beta_min, spec.beta_max, spec.reference_steps
    )


def build_operator(config: ExperimentConfig) -> LinearOperator:
    spec = config.operator
    d = config.dimension
    if spec.kind == "identity":
        return DenseOperator.identity(d)
    if spec.kind == "mask":
        return make_random_mask(
            d, spec.keep_fraction, np.random.default_rng(spec.mask_seed)
        )
    if config.image is None:
        msg = f"operator {spec.kind!r} needs an image section"
        raise ConfigurationError(msg)
    height, width = config.image.dims
    if spec.kind == "box_mask":
        if spec.box is None:
            msg = "box_mask needs a box"
            raise ConfigurationError(msg)
        return make_box_mask(width, height, Box(*spec.box))
    if spec.kind == "blur":
        return make_gaussian_blur(width, height, spec.kernel_size, spec.sigma)
    return make_downsample(width, height, spec.factor)


def build_noise(config: ExperimentConfig, A: LinearOperator) -> NoiseModel:
    return NoiseModel.isotropic(config.noise_sigma, A.out_dim)


def build_model(
    prior: GaussianMixturePrior, schedule: NoiseSchedule
) -> GaussianMixtureScore:
    return GaussianMixtureScore(prior, schedule)
