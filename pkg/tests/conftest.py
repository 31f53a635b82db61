"""Pytest configuration and fixtures."""

from __future__ import annotations

import sys
from typing import TYPE_CHECKING

import numpy as np
import pytest

from cmi_dps.diffusion.schedule import build_schedule
from cmi_dps.diffusion.score_models import GaussianMixturePrior, GaussianMixtureScore

if TYPE_CHECKING:
    from collections.abc import Generator

    from cmi_dps.diffusion.schedule import NoiseSchedule


@pytest.fixture(autouse=True)
def reset_typer_force_terminal() -> Generator[None]:
    """Reset typer.rich_utils.FORCE_TERMINAL before each test.

    When FORCE_COLOR=1 is set in CI, the first CLI invocation imports
    ``typer.rich_utils``, which caches ``FORCE_TERMINAL = True`` for the rest
    of the session.  Later ``CliRunner(env={"FORCE_COLOR": None})`` calls then
    still get ANSI escapes that break substring assertions on the output.
    """
    ru = sys.modules.get("typer.rich_utils")
    old = getattr(ru, "FORCE_TERMINAL", None) if ru is not None else None
    if ru is not None:
        ru.FORCE_TERMINAL = None  # type: ignore[attr-defined]
    yield
    if ru is not None:
        ru.FORCE_TERMINAL = old  # type: ignore[attr-defined]


@pytest.fixture
def schedule() -> NoiseSchedule:
    """A short ten-step schedule with moderate noise levels."""
    return build_schedule("linear", 10, 0.01, 0.2)


@pytest.fixture
def two_component_prior() -> GaussianMixturePrior:
    """Asymmetric two-component mixture in two dimensions."""
    return GaussianMixturePrior(
        weights=np.array([0.3, 0.7]),
        means=np.array([[1.0, 0.5], [-0.8, -0.2]]),
        covariances=np.array(
            [[[0.3, 0.05], [0.05, 0.2]], [[0.25, -0.04], [-0.04, 0.35]]]
        ),
    )


@pytest.fixture
def four_dim_prior() -> GaussianMixturePrior:
    """Two-component mixture in four dimensions."""
    mean = np.array([1.0, 0.5, -0.5, 0.25])
    return GaussianMixturePrior(
        weights=np.array([0.4, 0.6]),
        means=np.stack([mean, -mean]),
        covariances=np.stack([0.25 * np.eye(4), 0.3 * np.eye(4)]),
    )


@pytest.fixture
def gmm2(
    two_component_prior: GaussianMixturePrior, schedule: NoiseSchedule
) -> GaussianMixtureScore:
    return GaussianMixtureScore(two_component_prior, schedule)


@pytest.fixture
def gmm4(
    four_dim_prior: GaussianMixturePrior, schedule: NoiseSchedule
) -> GaussianMixtureScore:
    return GaussianMixtureScore(four_dim_prior, schedule)
