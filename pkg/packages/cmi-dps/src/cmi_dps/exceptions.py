"""Error vocabulary shared by the library and the experiment CLI.

Every error derives from :class:`CmiDpsError` and from the builtin it
specialises, so callers may catch either the package root or the familiar
builtin (``ValueError``, ``IndexError``, ...).
"""

from __future__ import annotations

import numpy as np


class CmiDpsError(Exception):
    """Root of the package error hierarchy."""


class ConfigurationError(CmiDpsError, ValueError):
    """An invalid parameter, range or configuration file.

    Attributes:
        line: 1-based line number in the offending config file, when known.
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StepIndexError(CmiDpsError, IndexError):
    """A diffusion step index outside ``1..N``."""


class ShapeError(CmiDpsError, ValueError):
    """Mismatched vector, matrix or tensor dimensions."""


class FactorizationError(CmiDpsError, np.linalg.LinAlgError):
    """A matrix required to be symmetric positive definite failed Cholesky."""


class DegenerateStepError(CmiDpsError, ValueError):
    """A step whose cumulative signal coefficient is zero."""


class CapabilityError(CmiDpsError, NotImplementedError):
    """A score model lacks a requested derivative order."""


class DenseLimitError(CmiDpsError, ValueError):
    """Dimension too large for a dense matrix or rank-3 tensor."""


class NonFiniteStateError(CmiDpsError, FloatingPointError):
    """The sampler state became non-finite.

    Attributes:
        step: Diffusion step at which the non-finite value appeared.
    """

    def __init__(self, step: int, message: str | None = None) -> None:
        self.step = step
        super().__init__(message or f"non-finite sampler state at step t={step}")

    def __reduce__(self) -> tuple[type[NonFiniteStateError], tuple[int, str]]:
        return (type(self), (self.step, str(self)))
