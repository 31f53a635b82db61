"""Linear measurement operators, Gaussian noise models and ``y = A x0 + n``.

Image-shaped operators act on row-major flattened ``height x width`` grids.
Every operator supplies an exact adjoint and can be materialised as a dense
``m x d`` matrix at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

from cmi_dps.diffusion.base import DEFAULT_DENSE_LIMIT, LinearOperator
from cmi_dps.diffusion.linalg import chol_solve, cholesky, logdet
from cmi_dps.exceptions import ConfigurationError, FactorizationError, ShapeError

if TYPE_CHECKING:
    from typing import Any

    from numpy.random import Generator


class Box(NamedTuple):
    """A rectangle on an image grid, in pixels."""

    row: int
    col: int
    height: int
    width: int


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


class SelectionOperator(LinearOperator):
    """Coordinate selection; ``apply`` keeps ``indices`` in increasing order.

    Rows of the dense form are distinct unit vectors, so ``A A^T = I``.
    """

    def __init__(
        self,
        d: int,
        indices: np.ndarray,
        kind: Literal["mask", "box_mask"] = "mask",
        details: dict[str, Any] | None = None,
    ) -> None:
        indices = np.array(indices, dtype=np.int64)
        if indices.ndim != 1 or np.any(np.diff(indices) <= 0):
            msg = "selection indices must be strictly increasing"
            raise ConfigurationError(msg)
        if indices.size and (indices[0] < 0 or indices[-1] >= d):
            msg = f"selection indices must lie in 0..{d - 1}"
            raise ConfigurationError(msg)
        indices.setflags(write=False)
        self._d = d
        self.indices = indices
        self.kind = kind
        self._details = details or {}

    @property
    def in_dim(self) -> int:
        return self._d

    @property
    def out_dim(self) -> int:
        return int(self.indices.size)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._check_input(x)[self.indices]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros(self._d)
        out[self.indices] = self._check_output(y)
        return out

    def describe(self) -> dict[str, Any]:
        return {
            **super().describe(),
            **self._details,
            "indices": self.indices.tolist(),
        }


class GaussianBlurOperator(LinearOperator):
    """Separable normalised Gaussian blur with zero padding.

    The kernel is symmetric, so under zero padding the operator equals its
    own adjoint.
    """

    kind = "blur"

    def __init__(self, width: int, height: int, kernel_size: int, sigma: float) -> None:
        _check_grid(width, height)
        if kernel_size < 1 or kernel_size % 2 == 0:
            msg = f"kernel_size must be a positive odd integer, got {kernel_size}"
            raise ConfigurationError(msg)
        if not sigma > 0.0:
            msg = f"blur sigma must be > 0, got {sigma}"
            raise ConfigurationError(msg)
        radius = kernel_size // 2
        offsets = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
        self.kernel = kernel / kernel.sum()
        self.width = width
        self.height = height
        self.kernel_size = kernel_size
        self.sigma = sigma

    @property
    def in_dim(self) -> int:
        return self.width * self.height

    @property
    def out_dim(self) -> int:
        return self.width * self.height

    def _blur(self, flat: np.ndarray) -> np.ndarray:
        image = flat.reshape(self.height, self.width)
        image = correlate1d(image, self.kernel, axis=0, mode="constant", cval=0.0)
        image = correlate1d(image, self.kernel, axis=1, mode="constant", cval=0.0)
        return image.reshape(-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._blur(self._check_input(x))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._blur(self._check_output(y))

    def describe(self) -> dict[str, Any]:
        return {
            **super().describe(),
            "width": self.width,
            "height": self.height,
            "kernel_size": self.kernel_size,
            "sigma": self.sigma,
            "boundary": "zero_pad",
        }


class DownsampleOperator(LinearOperator):
    """Block averaging over ``factor x factor`` tiles."""

    kind = "downsample"

    def __init__(self, width: int, height: int, factor: int) -> None:
        _check_grid(width, height)
        if factor < 1 or width % factor or height % factor:
            msg = f"downsample factor {factor} must divide the {height}x{width} grid"
            raise ConfigurationError(msg)
        self.width = width
        self.height = height
        self.factor = factor

    @property
    def in_dim(self) -> int:
        return self.width * self.height

    @property
    def out_dim(self) -> int:
        return self.in_dim // (self.factor * self.factor)

    def apply(self, x: np.ndarray) -> np.ndarray:
        f = self.factor
        image = self._check_input(x).reshape(self.height // f, f, self.width // f, f)
        return image.mean(axis=(1, 3)).reshape(-1)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        f = self.factor
        coarse = self._check_output(y).reshape(self.height // f, self.width // f)
        fine = np.repeat(np.repeat(coarse, f, axis=0), f, axis=1)
        return fine.reshape(-1) / (f * f)

    def describe(self) -> dict[str, Any]:
        return {
            **super().describe(),
            "width": self.width,
            "height": self.height,
            "factor": self.factor,
        }


class DenseOperator(LinearOperator):
    """An explicit ``m x d`` matrix."""

    kind = "dense"

    def __init__(self, matrix: np.ndarray) -> None:
        matrix = np.atleast_2d(np.array(matrix, dtype=np.float64))
        if matrix.ndim != 2:
            msg = f"dense operator needs a 2-D matrix, got shape {matrix.shape}"
            raise ShapeError(msg)
        matrix.setflags(write=False)
        self.matrix = matrix

    @classmethod
    def identity(cls, d: int) -> DenseOperator:
        return cls(np.eye(d))

    @property
    def in_dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.matrix.shape[0])

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ self._check_input(x)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.matrix.T @ self._check_output(y)

    def to_dense(self, limit: int = DEFAULT_DENSE_LIMIT) -> np.ndarray:
        self._check_dense_limit(limit)
        return np.array(self.matrix)

    def describe(self) -> dict[str, Any]:
        return {**super().describe(), "matrix": self.matrix.tolist()}


def _check_grid(width: int, height: int) -> None:
    if width < 1 or height < 1:
        msg = f"image grid must be at least 1x1, got {height}x{width}"
        raise ConfigurationError(msg)


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------


def make_random_mask(d: int, keep_fraction: float, rng: Generator) -> SelectionOperator:
    """Keep ``ceil(keep_fraction * d)`` coordinates chosen uniformly at random.

    Raises:
        ConfigurationError: If ``keep_fraction`` is outside ``(0, 1]``.
    """
    if not 0.0 < keep_fraction <= 1.0:
        msg = f"keep_fraction must lie in (0, 1], got {keep_fraction}"
        raise ConfigurationError(msg)
    m = math.ceil(round(keep_fraction * d, 9))
    indices = np.sort(rng.choice(d, size=m, replace=False))
    return SelectionOperator(
        d, indices, kind="mask", details={"keep_fraction": keep_fraction}
    )


def make_box_mask(width: int, height: int, box: Box) -> SelectionOperator:
    """Observe every pixel outside ``box``, in row-major order.

    Raises:
        ConfigurationError: If the box leaves the grid or covers all of it.
    """
    _check_grid(width, height)
    box = Box(*box)
    if (
        box.row < 0
        or box.col < 0
        or box.height < 1
        or box.width < 1
        or box.row + box.height > height
        or box.col + box.width > width
    ):
        msg = f"box {tuple(box)} does not fit inside the {height}x{width} grid"
        raise ConfigurationError(msg)
    hidden = np.zeros((height, width), dtype=bool)
    hidden[box.row : box.row + box.height, box.col : box.col + box.width] = True
    indices = np.flatnonzero(~hidden.reshape(-1))
    if indices.size == 0:
        msg = "box covers the whole grid; the measurement would be empty"
        raise ConfigurationError(msg)
    return SelectionOperator(
        width * height,
        indices,
        kind="box_mask",
        details={"width": width, "height": height, "box": list(box)},
    )


def make_gaussian_blur(
    width: int,
    height: int,
    kernel_size: int,
    sigma: float,
    boundary: Literal["zero_pad"] = "zero_pad",
) -> GaussianBlurOperator:
    if boundary != "zero_pad":
        msg = f"unsupported blur boundary: {boundary!r}"
        raise ConfigurationError(msg)
    return GaussianBlurOperator(width, height, kernel_size, sigma)


def make_downsample(width: int, height: int, factor: int) -> DownsampleOperator:
    return DownsampleOperator(width, height, factor)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Zero-mean Gaussian measurement noise ``N(0, Sigma_n)``.

    ``variance`` is a float for ``scalar``, an ``(m,)`` vector for
    ``diagonal`` and an ``(m, m)`` SPD matrix for ``dense``.  Zero variances
    are accepted for noiseless simulation, but every precision operation on
    such a model raises :class:`FactorizationError`.

    Attributes:
        kind: Covariance structure.
        dim: Measurement dimension ``m``.
        variance: Covariance parameters, see above.
    """

    kind: Literal["scalar", "diagonal", "dense"]
    dim: int
    variance: float | np.ndarray
    _chol: np.ndarray | None = field(
        default=None, init=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.kind == "scalar":
            value = float(self.variance)
            if value < 0.0 or not math.isfinite(value):
                msg = f"noise variance must be finite and >= 0, got {value}"
                raise ConfigurationError(msg)
            object.__setattr__(self, "variance", value)
        elif self.kind == "diagonal":
            diag = np.array(self.variance, dtype=np.float64)
            if diag.shape != (self.dim,) or np.any(diag < 0.0):
                msg = f"diagonal noise needs {self.dim} nonnegative variances"
                raise ConfigurationError(msg)
            diag.setflags(write=False)
            object.__setattr__(self, "variance", diag)
        elif self.kind == "dense":
            cov = np.array(self.variance, dtype=np.float64)
            if cov.shape != (self.dim, self.dim) or not np.allclose(cov, cov.T):
                msg = f"dense noise covariance must be symmetric {self.dim}x{self.dim}"
                raise ConfigurationError(msg)
            factor = cholesky(cov, what="dense noise covariance")
            cov.setflags(write=False)
            object.__setattr__(self, "variance", cov)
            object.__setattr__(self, "_chol", factor)
        else:
            msg = f"unknown noise kind: {self.kind!r}"
            raise ConfigurationError(msg)

    @classmethod
    def isotropic(cls, sigma: float, m: int) -> NoiseModel:
        """``sigma**2 I_m``."""
        return cls("scalar", m, sigma * sigma)

    def covariance(self) -> np.ndarray:
        if self.kind == "scalar":
            return float(self.variance) * np.eye(self.dim)
        if self.kind == "diagonal":
            return np.diag(self.variance)
        return np.array(self.variance)

    def sample(self, rng: Generator) -> np.ndarray:
        """Draw one noise vector; always consumes ``m`` standard normals."""
        z = rng.standard_normal(self.dim)
        if self.kind == "scalar":
            return math.sqrt(float(self.variance)) * z
        if self.kind == "diagonal":
            return np.sqrt(self.variance) * z
        assert self._chol is not None
        return self._chol @ z

    def _require_positive(self) -> None:
        if self.kind == "scalar" and float(self.variance) <= 0.0:
            msg = "noise precision undefined for zero variance"
            raise FactorizationError(msg)
        if self.kind == "diagonal" and np.any(self.variance <= 0.0):
            msg = "noise precision undefined for zero diagonal variance"
            raise FactorizationError(msg)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``Sigma_n^{-1} rhs`` for a vector or an ``(m, k)`` matrix."""
        self._require_positive()
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.dim:
            msg = f"noise solve expects leading dimension {self.dim}, got {rhs.shape}"
            raise ShapeError(msg)
        if self.kind == "scalar":
            return rhs / float(self.variance)
        if self.kind == "diagonal":
            diag = self.variance if rhs.ndim == 1 else self.variance[:, None]
            return rhs / diag
        assert self._chol is not None
        return chol_solve(self._chol, rhs)

    def logdet(self) -> float:
        self._require_positive()
        if self.kind == "scalar":
            return self.dim * math.log(float(self.variance))
        if self.kind == "diagonal":
            return float(np.sum(np.log(self.variance)))
        assert self._chol is not None
        return logdet(self._chol)

    def describe(self) -> dict[str, Any]:
        variance = self.variance
        if isinstance(variance, np.ndarray):
            variance = variance.tolist()
        return {"kind": self.kind, "dim": self.dim, "variance": variance}


def measure(
    A: LinearOperator, noise: NoiseModel, x0: np.ndarray, rng: Generator
) -> np.ndarray:
    """Return ``A x0 + n`` with ``n`` drawn from ``noise`` using ``rng``.

    Raises:
        ShapeError: If ``x0``, ``A`` and ``noise`` disagree on dimensions.
    """
    if noise.dim != A.out_dim:
        msg = f"noise dimension {noise.dim} does not match operator output {A.out_dim}"
        raise ShapeError(msg)
    return A.apply(x0) + noise.sample(rng)
