"""Abstract interfaces for score models and measurement operators."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, ClassVar

import numpy as np

from cmi_dps.exceptions import CapabilityError, DenseLimitError, ShapeError

if TYPE_CHECKING:
    from typing import Any

DEFAULT_TENSOR_LIMIT = 64
DEFAULT_DENSE_LIMIT = 256


class ScoreModel(ABC):
    """Provider of ``grad log p_t`` and its higher derivatives.

    Directional methods accept either a single ``d``-vector or a batch of
    directions shaped ``(n, d)`` and return an array of the same shape, so
    all Hutchinson probes of a step can be contracted in one call.

    Subclasses set :attr:`has_dense_hessian` and :attr:`has_third_order` to
    advertise which derivatives they can provide; the default
    implementations of :meth:`hvp`, :meth:`hessian` and
    :meth:`dense_third_tensor` build on whichever capability is present.
    """

    has_dense_hessian: ClassVar[bool] = False
    has_third_order: ClassVar[bool] = False

    @property
    def dimension(self) -> int | None:
        """Data dimension ``d``, or ``None`` when inferred from inputs."""
        return None

    @abstractmethod
    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        """Return ``grad log p_t(x)`` for a point or an ``(n, d)`` batch."""

    def hessian(self, x: np.ndarray, t: int) -> np.ndarray:
        """Return the symmetric ``d x d`` Hessian of ``log p_t`` at ``x``."""
        if not self.has_dense_hessian:
            msg = (
                f"{type(self).__name__} provides no Hessian; "
                "wrap it with finite_diff_wrap"
            )
            raise CapabilityError(msg)
        x = np.asarray(x, dtype=np.float64)
        columns = self.hvp(x, t, np.eye(x.shape[-1]))
        return 0.5 * (columns + columns.T)

    def hvp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        """Return ``hessian(x, t) @ v`` for one or many directions."""
        if not self.has_dense_hessian:
            msg = f"{type(self).__name__} provides no Hessian-vector products"
            raise CapabilityError(msg)
        return np.asarray(v, dtype=np.float64) @ self.hessian(x, t)

    def third_bilinear_grad(
        self, x: np.ndarray, t: int, u: np.ndarray, v: np.ndarray
    ) -> np.ndarray:
        """Return ``grad_x [u^T hessian(x, t) v]`` for paired directions."""
        msg = f"{type(self).__name__} provides no third-order derivatives"
        raise CapabilityError(msg)

    def dense_third_tensor(
        self, x: np.ndarray, t: int, limit: int = DEFAULT_TENSOR_LIMIT
    ) -> np.ndarray:
        """Materialise ``grad^3 log p_t(x)`` as a ``d x d x d`` array.

        Raises:
            DenseLimitError: If ``d`` exceeds ``limit``.
        """
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[-1]
        check_tensor_limit(d, limit)
        eye = np.eye(d)
        u = np.repeat(eye, d, axis=0)
        v = np.tile(eye, (d, 1))
        return self.third_bilinear_grad(x, t, u, v).reshape(d, d, d)


class LinearOperator(ABC):
    """A linear measurement map ``A: R^d -> R^m``.

    Attributes:
        kind: Operator tag used in configs and run records.
    """

    kind: ClassVar[str] = "dense"

    @property
    @abstractmethod
    def in_dim(self) -> int:
        """Input dimension ``d``."""

    @property
    @abstractmethod
    def out_dim(self) -> int:
        """Output dimension ``m``."""

    @abstractmethod
    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return ``A @ x``."""

    @abstractmethod
    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Return ``A.T @ y``."""

    def describe(self) -> dict[str, Any]:
        """Return a JSON-serialisable description for run records."""
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def to_dense(self, limit: int = DEFAULT_DENSE_LIMIT) -> np.ndarray:
        """Materialise ``A`` as an ``m x d`` matrix, column by column.

        Raises:
            DenseLimitError: If ``d`` exceeds ``limit``.
        """
        self._check_dense_limit(limit)
        columns = [self.apply(e) for e in np.eye(self.in_dim)]
        return np.stack(columns, axis=1).reshape(self.out_dim, self.in_dim)

    def _check_dense_limit(self, limit: int) -> None:
        if self.in_dim > limit:
            msg = (
                f"operator input dimension {self.in_dim} exceeds dense limit "
                f"{limit}; use the Hutchinson gradient path"
            )
            raise DenseLimitError(msg)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.in_dim,):
            msg = f"{self.kind} operator expects shape ({self.in_dim},), got {x.shape}"
            raise ShapeError(msg)
        return x

    def _check_output(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.out_dim,):
            msg = f"{self.kind} adjoint expects shape ({self.out_dim},), got {y.shape}"
            raise ShapeError(msg)
        return y


def check_tensor_limit(d: int, limit: int) -> None:
    """Raise :class:`DenseLimitError` when a rank-3 tensor would be too large."""
    if d > limit:
        msg = (
            f"dimension {d} exceeds dense tensor limit {limit}; "
            "use cmi_grad_hutchinson instead"
        )
        raise DenseLimitError(msg)
