"""Smoothing preconditioners and the preconditioned operators handed to solvers.

Every preconditioner is a fixed number of stationary sweeps on ``A z = r``
started from ``z = 0``, which makes ``r -> z`` a fixed linear map.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .sparse import StencilMatrix, matvec, to_csr, DimensionError

__all__ = [
    "PreconditionerSpec",
    "SingularPreconditionerError",
    "Preconditioner",
    "apply",
    "SystemOperator",
    "LEFT",
    "RIGHT",
]

LEFT, RIGHT = "left", "right"
KINDS = ("identity", "jacobi", "ssor")


class SingularPreconditionerError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class PreconditionerSpec:
    """What to apply: ``kind`` in identity/jacobi/ssor, ``sweeps``, ``relax``.

    ``global_sweep`` adds one extra relaxed point-Jacobi sweep after the
    ``sweeps`` Jacobi sweeps (the 5 + 1 smoothing pattern); it is ignored
    for the other kinds.
    """

    kind: str = "jacobi"
    sweeps: int = 5
    relax: float | None = None
    side: str = LEFT
    global_sweep: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if int(self.sweeps) != self.sweeps or self.sweeps < 1:
            raise ValueError("sweeps must be a positive integer")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("relaxation parameter must lie in (0, 2)")
        if self.side not in (LEFT, RIGHT):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")

    @property
    def omega(self) -> float:
        if self.relax is not None:
            return float(self.relax)
        return 1.0 if self.kind == "ssor" else 0.8

    def with_side(self, side: str) -> "PreconditionerSpec":
        return PreconditionerSpec(self.kind, self.sweeps, self.relax, side, self.global_sweep)


class Preconditioner:
    """A :class:`PreconditionerSpec` bound to a matrix.

    Calling the object applies ``M^{-1}``.  Products with ``A`` made during the
    sweeps are not counted as matvecs.
    """

    def __init__(self, spec: PreconditionerSpec, A: StencilMatrix):
        self.spec = spec
        self.A = A
        if spec.kind != "identity" and np.any(A.diagonal == 0.0):
            raise SingularPreconditionerError("zero diagonal entry")
        self._dinv = 1.0 / A.diagonal

    @cached_property
    def _ssor_factors(self):
        w = self.spec.omega
        A = to_csr(self.A)
        D = sp.diags(A.diagonal())
        L = sp.tril(A, k=-1)
        U = sp.triu(A, k=1)
        fwd = (D / w + L).tocsr()
        bwd = (D / w + U).tocsr()
        # D/w + L applied to z_new = r - (U + (1 - 1/w) D) z
        fwd_rhs = (U + (1.0 - 1.0 / w) * D).tocsr()
        bwd_rhs = (L + (1.0 - 1.0 / w) * D).tocsr()
        return fwd, fwd_rhs, bwd, bwd_rhs

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.A.N,):
            raise DimensionError(f"vector of length {r.shape} does not match N={self.A.N}")
        kind = self.spec.kind
        if kind == "identity":
            return r.copy()
        if kind == "jacobi":
            w = self.spec.omega
            z = w * self._dinv * r
            extra = 1 if self.spec.global_sweep else 0
            for _ in range(self.spec.sweeps - 1 + extra):
                z += w * self._dinv * (r - self.A.dot(z))
            return z
        fwd, fwd_rhs, bwd, bwd_rhs = self._ssor_factors
        z = np.zeros_like(r)
        for _ in range(self.spec.sweeps):
            z = spsolve_triangular(fwd, r - fwd_rhs @ z, lower=True)
            z = spsolve_triangular(bwd, r - bwd_rhs @ z, lower=False)
        return z


def apply(spec: PreconditionerSpec, A: StencilMatrix, r: np.ndarray) -> np.ndarray:
    """Return ``z = M^{-1} r`` for the preconditioner described by ``spec``."""
    return Preconditioner(spec, A)(r)


class SystemOperator:
    """Preconditioned system operator; each call is one counted matvec.

    ``side='left'`` iterates on ``M^{-1} A x = M^{-1} b``; ``side='right'`` on
    ``A M^{-1} y = b`` with ``x = M^{-1} y``.
    """

    def __init__(self, A: StencilMatrix, spec: PreconditionerSpec | None = None, side: str | None = None):
        spec = spec or PreconditionerSpec("identity")
        side = side or spec.side
        if side not in (LEFT, RIGHT):
            raise ValueError(f"bad side {side!r}")
        self.A = A
        self.spec = spec.with_side(side)
        self.side = side
        self.M = Preconditioner(self.spec, A)
        self.N = A.N

    @property
    def residual_kind(self) -> str:
        if self.spec.kind == "identity" or self.side == RIGHT:
            return "true"
        return "preconditioned"

    def __call__(self, v: np.ndarray) -> np.ndarray:
        if self.side == LEFT:
            return self.M(matvec(self.A, v))
        return matvec(self.A, self.M(v))

    def uncounted(self, v: np.ndarray) -> np.ndarray:
        if self.side == LEFT:
            return self.M(self.A.dot(v))
        return self.A.dot(self.M(v))

    def rhs(self, b: np.ndarray) -> np.ndarray:
        """Right-hand side of the iterated system."""
        return self.M(b) if self.side == LEFT else np.asarray(b, dtype=np.float64).copy()

    def solution(self, y: np.ndarray) -> np.ndarray:
        """Map an iterate of the operator system back to ``x``."""
        return self.M(y) if self.side == RIGHT else y
