"""Discrete solution/residual space pairs for Newton methods in function space.

A problem posed between a Hilbert space U of solutions and a dual-like space V
of residuals needs three operations besides plain vector arithmetic: the U-norm
of a coefficient vector, the Riesz representative of a residual functional, and
the V-norm evaluated through that representative.  Both spaces here discretize
the pair U = H^1_0 (energy inner product) and V = H^-1 on an interval, next to
a trivial scalar space used by scalar demo problems.

Residual vectors come in two flavors: nodal values of an L^2 function, or dual
coefficients (the functional already integrated against the basis).  Functions
below accept either, with ``dual=True`` the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded


class SpaceMismatchError(ValueError):
    """Raised when vectors from different spaces are combined."""


class SingularOperatorError(RuntimeError):
    """Raised when a stiffness factorization fails."""


@dataclass(frozen=True)
class StateVector:
    """Coefficient vector tagged with the space it lives in.

    Used for iterates, increments, and residual functionals alike; the space
    tag supplies the norms and guards against mixing discretizations.
    """

    coeffs: np.ndarray
    space: object

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.space.n_dof,):
            raise SpaceMismatchError(
                f"coefficient shape {c.shape} does not match space with "
                f"{self.space.n_dof} dofs"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients in StateVector")
        object.__setattr__(self, "coeffs", c)

    def _check(self, other: "StateVector"):
        if not isinstance(other, StateVector):
            raise TypeError("expected a StateVector")
        if self.space != other.space:
            raise SpaceMismatchError("operands live in different spaces")

    def __add__(self, other):
        self._check(other)
        return StateVector(self.coeffs + other.coeffs, self.space)

    def __sub__(self, other):
        self._check(other)
        return StateVector(self.coeffs - other.coeffs, self.space)

    def __mul__(self, scalar):
        return StateVector(self.coeffs * float(scalar), self.space)

    __rmul__ = __mul__

    def __neg__(self):
        return StateVector(-self.coeffs, self.space)

    def norm_u(self) -> float:
        return self.space.u_norm(self.coeffs)


@dataclass(frozen=True)
class ScalarSpace:
    """One-dimensional space where both norms reduce to the absolute value."""

    n_dof: int = 1

    def zeros(self):
        return np.zeros(1)

    def u_inner(self, x, y) -> float:
        return float(np.dot(x, y))

    def u_norm(self, x) -> float:
        return abs(float(x[0]))

    def stiffness_action(self, x):
        return np.array(x, dtype=float)

    def riesz_dual(self, b):
        return np.array(b, dtype=float)

    def mass_dual(self, v):
        return np.array(v, dtype=float)

    def jacobi_diagonal(self):
        return np.ones(1)

    def v_norm_dual(self, b) -> float:
        return abs(float(b[0]))


@dataclass
class UniformGridSpace:
    """Finite differences on a uniform grid over (a, b), zero boundary values.

    Interior nodes x_i = a + i*h, i = 1..n_dof, h = (b - a)/(n_dof + 1).  The
    U inner product is the energy product u' v' integrated by first-order
    differences (u^T K v with K the scaled second-difference matrix); duality
    against nodal functions uses the lumped mass h*I.  Riesz solves use a
    banded Cholesky factorization, computed once and reused.
    """

    a: float
    b: float
    n_dof: int
    _cho: object = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.n_dof < 1:
            raise ValueError("n_dof must be positive")
        if not self.b > self.a:
            raise ValueError("need b > a")
        self.h = (self.b - self.a) / (self.n_dof + 1)
        self.nodes = self.a + self.h * np.arange(1, self.n_dof + 1)

    def __eq__(self, other):
        return (
            isinstance(other, UniformGridSpace)
            and (self.a, self.b, self.n_dof) == (other.a, other.b, other.n_dof)
        )

    def __hash__(self):
        return hash((self.a, self.b, self.n_dof))

    def zeros(self):
        return np.zeros(self.n_dof)

    def stiffness_action(self, x):
        x = np.asarray(x, dtype=float)
        z = 2.0 * x
        z[:-1] -= x[1:]
        z[1:] -= x[:-1]
        return z / self.h

    def u_inner(self, x, y) -> float:
        return float(np.dot(x, self.stiffness_action(y)))

    def u_norm(self, x) -> float:
        return float(np.sqrt(max(self.u_inner(x, x), 0.0)))

    def _factorization(self):
        if self._cho is None:
            ab = np.zeros((2, self.n_dof))
            ab[0, 1:] = -1.0 / self.h
            ab[1, :] = 2.0 / self.h
            try:
                self._cho = cholesky_banded(ab, lower=False)
            except np.linalg.LinAlgError as exc:  # pragma: no cover
                raise SingularOperatorError(str(exc)) from exc
        return self._cho

    def riesz_dual(self, bdual):
        return cho_solve_banded((self._factorization(), False), np.asarray(bdual, dtype=float))

    def mass_dual(self, v):
        return self.h * np.asarray(v, dtype=float)

    def jacobi_diagonal(self):
        return np.full(self.n_dof, 2.0 / self.h)

    def v_norm_dual(self, bdual) -> float:
        r = self.riesz_dual(bdual)
        return float(np.sqrt(max(np.dot(r, np.asarray(bdual, dtype=float)), 0.0)))


def u_norm(u: StateVector) -> float:
    """Energy norm of a solution-space vector."""
    return u.space.u_norm(u.coeffs)


def riesz_representation(v: StateVector, dual: bool = True) -> StateVector:
    """Solution-space representative r of a residual functional v.

    r solves (r, w)_U = <v, w> for all test vectors w.  With ``dual=False``
    the input holds nodal values and is first paired with the mass matrix.
    """
    b = v.coeffs if dual else v.space.mass_dual(v.coeffs)
    return StateVector(v.space.riesz_dual(b), v.space)


def v_norm(v: StateVector, dual: bool = True) -> float:
    """Residual-space norm, evaluated through the Riesz representative."""
    b = v.coeffs if dual else v.space.mass_dual(v.coeffs)
    return v.space.v_norm_dual(b)
