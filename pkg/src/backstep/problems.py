"""Problem operators: scalar demo, a singularly perturbed BVP, minimal surfaces.

A problem object bundles what the step-controlled Newton driver needs:
``space``, ``increment(u)`` returning the Newton direction -f(u) (exactly for
the scalar demo, through a Krylov solve with the Riesz preconditioner for the
discretized BVPs), and ``residual_v_norm(u)``.  The 1-D finite element
problems are expressed as semilinear definitions
F(u) phi = int flux(x, u') phi' + reaction(x, u) phi and bound to a space by
GalerkinProblem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import fem
from .krylov import KrylovConfig, LinearOperatorSpec, cg, gmres
from .spaces import ScalarSpace, StateVector, UniformGridSpace
from .stepcontrol import Increment, OperatorFailureError


class ArctanProblem:
    """Scalar equation arctan(u) = 0 with the exact Newton increment.

    The increment provider is f(u) = (1 + u^2) * arctan(u); full Newton steps
    from |u0| >= 2 overshoot so badly that the iteration diverges, which makes
    this the canonical step-control demo.
    """

    def __init__(self):
        self.space = ScalarSpace()

    def residual(self, u: StateVector) -> StateVector:
        return StateVector(np.arctan(u.coeffs), self.space)

    def residual_v_norm(self, u: StateVector) -> float:
        return abs(float(np.arctan(u.coeffs[0])))

    def jacobian_action(self, u: StateVector, du: StateVector) -> StateVector:
        return StateVector(du.coeffs / (1.0 + u.coeffs**2), self.space)

    def increment(self, u: StateVector) -> Increment:
        val = float(u.coeffs[0])
        delta = -(1.0 + val * val) * np.arctan(val)
        if not np.isfinite(delta):
            raise OperatorFailureError(f"increment overflow at u = {val:g}")
        return Increment(StateVector(np.array([delta]), self.space), None, 0.0)


class CarrierProblem:
    """Finite-difference discretization of a singularly perturbed BVP.

    eps*u'' + 2*(1 - x^2)*u + u^2 = 1 on (-1, 1) with zero boundary values.
    Residual entries are mass-weighted so they are dual coefficients:
    F_i = h * (eps*D2(u)_i + 2*(1 - x_i^2)*u_i + u_i^2 - 1).  Increments come
    from the residual-minimizing Krylov solver preconditioned with the Riesz
    map, stopped at relative V-norm ``inner_tol`` (the contraction rate the
    outer iteration inherits).
    """

    def __init__(self, eps: float = 1e-3, n_dof: int = 2047, inner_tol: float = 1e-2,
                 alpha_interpolation: bool = False, max_inner: Optional[int] = None):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = float(eps)
        self.space = UniformGridSpace(-1.0, 1.0, n_dof)
        self.inner_tol = float(inner_tol)
        self.alpha_interpolation = alpha_interpolation
        self.max_inner = max_inner or n_dof
        x = self.space.nodes
        self._weight = 2.0 * (1.0 - x * x)

    def residual_dual(self, coeffs):
        sp = self.space
        return -self.eps * sp.stiffness_action(coeffs) + sp.h * (
            self._weight * coeffs + coeffs**2 - 1.0
        )

    def residual(self, u: StateVector) -> StateVector:
        return StateVector(self.residual_dual(u.coeffs), self.space)

    def residual_v_norm(self, u: StateVector) -> float:
        return self.space.v_norm_dual(self.residual_dual(u.coeffs))

    def jacobian_action(self, u: StateVector, du) -> StateVector:
        dc = du.coeffs if isinstance(du, StateVector) else np.asarray(du, dtype=float)
        out = -self.eps * self.space.stiffness_action(dc) + self.space.h * (
            (self._weight + 2.0 * u.coeffs) * dc
        )
        return StateVector(out, self.space)

    def increment(self, u: StateVector) -> Increment:
        sp = self.space
        ucoef = u.coeffs
        diag = sp.h * (self._weight + 2.0 * ucoef)

        def apply(v):
            return -self.eps * sp.stiffness_action(v) + diag * v

        op = LinearOperatorSpec(apply=apply, preconditioner=sp.riesz_dual,
                                space=sp, self_adjoint=True)
        rhs = StateVector(-self.residual_dual(ucoef), sp)
        res = gmres(op, rhs, KrylovConfig(tol=self.inner_tol, max_iters=self.max_inner,
                                          alpha_interpolation=self.alpha_interpolation))
        if not res.converged:
            raise OperatorFailureError(
                f"inner solve stalled at relative residual {res.relative_residual:.3e}"
            )
        return Increment(res.increment, res.iterations, res.relative_residual)


def minsurf_flux(v):
    """Minimal-surface flux g(v) = v / sqrt(1 + |v|^2); |g| < 1 everywhere."""
    v = np.asarray(v, dtype=float)
    return v / np.sqrt(1.0 + np.sum(v * v, axis=-1, keepdims=True))


def minsurf_flux_jacobian(v):
    """Derivative of the minimal-surface flux, shape (..., d, d).

    Eigenvalues: (1 + |v|^2)^(-3/2) along v and (1 + |v|^2)^(-1/2) on its
    complement, hence positive definite with spectrum in (0, 1].
    """
    v = np.asarray(v, dtype=float)
    s = 1.0 + np.sum(v * v, axis=-1)
    eye = np.eye(v.shape[-1])
    outer = v[..., :, None] * v[..., None, :]
    return (eye - outer / s[..., None, None]) / np.sqrt(s)[..., None, None]


@dataclass(frozen=True)
class Semilinear1D:
    """Weak-form definition F(u) phi = int flux(x, u')*phi' + reaction(x, u)*phi.

    ``spd`` declares whether the Galerkin matrix of F' is symmetric positive
    definite, which decides between CG and GMRES for increments.
    """

    flux: Callable
    flux_prime: Callable
    reaction: Callable
    reaction_prime: Callable
    domain: tuple
    dirichlet: tuple = (0.0, 0.0)
    spd: bool = True


def minimal_surface_1d(dirichlet=(0.0, 1.0), domain=(0.0, 1.0)) -> Semilinear1D:
    """Rotationally reduced minimal surface problem; exact solution: the chord."""
    return Semilinear1D(
        flux=lambda x, s: s / np.sqrt(1.0 + s * s),
        flux_prime=lambda x, s: (1.0 + s * s) ** -1.5,
        reaction=lambda x, u: np.zeros_like(u),
        reaction_prime=lambda x, u: np.zeros_like(u),
        domain=tuple(map(float, domain)),
        dirichlet=tuple(map(float, dirichlet)),
        spd=True,
    )


def carrier_semilinear(eps: float) -> Semilinear1D:
    """Weak form of the Carrier BVP: -eps*int u' phi' + int (2(1-x^2)u + u^2 - 1) phi.

    The gradient block enters with a negative sign, so the Galerkin matrix is
    symmetric but indefinite once the reaction term dominates; increments go
    through GMRES.
    """
    return Semilinear1D(
        flux=lambda x, s: -eps * s,
        flux_prime=lambda x, s: np.full_like(s, -eps),
        reaction=lambda x, u: 2.0 * (1.0 - x * x) * u + u * u - 1.0,
        reaction_prime=lambda x, u: 2.0 * (1.0 - x * x) + 2.0 * u,
        domain=(-1.0, 1.0),
        dirichlet=(0.0, 0.0),
        spd=False,
    )


def poisson_1d(source: float = 1.0, domain=(0.0, 1.0)) -> Semilinear1D:
    """Linear -u'' = source, handy as an exactness check."""
    return Semilinear1D(
        flux=lambda x, s: np.array(s, dtype=float),
        flux_prime=lambda x, s: np.ones_like(s),
        reaction=lambda x, u: np.full_like(u, -source),
        reaction_prime=lambda x, u: np.zeros_like(u),
        domain=tuple(map(float, domain)),
        dirichlet=(0.0, 0.0),
        spd=True,
    )


class GalerkinProblem:
    """Semilinear definition bound to a finite element space.

    Supplies the problem-operator protocol; increments solve the Galerkin
    system of F'(u) du = -F(u) with CG (SPD definitions) or GMRES, both
    preconditioned by the space's Riesz map and stopped at relative V-norm
    ``inner_tol``.
    """

    def __init__(self, definition: Semilinear1D, space: fem.FeSpace1D,
                 inner_tol: float = 1e-3, max_inner: Optional[int] = None):
        if space.dirichlet != definition.dirichlet:
            raise ValueError("space boundary values do not match the problem definition")
        if (space.mesh.nodes[0], space.mesh.nodes[-1]) != definition.domain:
            raise ValueError("space mesh does not cover the problem domain")
        self.definition = definition
        self.space = space
        self.inner_tol = float(inner_tol)
        self.max_inner = max_inner or max(2 * space.n_dof, 8)

    def residual_dual(self, coeffs):
        return fem.assemble_residual(self.definition, self.space, coeffs)

    def residual(self, u: StateVector) -> StateVector:
        return StateVector(self.residual_dual(u.coeffs), self.space)

    def residual_v_norm(self, u: StateVector) -> float:
        return self.space.v_norm_dual(self.residual_dual(u.coeffs))

    def jacobian_action(self, u: StateVector, du) -> StateVector:
        dc = du.coeffs if isinstance(du, StateVector) else np.asarray(du, dtype=float)
        out = fem.assemble_jacobian_action(self.definition, self.space, u.coeffs, dc)
        return StateVector(out, self.space)

    def increment(self, u: StateVector) -> Increment:
        sp = self.space
        mat = fem.assemble_jacobian_matrix(self.definition, sp, u.coeffs)
        op = LinearOperatorSpec(apply=lambda v: mat @ v, preconditioner=sp.riesz_dual,
                                space=sp, self_adjoint=True)
        rhs = StateVector(-self.residual_dual(u.coeffs), sp)
        cfg = KrylovConfig(tol=self.inner_tol, max_iters=self.max_inner)
        res = (cg if self.definition.spd else gmres)(op, rhs, cfg)
        if not res.converged:
            raise OperatorFailureError(
                f"inner solve stalled at relative residual {res.relative_residual:.3e}"
            )
        return Increment(res.increment, res.iterations, res.relative_residual)

    def initial_state(self) -> StateVector:
        """Lift-only initial guess: zero homogeneous part."""
        return StateVector(self.space.zeros(), self.space)
