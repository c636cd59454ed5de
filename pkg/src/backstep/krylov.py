"""Krylov solvers aware of the solution-space inner product.

Newton increments here must satisfy a relative residual contract measured in
the residual-space norm: ||b - A*du||_V <= tol * ||b||_V.  With the Riesz map
as left preconditioner P and Arnoldi run in the U inner product, the
preconditioned residual U-norm equals exactly that V-norm, so the stopping
test of GMRES *is* the contract.  CG plays the same game through the pairing
r^T P r.  Operators are callables mapping solution coefficients to dual
coefficients; preconditioners map dual back to solution coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .spaces import StateVector


class IndefiniteOperatorError(RuntimeError):
    """CG met a direction of nonpositive curvature."""


class InterpolationError(RuntimeError):
    """No admissible interpolation coefficient exists."""


@dataclass
class LinearOperatorSpec:
    """Linear system data: operator, preconditioner, and the hosting space."""

    apply: Callable[[np.ndarray], np.ndarray]
    preconditioner: Callable[[np.ndarray], np.ndarray]
    space: object
    self_adjoint: bool = False


@dataclass
class KrylovConfig:
    tol: float
    max_iters: int
    alpha_interpolation: bool = False
    keep_basis: bool = False
    reorth_threshold: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class KrylovResult:
    increment: StateVector
    converged: bool
    iterations: int
    relative_residual: float
    residual_history: list = field(default_factory=list)
    alpha: Optional[float] = None
    penultimate: Optional[StateVector] = None
    basis: Optional[list] = None


def _u_inner_cached(space, x, kx):
    """<x, x>_U given the cached stiffness product kx = K x."""
    return float(max(np.dot(x, kx), 0.0))


def gmres(op: LinearOperatorSpec, rhs: StateVector, config: KrylovConfig) -> KrylovResult:
    """Residual-minimizing solve of op.apply(x) = rhs in the U geometry.

    Arnoldi orthogonalizes in the space's U inner product (modified
    Gram-Schmidt, one extra pass when orthogonality degrades past
    ``reorth_threshold``), no restarts.  The returned relative residual is
    recomputed from scratch, not read off the recursion.
    """
    space = op.space
    b = np.asarray(rhs.coeffs, dtype=float)

    r0 = op.preconditioner(b)
    kr0 = space.stiffness_action(r0)
    beta = float(np.sqrt(_u_inner_cached(space, r0, kr0)))
    if beta == 0.0:
        zero = StateVector(np.zeros_like(b), space)
        return KrylovResult(zero, True, 0, 0.0, [0.0])

    basis = [r0 / beta]
    kbasis = [kr0 / beta]
    max_m = config.max_iters
    hess = np.zeros((max_m + 1, max_m))
    # Givens rotation state for the running residual estimate
    cs = np.zeros(max_m)
    sn = np.zeros(max_m)
    g = np.zeros(max_m + 1)
    g[0] = beta
    history = [1.0]

    m = 0
    breakdown = False
    while m < max_m:
        w = op.preconditioner(op.apply(basis[m]))
        kw = space.stiffness_action(w)
        norm_before = np.sqrt(_u_inner_cached(space, w, kw))
        hcol = np.zeros(m + 2)
        for i in range(m + 1):
            hij = float(np.dot(kbasis[i], w))
            hcol[i] = hij
            w -= hij * basis[i]
            kw -= hij * kbasis[i]
        wnorm = np.sqrt(_u_inner_cached(space, w, kw))
        # one reorthogonalization pass if residual overlap is too large
        corr = np.array([np.dot(kbasis[i], w) for i in range(m + 1)])
        if corr.size and np.max(np.abs(corr)) > config.reorth_threshold * max(wnorm, 1e-300):
            for i in range(m + 1):
                w -= corr[i] * basis[i]
                kw -= corr[i] * kbasis[i]
            hcol[: m + 1] += corr
            wnorm = np.sqrt(_u_inner_cached(space, w, kw))
        hcol[m + 1] = wnorm
        hess[: m + 2, m] = hcol

        # rotate a scratch copy of the column; hess itself stays unrotated
        # for the closing least-squares solves
        col = hcol.copy()
        for i in range(m):
            t = cs[i] * col[i] + sn[i] * col[i + 1]
            col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1]
            col[i] = t
        denom = np.hypot(col[m], col[m + 1])
        if denom == 0.0:
            cs[m], sn[m] = 1.0, 0.0
        else:
            cs[m], sn[m] = col[m] / denom, col[m + 1] / denom
        col[m] = denom
        col[m + 1] = 0.0
        g[m + 1] = -sn[m] * g[m]
        g[m] = cs[m] * g[m]
        m += 1
        history.append(abs(g[m]) / beta)

        if wnorm <= 1e-14 * max(norm_before, beta):
            breakdown = True
            break
        basis.append(w / wnorm)
        kbasis.append(kw / wnorm)
        if abs(g[m]) <= config.tol * beta:
            break

    def _solve_at(dim):
        if dim == 0:
            return np.zeros_like(b)
        y = np.linalg.lstsq(hess[: dim + 1, :dim], np.concatenate(([beta], np.zeros(dim))), rcond=None)[0]
        x = np.zeros_like(b)
        for i in range(dim):
            x += y[i] * basis[i]
        return x

    x = _solve_at(m)
    penult = StateVector(_solve_at(m - 1), space) if m >= 1 else None

    def _exact_rel(vec):
        res = op.preconditioner(b - op.apply(vec))
        return space.u_norm(res) / beta

    rel = _exact_rel(x)
    converged = rel <= config.tol * (1.0 + 1e-9)
    increment = StateVector(x, space)
    alpha = None
    if config.alpha_interpolation and converged and penult is not None:
        rhs_sv = StateVector(b, space)
        try:
            increment, alpha = alpha_interpolate(penult, increment, op, rhs_sv, config.tol)
            rel = _exact_rel(increment.coeffs)
        except InterpolationError:
            alpha = 1.0
    result = KrylovResult(
        increment,
        bool(converged),
        m,
        float(rel),
        history,
        alpha=alpha,
        penultimate=penult,
    )
    if config.keep_basis:
        result.basis = [np.array(v) for v in basis[:m]]
    return result


def alpha_interpolate(penult, last, op: LinearOperatorSpec, rhs: StateVector, kappa: float):
    """Blend the last two Krylov iterates so the residual meets kappa exactly.

    Finds alpha in [0, 1] with ||rhs - A*((1-a)*penult + a*last)||_V equal to
    kappa * ||rhs||_V; the residual norm along the segment is a quadratic in
    alpha, solved in closed form.  Requires the bracket
    nu(penult) > kappa*||rhs||_V >= nu(last).
    """
    space = op.space
    b = np.asarray(rhs.coeffs, dtype=float)
    pa = op.preconditioner(op.apply(penult.coeffs) - b)
    d = last.coeffs - penult.coeffs
    if not np.any(d):
        raise InterpolationError("iterates coincide, no segment to interpolate on")
    pd = op.preconditioner(op.apply(d))
    kpa = space.stiffness_action(pa)
    kpd = space.stiffness_action(pd)
    c0 = float(np.dot(pa, kpa))
    c1 = 2.0 * float(np.dot(pd, kpa))
    c2 = float(np.dot(pd, kpd))
    bnorm = space.u_norm(op.preconditioner(b))
    target = (kappa * bnorm) ** 2

    nu0 = c0
    nu1 = c0 + c1 + c2
    if nu1 > target * (1.0 + 1e-9):
        raise InterpolationError("last iterate does not meet the residual target")
    if nu0 <= target:
        raise InterpolationError("penultimate iterate already meets the target")
    if c2 <= 0.0:
        raise InterpolationError("degenerate residual quadratic")
    # smaller root of c2*a^2 + c1*a + (c0 - target), computed stably
    disc = c1 * c1 - 4.0 * c2 * (c0 - target)
    disc = max(disc, 0.0)
    sq = np.sqrt(disc)
    if c1 >= 0.0:
        alpha = 2.0 * (c0 - target) / (-c1 - sq)
    else:
        alpha = (-c1 - sq) / (2.0 * c2)
    alpha = float(min(max(alpha, 0.0), 1.0))
    blended = StateVector(penult.coeffs + alpha * d, space)
    return blended, alpha


def cg(op: LinearOperatorSpec, rhs: StateVector, config: KrylovConfig) -> KrylovResult:
    """Preconditioned conjugate gradients through the dual pairing r^T P r.

    The operator must be self-adjoint and positive in that pairing; a
    direction of nonpositive curvature raises IndefiniteOperatorError rather
    than returning garbage.
    """
    space = op.space
    b = np.asarray(rhs.coeffs, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    z = op.preconditioner(r)
    rz = float(np.dot(r, z))
    if rz < 0.0:
        raise IndefiniteOperatorError("preconditioner is not positive")
    b_norm = np.sqrt(rz)
    if b_norm == 0.0:
        return KrylovResult(StateVector(x, space), True, 0, 0.0, [0.0])

    p = z.copy()
    history = [1.0]
    converged = False
    it = 0
    while it < config.max_iters:
        ap = op.apply(p)
        pap = float(np.dot(p, ap))
        if pap <= 0.0:
            raise IndefiniteOperatorError(
                f"nonpositive curvature p^T A p = {pap:.3e} at iteration {it + 1}"
            )
        step = rz / pap
        x += step * p
        r -= step * ap
        z = op.preconditioner(r)
        rz_new = float(np.dot(r, z))
        it += 1
        rel = np.sqrt(max(rz_new, 0.0)) / b_norm
        history.append(float(rel))
        if rel <= config.tol:
            converged = True
            break
        p = z + (rz_new / rz) * p
        rz = rz_new

    r_exact = b - op.apply(x)
    z_exact = op.preconditioner(r_exact)
    rel = float(np.sqrt(max(np.dot(r_exact, z_exact), 0.0)) / b_norm)
    return KrylovResult(StateVector(x, space), converged and rel <= config.tol * (1.0 + 1e-9), it, rel, history)
