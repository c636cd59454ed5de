"""1-D meshes and nodal finite element spaces with energy-norm plumbing.

Cells carry Lagrange bases on Gauss-Lobatto points (shared endpoints give
global continuity); integration uses Gauss-Legendre with degree+2 points per
cell.  Dirichlet data is handled by lifting: a space stores its boundary
values, coefficient vectors hold interior dofs only, and all norms act on the
homogeneous part.  Semilinear problem definitions are consumed duck-typed;
they provide ``flux(x, s)`` and ``reaction(x, u)`` with their derivatives,
for residuals of the form  F(u) phi = int flux(x, u') phi' + reaction(x, u) phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from numpy.polynomial import legendre

from .spaces import SingularOperatorError, SpaceMismatchError, StateVector

MIN_CELL_WIDTH = 1e-12


@dataclass(frozen=True)
class Mesh1D:
    """Interval mesh: vertex coordinates plus per-cell bisection depth."""

    nodes: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        levels = np.asarray(self.levels, dtype=int)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("mesh needs at least two vertices")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("mesh vertices must be strictly increasing")
        if levels.shape != (nodes.size - 1,):
            raise ValueError("one level entry per cell required")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "levels", levels)

    @classmethod
    def uniform(cls, a: float, b: float, n_cells: int) -> "Mesh1D":
        return cls(np.linspace(a, b, n_cells + 1), np.zeros(n_cells, dtype=int))

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @property
    def widths(self):
        return np.diff(self.nodes)

    def bisect(self, marks) -> "Mesh1D":
        """New mesh with every marked cell split at its midpoint."""
        marks = np.asarray(marks, dtype=bool)
        if marks.shape != (self.n_cells,):
            raise ValueError("one mark per cell required")
        if not marks.any():
            return self
        if np.any(self.widths[marks] / 2.0 <= MIN_CELL_WIDTH):
            raise ValueError("refinement would create cells below the minimum width")
        new_nodes = []
        new_levels = []
        for c in range(self.n_cells):
            new_nodes.append(self.nodes[c])
            if marks[c]:
                new_nodes.append(0.5 * (self.nodes[c] + self.nodes[c + 1]))
                new_levels.extend([self.levels[c] + 1] * 2)
            else:
                new_levels.append(self.levels[c])
        new_nodes.append(self.nodes[-1])
        return Mesh1D(np.array(new_nodes), np.array(new_levels, dtype=int))


def lobatto_points(degree: int):
    """Gauss-Lobatto points on [-1, 1]: endpoints plus roots of P_degree'."""
    if degree < 1:
        raise ValueError("degree must be at least 1")
    if degree == 1:
        return np.array([-1.0, 1.0])
    coeff = np.zeros(degree + 1)
    coeff[degree] = 1.0
    interior = np.sort(legendre.legroots(legendre.legder(coeff)))
    return np.concatenate(([-1.0], interior, [1.0]))


def lagrange_tables(nodes, points):
    """Values and derivatives of the Lagrange basis on ``nodes`` at ``points``.

    Returns (vals, ders), each shaped (len(nodes), len(points)).  Plain
    product formulas; the node counts here are tiny.
    """
    nodes = np.asarray(nodes, dtype=float)
    points = np.asarray(points, dtype=float)
    n = nodes.size
    vals = np.ones((n, points.size))
    ders = np.zeros((n, points.size))
    for j in range(n):
        for i in range(n):
            if i == j:
                continue
            vals[j] *= (points - nodes[i]) / (nodes[j] - nodes[i])
        for k in range(n):
            if k == j:
                continue
            term = np.ones(points.size) / (nodes[j] - nodes[k])
            for i in range(n):
                if i in (j, k):
                    continue
                term *= (points - nodes[i]) / (nodes[j] - nodes[i])
            ders[j] += term
    return vals, ders


class FeSpace1D:
    """Continuous nodal finite elements of fixed degree on a 1-D mesh.

    Global node layout: cell c owns nodes c*degree .. c*degree + degree, so
    neighbors share one node.  Interior nodes are the degrees of freedom;
    the two boundary nodes carry the stored Dirichlet values.
    """

    def __init__(self, mesh: Mesh1D, degree: int, dirichlet=(0.0, 0.0)):
        if degree < 1:
            raise ValueError("degree must be at least 1")
        self.mesh = mesh
        self.degree = degree
        self.dirichlet = (float(dirichlet[0]), float(dirichlet[1]))
        self.n_nodes = mesh.n_cells * degree + 1
        self.n_dof = self.n_nodes - 2
        if self.n_dof < 1:
            raise ValueError("mesh too coarse: no interior degrees of freedom")

        ref = lobatto_points(degree)
        # global node coordinates, cell by cell
        coords = np.empty(self.n_nodes)
        for c in range(mesh.n_cells):
            a, b = mesh.nodes[c], mesh.nodes[c + 1]
            coords[c * degree : c * degree + degree + 1] = a + (b - a) * (ref + 1.0) / 2.0
        self.node_coords = coords
        self.ref_nodes = ref

        nq = degree + 2
        q, w = legendre.leggauss(nq)
        self.quad_points = q
        self.quad_weights = w
        self.basis_vals, self.basis_ders = lagrange_tables(ref, q)

        self._stiffness = None
        self._mass = None
        self._cho = None

    def __eq__(self, other):
        return (
            isinstance(other, FeSpace1D)
            and self.degree == other.degree
            and self.dirichlet == other.dirichlet
            and np.array_equal(self.mesh.nodes, other.mesh.nodes)
        )

    def __hash__(self):
        return hash((self.degree, self.dirichlet, self.mesh.nodes.tobytes()))

    def zeros(self):
        return np.zeros(self.n_dof)

    def enriched(self) -> "FeSpace1D":
        """Same mesh and boundary values, degree raised by one."""
        return FeSpace1D(self.mesh, self.degree + 1, self.dirichlet)

    def cell_nodes(self, c: int):
        return slice(c * self.degree, c * self.degree + self.degree + 1)

    def full_node_values(self, u_int):
        full = np.empty(self.n_nodes)
        full[0] = self.dirichlet[0]
        full[-1] = self.dirichlet[1]
        full[1:-1] = u_int
        return full

    def _cellwise(self, full):
        """Node values per cell, shaped (n_cells, degree + 1)."""
        p = self.degree
        idx = np.arange(self.mesh.n_cells)[:, None] * p + np.arange(p + 1)[None, :]
        return full[idx]

    def values_at_quad(self, u_int, lifted: bool = True):
        """(values, derivatives) at all quadrature points, (n_cells, nq) each."""
        full = self.full_node_values(u_int) if lifted else np.concatenate(([0.0], u_int, [0.0]))
        cellvals = self._cellwise(full)
        vals = cellvals @ self.basis_vals
        ders = (cellvals @ self.basis_ders) * (2.0 / self.mesh.widths)[:, None]
        return vals, ders

    def quad_coords(self):
        """Physical coordinates of all quadrature points, (n_cells, nq)."""
        a = self.mesh.nodes[:-1][:, None]
        w = self.mesh.widths[:, None]
        return a + w * (self.quad_points[None, :] + 1.0) / 2.0

    # -- matrices ---------------------------------------------------------

    def _assemble_pair_matrix(self, use_derivatives: bool):
        p = self.degree
        nc = self.mesh.n_cells
        if use_derivatives:
            local = np.einsum("q,iq,jq->ij", self.quad_weights, self.basis_ders, self.basis_ders)
            scale = 2.0 / self.mesh.widths
        else:
            local = np.einsum("q,iq,jq->ij", self.quad_weights, self.basis_vals, self.basis_vals)
            scale = self.mesh.widths / 2.0
        rows, cols, vals = [], [], []
        base = np.arange(p + 1)
        for c in range(nc):
            idx = c * p + base
            rows.append(np.repeat(idx, p + 1))
            cols.append(np.tile(idx, p + 1))
            vals.append((scale[c] * local).ravel())
        full = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_nodes, self.n_nodes),
        )
        return full[1:-1, 1:-1].tocsr()

    @property
    def stiffness(self):
        if self._stiffness is None:
            self._stiffness = self._assemble_pair_matrix(use_derivatives=True)
        return self._stiffness

    @property
    def mass(self):
        if self._mass is None:
            self._mass = self._assemble_pair_matrix(use_derivatives=False)
        return self._mass

    def stiffness_action(self, x):
        return self.stiffness @ np.asarray(x, dtype=float)

    def mass_dual(self, v):
        return self.mass @ np.asarray(v, dtype=float)

    def jacobi_diagonal(self):
        return self.stiffness.diagonal()

    def _factorization(self):
        if self._cho is None:
            p = self.degree
            n = self.n_dof
            ab = np.zeros((p + 1, n))
            for k in range(p, -1, -1):
                diag = self.stiffness.diagonal(k)
                ab[p - k, k : k + diag.size] = diag
            try:
                self._cho = cholesky_banded(ab, lower=False)
            except np.linalg.LinAlgError as exc:  # pragma: no cover
                raise SingularOperatorError(str(exc)) from exc
        return self._cho

    def riesz_dual(self, bdual):
        return cho_solve_banded((self._factorization(), False), np.asarray(bdual, dtype=float))

    def u_inner(self, x, y) -> float:
        return float(np.dot(np.asarray(x, dtype=float), self.stiffness_action(y)))

    def u_norm(self, x) -> float:
        return float(np.sqrt(max(self.u_inner(x, x), 0.0)))

    def v_norm_dual(self, bdual) -> float:
        r = self.riesz_dual(bdual)
        return float(np.sqrt(max(np.dot(r, np.asarray(bdual, dtype=float)), 0.0)))

    # -- pointwise evaluation ---------------------------------------------

    def evaluate(self, u_int, x, lifted: bool = True):
        """Evaluate the FE function (lift included by default) at points x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        full = self.full_node_values(u_int) if lifted else np.concatenate(([0.0], u_int, [0.0]))
        cells = np.clip(np.searchsorted(self.mesh.nodes, x, side="right") - 1, 0, self.mesh.n_cells - 1)
        a = self.mesh.nodes[cells]
        w = self.mesh.widths[cells]
        t = 2.0 * (x - a) / w - 1.0
        vals, _ = lagrange_tables(self.ref_nodes, t)
        cellvals = self._cellwise(full)[cells]  # (len(x), p+1)
        return np.einsum("ij,ji->i", cellvals, vals)


def cell_gradient_energy(space: FeSpace1D, r_int):
    """Per-cell integrals of (r')^2; they sum to ||r||_U^2 exactly."""
    _, ders = space.values_at_quad(r_int, lifted=False)
    return (ders**2 @ space.quad_weights) * (space.mesh.widths / 2.0)


# -- semilinear assembly ----------------------------------------------------


def _eval_fields(problem, space: FeSpace1D, u_int):
    x = space.quad_coords()
    vals, ders = space.values_at_quad(u_int)
    return x, vals, ders


def _scatter_dual(space: FeSpace1D, cell_contrib):
    """Accumulate per-cell local duals (n_cells, p+1) into interior dofs."""
    p = space.degree
    full = np.zeros(space.n_nodes)
    idx = np.arange(space.mesh.n_cells)[:, None] * p + np.arange(p + 1)[None, :]
    np.add.at(full, idx.ravel(), cell_contrib.ravel())
    return full[1:-1]

def _dual_from_pointvalues(space: FeSpace1D, flux_q, reaction_q):
    """Dual vector of  phi -> int flux*phi' + reaction*phi  from point data."""
    w = space.quad_weights
    halfw = space.mesh.widths / 2.0
    # int flux * phi'_i: (2/width)*basis_ders scaled by width/2 cancels
    grad_part = (flux_q * w[None, :]) @ space.basis_ders.T
    reac_part = ((reaction_q * w[None, :]) @ space.basis_vals.T) * halfw[:, None]
    return _scatter_dual(space, grad_part + reac_part)


def assemble_residual(problem, space: FeSpace1D, u_int, test_space: FeSpace1D = None):
    """Dual coefficients of F(u) against the test space's interior basis.

    The trial function u (with lift) lives on ``space``; the test space
    defaults to the same space and may be an enriched companion on the same
    mesh, in which case its quadrature rule is used.
    """
    ts = test_space or space
    if ts is not space and not np.array_equal(ts.mesh.nodes, space.mesh.nodes):
        raise SpaceMismatchError("test space must live on the same mesh")
    if ts is space:
        x, vals, ders = _eval_fields(problem, space, u_int)
    else:
        x = ts.quad_coords()
        full = space.full_node_values(u_int)
        cellvals = space._cellwise(full)
        tvals, tders = lagrange_tables(space.ref_nodes, ts.quad_points)
        vals = cellvals @ tvals
        ders = (cellvals @ tders) * (2.0 / space.mesh.widths)[:, None]
    flux_q = problem.flux(x, ders)
    reaction_q = problem.reaction(x, vals)
    return _dual_from_pointvalues(ts, flux_q, reaction_q)


def assemble_jacobian_action(problem, space: FeSpace1D, u_int, du_int, test_space: FeSpace1D = None):
    """Dual coefficients of F'(u) du against the test space's interior basis."""
    ts = test_space or space
    if ts is not space and not np.array_equal(ts.mesh.nodes, space.mesh.nodes):
        raise SpaceMismatchError("test space must live on the same mesh")
    if ts is space:
        x, vals, ders = _eval_fields(problem, space, u_int)
        dvals, dders = space.values_at_quad(du_int, lifted=False)
    else:
        x = ts.quad_coords()
        tvals, tders = lagrange_tables(space.ref_nodes, ts.quad_points)
        scale = (2.0 / space.mesh.widths)[:, None]
        cellvals = space._cellwise(space.full_node_values(u_int))
        vals = cellvals @ tvals
        ders = (cellvals @ tders) * scale
        dcell = space._cellwise(np.concatenate(([0.0], du_int, [0.0])))
        dvals = dcell @ tvals
        dders = (dcell @ tders) * scale
    flux_q = problem.flux_prime(x, ders) * dders
    reaction_q = problem.reaction_prime(x, vals) * dvals
    return _dual_from_pointvalues(ts, flux_q, reaction_q)


def assemble_jacobian_matrix(problem, space: FeSpace1D, u_int):
    """Galerkin matrix of F'(u) on the interior dofs, as CSR."""
    x, vals, ders = _eval_fields(problem, space, u_int)
    a_q = problem.flux_prime(x, ders)  # (n_cells, nq)
    b_q = problem.reaction_prime(x, vals)
    p = space.degree
    w = space.quad_weights
    grad_local = np.einsum(
        "cq,q,iq,jq->cij", a_q, w, space.basis_ders, space.basis_ders
    ) * (2.0 / space.mesh.widths)[:, None, None]
    reac_local = np.einsum(
        "cq,q,iq,jq->cij", b_q, w, space.basis_vals, space.basis_vals
    ) * (space.mesh.widths / 2.0)[:, None, None]
    local = grad_local + reac_local
    base = np.arange(p + 1)
    idx = np.arange(space.mesh.n_cells)[:, None] * p + base[None, :]
    rows = np.repeat(idx, p + 1, axis=1).ravel()
    cols = np.tile(idx, (1, p + 1)).ravel()
    full = sp.csr_matrix(
        (local.ravel(), (rows, cols)), shape=(space.n_nodes, space.n_nodes)
    )
    return full[1:-1, 1:-1].tocsr()


def transfer_solution(u: StateVector, space_old: FeSpace1D, space_new: FeSpace1D) -> StateVector:
    """Move a solution to a refined space by nodal interpolation.

    Exact (the old function is reproduced identically) because the new mesh
    must refine the old one at equal or higher degree; anything else is
    rejected.
    """
    if u.space != space_old:
        raise SpaceMismatchError("vector does not live on space_old")
    if space_new.degree < space_old.degree:
        raise SpaceMismatchError("transfer target must not lower the degree")
    if space_new.dirichlet != space_old.dirichlet:
        raise SpaceMismatchError("transfer target carries different boundary values")
    old_nodes = space_old.mesh.nodes
    new_nodes = space_new.mesh.nodes
    pos = np.searchsorted(new_nodes, old_nodes)
    ok = pos < new_nodes.size
    if not (
        np.all(ok)
        and np.allclose(new_nodes[np.clip(pos, 0, new_nodes.size - 1)], old_nodes, rtol=0.0, atol=1e-12)
    ):
        raise SpaceMismatchError("transfer target does not refine the source mesh")
    vals = space_old.evaluate(u.coeffs, space_new.node_coords[1:-1])
    return StateVector(vals, space_new)
