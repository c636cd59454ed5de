"""Contraction-rate-driven mesh adaptation for 1-D Galerkin Newton solves.

The mesh is refined exactly when the inexactness of the discrete Newton
increment, measured as

    kappa_k = ||F(u_k) + F'(u_k) du_k||_V / ||F(u_k)||_V,

exceeds a target: du_k solves the Galerkin system on the current space, so on
that space the quotient would be the inner solver tolerance; evaluated
against the test functions of the once-enriched space (same mesh, degree+1)
it measures what the mesh cannot represent.  Both Riesz solves use loosely
tolerant Jacobi-CG, and the squared solution-space norm of the numerator's
representative splits into per-cell contributions that drive the marking.

The driver runs two phases: plain step-controlled Newton on the initial mesh
until the increment is small (no residual norms computed at all), then the
estimate/refine/step loop.  Once the cell budget is exhausted the mesh
freezes and the iteration continues as fixed-mesh Newton; the trial rates
recorded there climb toward 1 as the subspace solution is reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .fem import FeSpace1D, Mesh1D, MIN_CELL_WIDTH, assemble_jacobian_action, \
    assemble_residual, cell_gradient_energy, transfer_solution
from .krylov import KrylovConfig, LinearOperatorSpec, cg
from .problems import GalerkinProblem, Semilinear1D
from .spaces import StateVector, u_norm
from .stepcontrol import BscConfig, IterationRecord, OperatorFailureError, \
    SolveOutcome, StepCollapseError, StepControlState, select_step_size, solve


@dataclass
class KappaEstimate:
    kappa: float
    numerator_v: float
    denominator_v: float
    cell_contributions: np.ndarray
    converged: bool = False


@dataclass
class RefinementPolicy:
    """Knobs of the adaptive loop.

    ``threshold_factor`` marks cells whose contribution exceeds that fraction
    of the largest one; left unset it defaults to 2**(-degree).  The cell
    budget is a hard cap: marking trims to the largest contributions first
    and the mesh freezes once the cap is reached.
    """

    kappa_target: float = 0.5
    max_cells: int = 200_000
    degree: int = 1
    threshold_factor: Optional[float] = None
    phase1_increment_tol: float = 0.01
    kappa_num_tol: float = 0.1
    kappa_den_tol: float = 0.05
    inner_tol: float = 1e-3
    saturated_increment_tol: float = 1e-10

    def resolved_threshold(self) -> float:
        return 2.0 ** (-self.degree) if self.threshold_factor is None else self.threshold_factor


@dataclass
class AdaptiveOutcome:
    status: str  # converged | converged_on_finest | max_iterations | step_collapse | operator_failure
    final_state: StateVector
    final_space: FeSpace1D
    trace: list
    history: list
    final_residual_v: float = math.nan
    final_increment_u: float = math.nan
    step_bound: float = math.nan
    saturated: bool = False


def _riesz_by_cg(space: FeSpace1D, bdual, tol: float):
    """Loose Riesz solve: Jacobi-preconditioned CG on the stiffness system."""
    diag = space.jacobi_diagonal()
    op = LinearOperatorSpec(
        apply=space.stiffness_action,
        preconditioner=lambda r: r / diag,
        space=space,
        self_adjoint=True,
    )
    cfg = KrylovConfig(tol=tol, max_iters=10 * space.n_dof + 100)
    res = cg(op, StateVector(np.asarray(bdual, dtype=float), space), cfg)
    if not res.converged:
        raise OperatorFailureError(
            f"Riesz CG stalled at relative residual {res.relative_residual:.3e}"
        )
    return res.increment.coeffs


def estimate_kappa(problem: Semilinear1D, space: FeSpace1D, enriched: FeSpace1D,
                   u_coeffs, du_coeffs, policy: RefinementPolicy,
                   exact: bool = False) -> KappaEstimate:
    """Contraction-rate estimate of the increment, tested on the enriched space.

    Evaluating on the increment's own space would return the inner solver
    tolerance by construction; the enriched test space exposes the part of
    the linearized residual the mesh cannot see.  With ``exact=True`` both
    Riesz solves are direct (oracle mode for tests).
    """
    if not np.array_equal(space.mesh.nodes, enriched.mesh.nodes) or \
            enriched.degree < space.degree:
        raise ValueError("test space must share the mesh at the same or higher degree")
    b_den = assemble_residual(problem, space, u_coeffs, test_space=enriched)
    b_num = b_den + assemble_jacobian_action(problem, space, u_coeffs, du_coeffs,
                                             test_space=enriched)
    if exact:
        r_num = enriched.riesz_dual(b_num)
        r_den = enriched.riesz_dual(b_den)
    else:
        r_num = _riesz_by_cg(enriched, b_num, policy.kappa_num_tol)
        r_den = _riesz_by_cg(enriched, b_den, policy.kappa_den_tol)
    contributions = cell_gradient_energy(enriched, r_num)
    numerator = float(np.sqrt(max(contributions.sum(), 0.0)))
    denominator = enriched.u_norm(r_den)
    if denominator == 0.0:
        return KappaEstimate(0.0, numerator, denominator, contributions, converged=True)
    return KappaEstimate(numerator / denominator, numerator, denominator, contributions)


def mark_and_refine(mesh: Mesh1D, estimate: KappaEstimate, policy: RefinementPolicy) -> Mesh1D:
    """Bisect cells with dominant contributions, honoring the cell budget.

    Returns the mesh unchanged (same object) when the budget or the minimum
    cell width allows no refinement; callers treat that as saturation.
    """
    contributions = estimate.cell_contributions
    if contributions.shape != (mesh.n_cells,):
        raise ValueError("one contribution per cell required")
    top = contributions.max(initial=0.0)
    if top <= 0.0:
        return mesh
    marks = contributions > policy.resolved_threshold() * top
    marks &= mesh.widths / 2.0 > MIN_CELL_WIDTH
    budget = policy.max_cells - mesh.n_cells
    if budget <= 0:
        return mesh
    if int(marks.sum()) > budget:
        order = np.argsort(contributions)[::-1]
        keep = [c for c in order if marks[c]][:budget]
        marks = np.zeros_like(marks)
        marks[keep] = True
    if not marks.any():
        return mesh
    return mesh.bisect(marks)


def adaptive_solve(problem: Semilinear1D, initial_mesh: Mesh1D, config: BscConfig,
                   policy: RefinementPolicy) -> AdaptiveOutcome:
    """Two-phase adaptive Newton solve of a semilinear 1-D problem.

    Phase 1 runs step-controlled Newton on the initial mesh until the
    increment norm drops below ``policy.phase1_increment_tol``, computing no
    residual norms.  Phase 2 estimates kappa each iteration: above the
    target the mesh is refined (the estimate is recorded as a discarded
    trial) and the increment re-solved; otherwise the estimate is accepted
    and one controlled Newton step is taken.  History entries, one per
    phase-2 iteration, carry {iteration, cells, dofs, kappa_trials,
    kappa_accepted, residual_v}.
    """
    mesh = initial_mesh
    space = FeSpace1D(mesh, policy.degree, problem.dirichlet)
    enriched = space.enriched()
    op = GalerkinProblem(problem, space, inner_tol=policy.inner_tol)
    u = op.initial_state()

    phase1_cfg = replace(
        config,
        track_residual=False,
        increment_tol=policy.phase1_increment_tol,
        keep_iterates=False,
    )
    out1 = solve(op, u, phase1_cfg)
    if out1.status != "converged":
        return AdaptiveOutcome(out1.status, out1.final_state, space, out1.trace, [],
                               final_increment_u=out1.final_increment_u,
                               step_bound=out1.step_bound)
    u = out1.final_state
    resolved = replace(config, step_bound=out1.step_bound, step_bound_rel=None)

    records = list(out1.trace)
    history = []
    state = StepControlState()
    k = len(records)
    status = None
    saturated = False
    inc = None
    est = None

    while k < config.max_iterations:
        entry = {
            "iteration": k,
            "cells": mesh.n_cells,
            "dofs": space.n_dof,
            "kappa_trials": [],
            "kappa_accepted": None,
            "residual_v": math.nan,
        }
        try:
            if inc is None:
                inc = op.increment(u)
            est = estimate_kappa(problem, space, enriched, u.coeffs, inc.delta.coeffs,
                                 policy)
            entry["residual_v"] = est.denominator_v
            if est.denominator_v <= resolved.residual_tol:
                status = "converged"
                history.append(entry)
                break

            while est.kappa > policy.kappa_target and not saturated:
                new_mesh = mark_and_refine(mesh, est, policy)
                if new_mesh is mesh:
                    saturated = True
                    break
                entry["kappa_trials"].append(est.kappa)
                mesh = new_mesh
                new_space = FeSpace1D(mesh, policy.degree, problem.dirichlet)
                u = transfer_solution(u, space, new_space)
                space, enriched = new_space, new_space.enriched()
                op = GalerkinProblem(problem, space, inner_tol=policy.inner_tol)
                inc = op.increment(u)
                est = estimate_kappa(problem, space, enriched, u.coeffs,
                                     inc.delta.coeffs, policy)
                entry["cells"] = mesh.n_cells
                entry["dofs"] = space.n_dof
                entry["residual_v"] = est.denominator_v

            if est.kappa > policy.kappa_target:
                # saturated: the rate can no longer be improved; log the trial
                # and keep iterating on the frozen mesh
                entry["kappa_trials"].append(est.kappa)
            else:
                entry["kappa_accepted"] = est.kappa

            sel = select_step_size(op, u, -inc.delta, resolved, state)
        except StepCollapseError:
            status = "step_collapse"
            history.append(entry)
            break
        except OperatorFailureError:
            status = "operator_failure"
            history.append(entry)
            break
        records.append(
            IterationRecord(
                k=k,
                t=sel.t,
                u_value=u_norm(u),
                du_value=u_norm(inc.delta),
                dup_value=u_norm(sel.increment.delta),
                residual_v=est.denominator_v,
                increment_u=u_norm(inc.delta),
                h_prime=sel.h_prime,
                bisection_trials=len(sel.trials),
                kappa=est.kappa,
                inner_iters=inc.inner_iters,
                trials=sel.trials,
            )
        )
        history.append(entry)
        u, inc = sel.point, sel.increment
        k += 1
        if saturated and u_norm(inc.delta) <= policy.saturated_increment_tol:
            status = "converged_on_finest"
            break

    if status is None:
        status = "max_iterations"

    final_res = est.denominator_v if est is not None else math.nan
    return AdaptiveOutcome(
        status=status,
        final_state=u,
        final_space=space,
        trace=records,
        history=history,
        final_residual_v=final_res,
        final_increment_u=u_norm(inc.delta) if inc is not None else math.nan,
        step_bound=resolved.step_bound,
        saturated=saturated,
    )
