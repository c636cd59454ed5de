"""Backward step control for Newton-type iterations.

The iteration is u_{k+1} = u_k + t_k * du_k with du_k = -f(u_k) the Newton
increment.  Instead of monitoring a merit function, the step size is chosen
so that the increment itself moves by a prescribed amount per step: with

    g(u, t) = f(u - t*f(u)) - f(u)

the controller targets  H'_k = t_k * ||g(u_k, t_k)||_U  inside a band
[H_lo, H_hi] around the control parameter H, accepting t = 1 outright once
the increment barely changes.  Each trial evaluation of g costs exactly one
increment evaluation, and the accepted trial's increment is reused as the
next iterate's Newton increment, so one iteration costs one evaluation plus
one per rejected trial.

Problem objects supply ``space``, ``increment(u) -> Increment`` and
``residual_v_norm(u) -> float``; everything else is plain coefficient
arithmetic on StateVectors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .spaces import StateVector, ScalarSpace, u_norm


class StepCollapseError(RuntimeError):
    """Step selection drove the bracket below t_min without acceptance."""

    def __init__(self, message, trials=None):
        super().__init__(message)
        self.trials = trials or []


class OperatorFailureError(RuntimeError):
    """An increment provider failed (inner solver breakdown, overflow, ...)."""


@dataclass
class Increment:
    """Newton increment du = -f(u) plus inner-solver metadata."""

    delta: StateVector
    inner_iters: Optional[int] = None
    rel_residual: Optional[float] = None


@dataclass
class BscConfig:
    """Controls for one backward-step-controlled Newton solve.

    Exactly one of ``step_bound`` (absolute H) and ``step_bound_rel``
    (H = step_bound_rel * ||du_0||_U) must be given.  The acceptance band is
    [low_factor*H, high_factor*H]; trial steps at or above
    ``full_step_threshold`` are accepted even below the band, which is what
    lets the method settle into plain Newton steps near a solution.
    """

    step_bound: Optional[float] = None
    step_bound_rel: Optional[float] = None
    low_factor: float = 0.1
    high_factor: float = 1.5
    t0: float = 1.0
    max_bisections: int = 50
    smoothing: float = 0.7
    residual_tol: float = 1e-12
    increment_tol: Optional[float] = None
    max_iterations: int = 100
    full_step_threshold: float = 1.0 - 1e-12
    t_min: float = 1e-8
    track_residual: bool = True
    keep_iterates: bool = True

    def __post_init__(self):
        if (self.step_bound is None) == (self.step_bound_rel is None):
            raise ValueError("set exactly one of step_bound and step_bound_rel")
        for name in ("step_bound", "step_bound_rel"):
            val = getattr(self, name)
            if val is not None and not val > 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.low_factor < 1.0:
            raise ValueError("low_factor must lie in (0, 1)")
        if not self.high_factor > 1.0:
            raise ValueError("high_factor must exceed 1")
        if not 0.0 < self.t0 <= 1.0:
            raise ValueError("t0 must lie in (0, 1]")
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing must lie in (0, 1]")
        if not self.residual_tol > 0.0:
            raise ValueError("residual_tol must be positive")
        if self.increment_tol is not None and not self.increment_tol > 0.0:
            raise ValueError("increment_tol must be positive")
        if self.max_iterations < 1 or self.max_bisections < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class StepControlState:
    """Prediction memory carried across iterations of one solve."""

    first: bool = True
    last_t: float = 1.0
    last_h_prime: float = 0.0


@dataclass
class TrialRecord:
    t: float
    h_prime: float
    dup_value: float
    action: str  # "accept" | "decrease" | "increase"
    inner_iters: Optional[int] = None


@dataclass
class IterationRecord:
    k: int
    t: float
    u_value: float
    du_value: float
    dup_value: float
    residual_v: float
    increment_u: float
    h_prime: float
    bisection_trials: int
    kappa: Optional[float] = None
    inner_iters: Optional[int] = None
    trials: list = field(default_factory=list, repr=False)

    def row(self):
        return {
            "k": self.k,
            "t": self.t,
            "u": self.u_value,
            "du": self.du_value,
            "dup": self.dup_value,
            "Hprime": self.h_prime,
        }


@dataclass
class SolveOutcome:
    status: str  # converged | max_iterations | step_collapse | operator_failure
    final_state: StateVector
    trace: list
    final_residual_v: float = math.nan
    final_increment_u: float = math.nan
    step_bound: float = math.nan
    states: Optional[list] = None
    increments: Optional[list] = None


@dataclass
class _Selection:
    t: float
    h_prime: float
    trials: list
    point: StateVector
    increment: Increment
    fallback: bool = False


def _display(u: StateVector) -> float:
    if isinstance(u.space, ScalarSpace):
        return float(u.coeffs[0])
    return u_norm(u)


def _evaluate_increment(problem, point: StateVector) -> Increment:
    try:
        inc = problem.increment(point)
    except (StepCollapseError, OperatorFailureError):
        raise
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        raise OperatorFailureError(f"increment evaluation failed: {exc}") from exc
    return inc


def compute_g(problem, u: StateVector, f_u: StateVector, t: float) -> StateVector:
    """Increment change g(u, t) = f(u - t*f(u)) - f(u); one fresh evaluation."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return StateVector(u.space.zeros(), u.space)
    trial = u - t * f_u
    inc = _evaluate_increment(problem, trial)
    return (-1.0 * inc.delta) - f_u


def predict_step(state: StepControlState, t_prev: float, h_prime_prev: float, config: BscConfig) -> float:
    """Step-size prediction for the next iteration.

    Scales the previous step so the previous increment change would have hit
    H exactly, smooths geometrically against the previous step with weight
    ``smoothing``, and clamps the result into (0, 1].  The raw ratio is
    smoothed before clamping so a string of slightly-short steps can still
    reach a full step.
    """
    if state.first:
        return config.t0
    if h_prime_prev == 0.0:
        return 1.0
    h = config.step_bound
    t_raw = t_prev * math.sqrt(h / h_prime_prev)
    lam = config.smoothing
    smoothed = math.exp(lam * math.log(t_raw) + (1.0 - lam) * math.log(t_prev))
    return min(smoothed, 1.0)


def select_step_size(problem, u: StateVector, f_u: StateVector, config: BscConfig,
                     state: StepControlState) -> _Selection:
    """Find an admissible step size by bracketed bisection on t.

    Starts from the predicted step; trials with H' above the band shrink the
    upper bracket end, trials below it (short of a full step) raise the lower
    end, and the next trial is the bracket midpoint.  Acceptance: H' within
    [H_lo, H_hi], or t at the full-step threshold with H' not above the band.
    Exhausting max_bisections falls back to the smallest tried t with
    H' <= H_hi; a bracket collapsing below t_min raises StepCollapseError.
    """
    h = config.step_bound
    if h is None:
        raise ValueError("select_step_size needs a resolved absolute step_bound")
    h_lo = config.low_factor * h
    h_hi = config.high_factor * h
    t = predict_step(state, state.last_t, state.last_h_prime, config)
    t_lo, t_hi = 0.0, 1.0
    trials = []
    low_candidates = []

    for _ in range(config.max_bisections + 1):
        point = u - t * f_u
        inc = _evaluate_increment(problem, point)
        g = (-1.0 * inc.delta) - f_u
        h_prime = t * u_norm(g)
        dup = _display(inc.delta)
        accept = h_prime <= h_hi and (h_prime >= h_lo or t >= config.full_step_threshold)
        if accept:
            trials.append(TrialRecord(t, h_prime, dup, "accept", inc.inner_iters))
            state.first = False
            state.last_t = t
            state.last_h_prime = h_prime
            return _Selection(t, h_prime, trials, point, inc)
        if h_prime > h_hi:
            trials.append(TrialRecord(t, h_prime, dup, "decrease", inc.inner_iters))
            t_hi = t
        else:
            trials.append(TrialRecord(t, h_prime, dup, "increase", inc.inner_iters))
            t_lo = t
            low_candidates.append((t, h_prime, point, inc))
        t_next = 0.5 * (t_lo + t_hi)
        if t_next < config.t_min:
            raise StepCollapseError(
                f"step bracket collapsed below t_min = {config.t_min:g}; "
                "the increment changes too fast for the requested H",
                trials,
            )
        t = t_next

    if low_candidates:
        t, h_prime, point, inc = min(low_candidates, key=lambda c: c[0])
        state.first = False
        state.last_t = t
        state.last_h_prime = h_prime
        return _Selection(t, h_prime, trials, point, inc, fallback=True)
    raise StepCollapseError(
        f"no admissible step after {config.max_bisections} bisections", trials
    )


def solve(problem, u0: StateVector, config: BscConfig) -> SolveOutcome:
    """Run the backward-step-controlled Newton iteration from u0.

    Termination is checked at the top of each iteration: residual V-norm at
    or below residual_tol (skipped when track_residual is off), then
    increment U-norm at or below increment_tol when that is set.  The
    accepted trial point of each step provides both the next iterate and its
    Newton increment, so no evaluation is spent twice.
    """
    u = u0
    try:
        inc = _evaluate_increment(problem, u)
    except OperatorFailureError:
        return SolveOutcome(status="operator_failure", final_state=u0, trace=[],
                            step_bound=config.step_bound if config.step_bound
                            is not None else math.nan)
    if config.step_bound_rel is not None:
        resolved = config.step_bound_rel * u_norm(inc.delta)
        if not resolved > 0.0:
            raise ValueError("relative step bound resolved to zero: zero initial increment")
        config = replace(config, step_bound=resolved, step_bound_rel=None)

    state = StepControlState()
    records = []
    states = [u] if config.keep_iterates else None
    increments = [inc.delta] if config.keep_iterates else None
    status = None
    residual_v = math.nan
    increment_u = u_norm(inc.delta)

    for k in range(config.max_iterations):
        increment_u = u_norm(inc.delta)
        residual_v = problem.residual_v_norm(u) if config.track_residual else math.nan
        if config.track_residual and residual_v <= config.residual_tol:
            status = "converged"
            break
        if config.increment_tol is not None and increment_u <= config.increment_tol:
            status = "converged"
            break
        f_u = -1.0 * inc.delta
        try:
            sel = select_step_size(problem, u, f_u, config, state)
        except StepCollapseError:
            status = "step_collapse"
            break
        except OperatorFailureError:
            status = "operator_failure"
            break
        records.append(
            IterationRecord(
                k=k,
                t=sel.t,
                u_value=_display(u),
                du_value=_display(inc.delta),
                dup_value=_display(sel.increment.delta),
                residual_v=residual_v,
                increment_u=increment_u,
                h_prime=sel.h_prime,
                bisection_trials=len(sel.trials),
                kappa=inc.rel_residual,
                inner_iters=inc.inner_iters,
                trials=sel.trials,
            )
        )
        u, inc = sel.point, sel.increment
        if config.keep_iterates:
            states.append(u)
            increments.append(inc.delta)

    if status is None:
        status = "max_iterations"
        increment_u = u_norm(inc.delta)
        residual_v = problem.residual_v_norm(u) if config.track_residual else math.nan

    return SolveOutcome(
        status=status,
        final_state=u,
        trace=records,
        final_residual_v=residual_v,
        final_increment_u=increment_u,
        step_bound=config.step_bound,
        states=states,
        increments=increments,
    )


def check_sqrt_decrease(trace, h: float, c: float):
    """Check sqrt(||F(u_k)||) <= sqrt(||F(u_0)||) - k*c*sqrt(H) on the damped prefix.

    The bound applies while every step up to k was damped (t < 1).  Returns
    (holds_for_c, largest admissible c); an empty damped prefix is vacuous
    and returns (True, inf).
    """
    m = 0
    while m < len(trace) and trace[m].t < 1.0:
        m += 1
    upto = min(m, len(trace) - 1)
    if upto < 1:
        return True, math.inf
    sq = [math.sqrt(trace[k].residual_v) for k in range(upto + 1)]
    if any(math.isnan(s) for s in sq):
        raise ValueError("trace carries no residual data")
    largest = min((sq[0] - sq[k]) / (k * math.sqrt(h)) for k in range(1, len(sq)))
    return c <= largest, largest


def write_trace_csv(outcome: SolveOutcome, fh, echo: Optional[dict] = None,
                    extended: bool = False):
    """Write the accepted-iteration trace as CSV: k,t,u,du,dup,Hprime,status.

    Floats use the shortest round-trip representation.  An optional echo
    mapping is emitted first as '# key=value' comment lines so the file is
    self-describing.  With ``extended`` the rows additionally carry
    residual_v, kappa and inner_iters (blank where not recorded).
    """
    if echo:
        for key, val in echo.items():
            fh.write(f"# {key}={val}\n")
    writer = csv.writer(fh, lineterminator="\n")
    header = ["k", "t", "u", "du", "dup", "Hprime"]
    if extended:
        header += ["residual_v", "kappa", "inner_iters"]
    writer.writerow(header + ["status"])

    def _cell(x):
        x = float(x)
        return "" if math.isnan(x) else repr(x)

    for rec in outcome.trace:
        row = rec.row()
        cells = [row["k"]] + [repr(float(row[c])) for c in ("t", "u", "du", "dup", "Hprime")]
        if extended:
            cells += [_cell(rec.residual_v), _cell(rec.kappa), rec.inner_iters]
        writer.writerow(cells + [outcome.status])


def trace_to_json(outcome: SolveOutcome, config_echo: dict) -> dict:
    """Bundle config echo, per-iteration trace, and summary into one mapping."""

    def _clean(x):
        if x is None:
            return None
        x = float(x)
        return None if math.isnan(x) else x

    trace = []
    for rec in outcome.trace:
        trace.append(
            {
                "k": rec.k,
                "t": rec.t,
                "u": rec.u_value,
                "du": rec.du_value,
                "dup": rec.dup_value,
                "Hprime": rec.h_prime,
                "residual_v": _clean(rec.residual_v),
                "increment_u": rec.increment_u,
                "bisection_trials": rec.bisection_trials,
                "kappa": _clean(rec.kappa),
                "inner_iters": rec.inner_iters,
            }
        )
    return {
        "config": config_echo,
        "trace": trace,
        "summary": {
            "status": outcome.status,
            "iterations": len(outcome.trace),
            "final_residual_v": _clean(outcome.final_residual_v),
            "final_increment_u": _clean(outcome.final_increment_u),
            "step_bound": _clean(outcome.step_bound),
        },
    }
