"""Backward step size control: prediction, bisection, the solve loop."""

import io
import json
import math

import numpy as np
import pytest

from backstep.problems import ArctanProblem
from backstep.spaces import ScalarSpace, StateVector, u_norm
from backstep.stepcontrol import (BscConfig, Increment, OperatorFailureError,
                                  StepCollapseError, StepControlState,
                                  check_sqrt_decrease, compute_g, predict_step,
                                  select_step_size, solve, trace_to_json,
                                  write_trace_csv)

SCALAR = ScalarSpace()


def sv(x):
    return StateVector(np.array([float(x)]), SCALAR)


def atan_increment(u):
    return -(1.0 + u * u) * math.atan(u)


def oracle_h_prime(u, t):
    """t * |g(u, t)| for the scalar arctan problem, computed independently."""
    fu = -atan_increment(u)
    trial = u - t * fu
    return t * abs(-atan_increment(trial) - fu)


class SyntheticProblem:
    """Scalar problem with a scripted increment function."""

    def __init__(self, fn):
        self.fn = fn
        self.space = SCALAR
        self.calls = 0

    def increment(self, u):
        self.calls += 1
        return Increment(sv(-self.fn(float(u.coeffs[0]))), 0, 0.0)

    def residual_v_norm(self, u):
        return abs(self.fn(float(u.coeffs[0])))


class CountingArctan(ArctanProblem):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def increment(self, u):
        self.calls += 1
        return super().increment(u)


def test_config_requires_exactly_one_step_bound():
    with pytest.raises(ValueError):
        BscConfig()
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, step_bound_rel=0.1)
    assert BscConfig(step_bound=0.5).step_bound == 0.5
    assert BscConfig(step_bound_rel=0.1).step_bound is None


def test_config_range_validation():
    with pytest.raises(ValueError):
        BscConfig(step_bound=-1.0)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, low_factor=0.0)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, low_factor=2.0, high_factor=1.5)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, t0=0.0)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, t0=1.5)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, smoothing=0.0)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, smoothing=1.2)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, max_iterations=0)
    with pytest.raises(ValueError):
        BscConfig(step_bound=0.5, residual_tol=0.0)


def test_compute_g_zero_step_and_bounds():
    prob = ArctanProblem()
    u = sv(2.0)
    f_u = sv(-atan_increment(2.0))
    g0 = compute_g(prob, u, f_u, 0.0)
    assert u_norm(g0) == 0.0
    with pytest.raises(ValueError):
        compute_g(prob, u, f_u, 1.5)
    g = compute_g(prob, u, f_u, 0.25)
    expected = -atan_increment(2.0 - 0.25 * f_u.coeffs[0]) - f_u.coeffs[0]
    assert g.coeffs[0] == pytest.approx(expected, rel=1e-14)


def test_predict_step_first_call_returns_t0():
    cfg = BscConfig(step_bound=0.8, t0=0.3)
    state = StepControlState()
    assert predict_step(state, 0.5, 1.0, cfg) == 0.3


def test_predict_step_zero_history_gives_full_step():
    cfg = BscConfig(step_bound=0.8)
    state = StepControlState()
    state.first = False
    assert predict_step(state, 0.7, 0.0, cfg) == 1.0


def test_predict_step_smooths_before_clamping():
    cfg = BscConfig(step_bound=0.8, smoothing=0.7)
    state = StepControlState()
    state.first = False
    t_prev, hp = 0.25, 1.1935
    t_raw = t_prev * math.sqrt(0.8 / hp)
    expected = math.exp(0.7 * math.log(t_raw) + 0.3 * math.log(t_prev))
    assert predict_step(state, t_prev, hp, cfg) == pytest.approx(expected, rel=1e-14)
    # a previous step slightly below 1 with tiny H' must still reach 1
    assert predict_step(state, 0.9, 1e-12, cfg) == 1.0


def test_selection_walkthrough_matches_scalar_oracle():
    """From u0 = 2 with H = 0.8 the bisection tries 1, 0.5, then accepts 0.25."""
    prob = ArctanProblem()
    cfg = BscConfig(step_bound=0.8)
    state = StepControlState()
    u = sv(2.0)
    f_u = sv(-atan_increment(2.0))
    sel = select_step_size(prob, u, f_u, cfg, state)
    assert [tr.t for tr in sel.trials] == [1.0, 0.5, 0.25]
    assert [tr.action for tr in sel.trials] == ["decrease", "decrease", "accept"]
    for tr in sel.trials:
        assert tr.h_prime == pytest.approx(oracle_h_prime(2.0, tr.t), rel=1e-12)
    assert sel.t == 0.25
    assert not sel.fallback
    # the accepted trial carries the increment at the new point
    assert sel.increment.delta.coeffs[0] == pytest.approx(
        atan_increment(2.0 - 0.25 * f_u.coeffs[0]), rel=1e-14)


def test_accepted_h_prime_lands_in_band_or_full_step():
    rng = np.random.default_rng(42)
    for _ in range(25):
        u0 = float(rng.uniform(1.0, 5.0))
        h = float(rng.uniform(0.2, 1.5))
        cfg = BscConfig(step_bound=h, residual_tol=1e-13, max_iterations=60)
        out = solve(ArctanProblem(), sv(u0), cfg)
        assert out.status == "converged"
        for rec in out.trace:
            if rec.t < 1.0 - 1e-12:
                assert cfg.low_factor * h <= rec.h_prime <= cfg.high_factor * h * (1 + 1e-12)
            else:
                assert rec.h_prime <= cfg.high_factor * h * (1 + 1e-12)


def test_trace_chains_increments_without_reevaluation():
    prob = CountingArctan()
    cfg = BscConfig(step_bound=0.8, residual_tol=1e-15)
    out = solve(prob, sv(2.0), cfg)
    assert out.status == "converged"
    # the next row's du is exactly the previous row's dup
    for a, b in zip(out.trace, out.trace[1:]):
        assert a.dup_value == b.du_value
    # one evaluation per trial plus the initial one: nothing is recomputed
    total_trials = sum(len(rec.trials) for rec in out.trace)
    assert prob.calls == total_trials + 1


def test_solve_reaches_full_steps_and_tiny_root():
    out = solve(ArctanProblem(), sv(2.0), BscConfig(step_bound=0.8, residual_tol=1e-15))
    ts = [rec.t for rec in out.trace]
    assert ts[0] == 0.25
    assert all(t == 1.0 for t in ts[3:])
    assert abs(out.trace[5].u_value) <= 1e-12
    assert abs(out.trace[4].du_value) <= 5e-5


def test_relative_step_bound_resolves_against_first_increment():
    prob = ArctanProblem()
    rel = 0.1
    out = solve(prob, sv(2.0), BscConfig(step_bound_rel=rel, residual_tol=1e-13))
    assert out.step_bound == pytest.approx(rel * abs(atan_increment(2.0)), rel=1e-14)
    assert out.status == "converged"


def test_zero_initial_increment_rejects_relative_bound():
    prob = SyntheticProblem(lambda u: 0.0)
    with pytest.raises(ValueError):
        solve(prob, sv(1.0), BscConfig(step_bound_rel=0.5))


def test_step_collapse_on_discontinuous_increment():
    u0 = 1.0

    def jumpy(u):
        return 1.0 if u == u0 else 1e6

    prob = SyntheticProblem(jumpy)
    cfg = BscConfig(step_bound=1e-3, residual_tol=1e-15)
    state = StepControlState()
    with pytest.raises(StepCollapseError) as err:
        select_step_size(prob, sv(u0), sv(1.0), cfg, state)
    assert all(tr.action == "decrease" for tr in err.value.trials)
    out = solve(prob, sv(u0), cfg)
    assert out.status == "step_collapse"


def test_fallback_picks_smallest_low_candidate():
    # constant increment: g == 0 at every damped t, so every trial is a low
    # rejection; exhausting the bisections falls back to the smallest t tried
    prob = SyntheticProblem(lambda u: 1.0)
    cfg = BscConfig(step_bound=0.5, t0=0.5, max_bisections=3)
    sel = select_step_size(prob, sv(5.0), sv(1.0), cfg, StepControlState())
    assert sel.fallback
    assert sel.t == 0.5
    assert all(tr.action == "increase" for tr in sel.trials)


def test_increment_only_termination_never_touches_residual():
    class NoResidual(ArctanProblem):
        def residual_v_norm(self, u):
            raise AssertionError("residual norm must not be evaluated")

    cfg = BscConfig(step_bound=0.8, track_residual=False, increment_tol=1e-8,
                    max_iterations=30)
    out = solve(NoResidual(), sv(2.0), cfg)
    assert out.status == "converged"
    assert math.isnan(out.final_residual_v)
    assert out.final_increment_u <= 1e-8


def test_operator_failure_statuses():
    def explodes(u):
        if abs(u) < 2.0:
            raise ValueError("synthetic blowup")
        return atan_increment(u)

    prob = SyntheticProblem(lambda u: -explodes(u))
    out = solve(prob, sv(2.0), BscConfig(step_bound=0.8))
    assert out.status == "operator_failure"

    always = SyntheticProblem(lambda u: (_ for _ in ()).throw(ValueError("bad")))
    out0 = solve(always, sv(2.0), BscConfig(step_bound=0.8))
    assert out0.status == "operator_failure"
    assert out0.trace == []


def test_max_iterations_status():
    prob = SyntheticProblem(lambda u: 1.0)  # constant residual, no progress
    cfg = BscConfig(step_bound=0.5, max_iterations=4, residual_tol=1e-15)
    out = solve(prob, sv(5.0), cfg)
    assert out.status == "max_iterations"
    assert len(out.trace) == 4


def test_sqrt_decrease_on_damped_prefix():
    out = solve(ArctanProblem(), sv(2.0), BscConfig(step_bound=0.8, residual_tol=1e-15))
    ok, largest = check_sqrt_decrease(out.trace, 0.8, 1e-9)
    assert ok
    assert largest > 0.0


def test_sqrt_decrease_vacuous_without_damped_steps():
    trace = solve(ArctanProblem(), sv(0.05),
                  BscConfig(step_bound=5.0, residual_tol=1e-15)).trace
    if trace and trace[0].t == 1.0:
        ok, largest = check_sqrt_decrease(trace, 5.0, 123.0)
        assert ok and largest == math.inf


def test_csv_round_trip_and_echo():
    out = solve(ArctanProblem(), sv(2.0), BscConfig(step_bound=0.8, residual_tol=1e-15))
    buf = io.StringIO()
    write_trace_csv(out, buf, echo={"experiment": "demo", "H": 0.8})
    text = buf.getvalue()
    lines = text.splitlines()
    assert lines[0] == "# experiment=demo"
    assert lines[1] == "# H=0.8"
    assert lines[2] == "k,t,u,du,dup,Hprime,status"
    body = lines[3:]
    assert len(body) == len(out.trace)
    first = body[0].split(",")
    assert float(first[1]) == out.trace[0].t
    assert float(first[2]) == out.trace[0].u_value
    assert first[-1] == "converged"


def test_extended_csv_blanks_missing_fields():
    cfg = BscConfig(step_bound=0.8, track_residual=False, increment_tol=1e-10)
    out = solve(ArctanProblem(), sv(2.0), cfg)
    buf = io.StringIO()
    write_trace_csv(out, buf, extended=True)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "k,t,u,du,dup,Hprime,residual_v,kappa,inner_iters,status"
    cells = lines[1].split(",")
    assert cells[6] == ""  # residual was never tracked


def test_json_bundle_structure():
    out = solve(ArctanProblem(), sv(2.0), BscConfig(step_bound=0.8, residual_tol=1e-15))
    obj = trace_to_json(out, {"experiment": "demo"})
    assert set(obj) == {"config", "trace", "summary"}
    assert obj["config"]["experiment"] == "demo"
    assert len(obj["trace"]) == len(out.trace)
    assert obj["summary"]["status"] == "converged"
    text = json.dumps(obj)
    assert "NaN" not in text
