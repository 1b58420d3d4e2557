from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from impulsive_moments import transcribe, validate
from impulsive_moments.extract import ImpulsePlan, identify_controls
from impulsive_moments.model import BoundaryCondition, SemialgebraicSet
from impulsive_moments.poly import Polynomial, enumerate_basis
from impulsive_moments.relax import solve_relaxation
from impulsive_moments.transcribe import boundary_moments
from impulsive_moments.validate import (HCW_A, HcwModel, certify, hcw_samples, hcw_transition,
                                        liouville_residuals, occupation_moments, simulate,
                                        solve_rendezvous_lp)

EX2_PLAN = ImpulsePlan(channels=[[(0.0, -0.75), (2.0, 0.25)]])
EX1_PLAN = ImpulsePlan(channels=[[(0.0, -1.0), (2.0, 0.5)]])


def test_ex2_plan_holds_quarter(ex2):
    traj = simulate(ex2, EX2_PLAN)
    inner = (traj.grid > 0) & (traj.grid < 2)
    np.testing.assert_allclose(traj.states[inner, 0], 0.25, atol=1e-14)
    assert traj.cost == pytest.approx(0.125, abs=1e-10)
    assert traj.feasible()
    # jumps are applied algebraically
    assert traj.jumps[0][0] == 0.0
    np.testing.assert_array_equal(traj.jumps[0][1], [-0.75])


def test_ex1_turnpike(ex1):
    traj = simulate(ex1, EX1_PLAN)
    assert traj.cost == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(traj.final_state, [0.5], atol=1e-14)
    assert traj.terminal_error <= 1e-14


def test_empty_plan_is_constant(ex1):
    traj = simulate(ex1, ImpulsePlan(channels=[[]]))
    np.testing.assert_allclose(traj.states[:, 0], 1.0)
    assert traj.cost == pytest.approx(2.0, rel=1e-12)
    assert traj.terminal_error == pytest.approx(0.5)
    assert not traj.feasible()


def test_plan_outside_horizon_rejected(ex1):
    with pytest.raises(ValueError):
        simulate(ex1, ImpulsePlan(channels=[[(2.5, 1.0)]]))
    with pytest.raises(ValueError):
        simulate(ex1, ImpulsePlan(channels=[[], []]))


def test_state_violation_reported(ex1):
    traj = simulate(ex1, ImpulsePlan(channels=[[(1.0, 0.5)]]))
    assert traj.violation == pytest.approx(1.5 ** 2 - 1.0, rel=1e-12)


def test_occupation_moments_ex1(ex1):
    traj = simulate(ex1, EX1_PLAN, moment_degree=2)
    mu = traj.moments["mu"].values
    assert mu[(0, 0)] == pytest.approx(2.0, abs=1e-12)
    assert mu[(1, 0)] == pytest.approx(2.0, abs=1e-12)
    assert mu[(0, 1)] == mu[(1, 1)] == mu[(0, 2)] == 0.0
    muT = boundary_moments(BoundaryCondition.dirac([0.5]), 2, time=2.0)
    for k, v in muT.values.items():
        assert traj.moments["muT"].values[k] == pytest.approx(v, abs=1e-14)


def test_occupation_moments_ex2(ex2):
    mom = occupation_moments(None, 2, ocp=ex2, plan=EX2_PLAN)
    assert mom["nu-1"].values[(0, 0)] == pytest.approx(0.75)
    assert mom["nu-1"].values[(1, 0)] == 0.0
    # segment-uniform kernel: x averaged over the jump from 1 to 1/4
    assert mom["nu-1"].values[(0, 1)] == pytest.approx(0.75 * 0.625)
    assert mom["nu+1"].values[(1, 0)] == pytest.approx(0.5)


@pytest.mark.parametrize("tv", [None, 1.0])
def test_liouville_oracle_on_turnpike(tv):
    from conftest import unit_interval_problem
    ocp = unit_interval_problem(tv_bound=tv)
    traj = simulate(ocp, EX1_PLAN if tv is None else EX2_PLAN, moment_degree=6)
    mp = transcribe.build(ocp if tv is None else replace(ocp), 6)
    res = liouville_residuals(mp, traj.moments)
    # the TV row needs the slack and is skipped
    assert len(res) >= len([r for r in mp.rows if r.label.startswith("liouville")])
    assert np.abs(res).max() <= 1e-6


def hcw_plan(seed):
    rng = np.random.default_rng(seed)
    k = rng.integers(1, 5)
    chans = [[], []]
    for _ in range(k):
        chans[rng.integers(0, 2)].append((float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(-0.2, 0.2))))
    return ImpulsePlan(channels=chans)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_liouville_oracle_random_hcw_plans(bundled, seed):
    ocp, _ = bundled("rdv_case1")
    plan = hcw_plan(seed)
    traj = simulate(ocp, plan, moment_degree=4, max_doublings=0)
    # the oracle checks the rows against the trajectory's own end point; the
    # rows never involve X, which is widened so that end point is admissible
    x = [Polynomial.variable(5, i) for i in range(1, 5)]
    wide = SemialgebraicSet(5, (100.0 - sum(xi * xi for xi in x),))
    ocp = replace(ocp, X=wide, terminal=BoundaryCondition.dirac(traj.final_state))
    mp = transcribe.build(ocp, 4)
    res = liouville_residuals(mp, traj.moments)
    assert len(res) == len(mp.rows)
    assert np.abs(res).max() <= 1e-6


def test_certify_ex2(ex2):
    res = solve_relaxation(ex2, 2)
    rep = certify(res, simulate(ex2, EX2_PLAN))
    assert 0.0 - 1e-6 <= rep.gap <= 1e-4
    assert rep.verdict.startswith("globally optimal")


def test_certify_suboptimal_single_impulse(ex2):
    res = solve_relaxation(ex2, 2)
    # one jump to the target at t = 0: cost 2 * (1/2)^2 = 1/2
    rep = certify(res, simulate(ex2, ImpulsePlan(channels=[[(0.0, -0.5)]])))
    assert rep.cost == pytest.approx(0.5)
    assert rep.gap == pytest.approx(0.375, abs=1e-6)
    assert not rep.verdict.startswith("globally")


def test_certify_rejects_infeasible(ex2):
    res = solve_relaxation(ex2, 1)
    with pytest.raises(ValueError, match="infeasible"):
        certify(res, simulate(ex2, ImpulsePlan(channels=[[]])))


def test_certify_ex3_chattering(bundled):
    ocp, s = bundled("ex3")
    res = solve_relaxation(ocp, 4, discrete_identity=s["discrete_identity"])
    plan = ImpulsePlan(channels=[[]], segments=[(0.0, 1.0, (-1.0,)), (1.0, 1.5, (0.0,)), (1.5, 2.0, (1.0,))])
    traj = simulate(ocp, plan)
    assert traj.cost == pytest.approx(0.375, abs=1e-8)
    rep = certify(res, traj)
    assert rep.gap == pytest.approx(0.003, abs=1e-3)


def test_round_trip_moments_ex1_ex2(ex1, ex2):
    for ocp in (ex1, ex2):
        res = solve_relaxation(ocp, 3)
        traj = simulate(ocp, identify_controls(res), moment_degree=6)
        for k in enumerate_basis(2, 5):
            a = res.native_integral("mu", Polynomial.monomial(k))
            assert a == pytest.approx(traj.moments["mu"].values[k], abs=1e-3)


def test_round_trip_moments_rendezvous(bundled):
    ocp, _ = bundled("rdv_case1")
    res = solve_relaxation(ocp, 3)
    traj = simulate(ocp, identify_controls(res), moment_degree=6)
    smap = res.scaling
    # compared in the unit box, where moments are O(1)
    for k in enumerate_basis(5, 5):
        q = smap.poly_to_native(Polynomial.monomial(k))
        sim = sum(c * traj.moments["mu"].values[kk] for kk, c in q.terms.items())
        assert res.moments["mu"].values[k] * smap.T == pytest.approx(sim, abs=1e-3)


def test_hcw_transition_properties():
    np.testing.assert_array_equal(hcw_transition(1.3, 1.3), np.eye(4))
    np.testing.assert_allclose(hcw_transition(3.0, 1.2) @ hcw_transition(1.2, 0.4),
                               hcw_transition(3.0, 0.4), atol=1e-10)
    np.testing.assert_allclose(hcw_transition(2 * np.pi, 0.0) @ [1, 0, 0, 0], [1, 0, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        hcw_transition(0.0, 1.0)


def test_hcw_transition_matches_integration():
    x0 = np.array([0.3, -0.2, 0.1, 0.4])
    sol = solve_ivp(lambda t, x: HCW_A @ x, (0.0, 2.5), x0, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(hcw_transition(2.5, 0.0) @ x0, sol.y[:, -1], atol=1e-9)


def test_rendezvous_lp_case1():
    lp = solve_rendezvous_lp(HcwModel([1, 0, 0, 0], [0, 0, 0, 0]), N=50)
    assert lp.cost == pytest.approx(0.1061, abs=1e-3)
    assert len(lp.nonzero) == 2
    (t0, u0), (t1, u1) = lp.nonzero
    assert (t0, t1) == (0.0, pytest.approx(2 * np.pi))
    np.testing.assert_allclose(u0, [0.05305, 0.0], atol=1e-3)
    np.testing.assert_allclose(u1, [-0.05305, 0.0], atol=1e-3)


def test_rendezvous_lp_case3():
    model = HcwModel([1, 0, 0, 0], [0, 0, 0, 0.427])
    lp = solve_rendezvous_lp(model, N=50)
    table = [(0.0, -0.0392), (1.795, 0.109), (4.488, -0.109), (6.283, 0.0392)]
    assert len(lp.nonzero) == 4
    for (t, u), (tt, uu) in zip(lp.nonzero, table):
        assert t == pytest.approx(tt, abs=0.01)
        assert u[0] == pytest.approx(uu, abs=1e-3)
        assert u[1] == 0.0
    # the impulses reach the target
    x = hcw_samples(model, lp.nonzero, n=2)[-1, 1:]
    # amplitudes below the 1e-6 pruning threshold are dropped
    np.testing.assert_allclose(x, model.xf, atol=1e-5)


def test_rendezvous_lp_free_drift():
    x0 = np.array([0.2, 0.0, 0.0, -0.3])
    model = HcwModel(x0, hcw_transition(2 * np.pi, 0.0) @ x0)
    lp = solve_rendezvous_lp(model, N=20)
    assert lp.cost == pytest.approx(0.0, abs=1e-7)
    assert lp.nonzero == []
    with pytest.raises(ValueError):
        solve_rendezvous_lp(model, N=1)


def test_trajectory_csv(ex2):
    text = simulate(ex2, EX2_PLAN, steps=10, max_doublings=0).to_csv()
    lines = text.splitlines()
    assert lines[0] == "t,x1"
    assert float(lines[1].split(",")[1]) == 1.0
