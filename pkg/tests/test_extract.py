import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from impulsive_moments import extract
from impulsive_moments.extract import (NON_ATOMIC, AtomicMeasure, ImpulsePlan, atoms_from_moments,
                                       flat_rank, hankel, identify_controls, marginal,
                                       moment_distance, piecewise_uniform_moments)
from impulsive_moments.relax import solve_relaxation
from impulsive_moments.transcribe import MomentVector


def lebesgue(lo, hi, deg):
    k = np.arange(deg + 1)
    return (hi ** (k + 1) - lo ** (k + 1)) / (k + 1)


def test_marginal_keeps_selected_variables():
    y = MomentVector("mu", 2, {(0, 0): 2.0, (1, 0): 2.0, (0, 1): 0.5, (2, 0): 8 / 3, (1, 1): 0.5, (0, 2): 0.125})
    t = marginal(y, [0])
    assert t.values == {(0,): 2.0, (1,): 2.0, (2,): 8 / 3}
    x = marginal(y, [1])
    assert x.values == {(0,): 2.0, (1,): 0.5, (2,): 0.125}
    with pytest.raises(ValueError):
        marginal(y, [])


def test_ex1_mu_marginals(ex1):
    res = solve_relaxation(ex1, 2)
    y = res.moments["mu"]
    # native units: time spans [0, 2], so scaled moments pick up powers of 2
    t = np.array([res.native_integral("mu", extract.Polynomial.monomial((a, 0))) for a in range(4)])
    np.testing.assert_allclose(t, lebesgue(0.0, 2.0, 3), atol=1e-4)
    xm = marginal(y, [1])
    np.testing.assert_allclose([xm.values[(k,)] * 2.0 for k in range(3)], [2.0, 0.0, 0.0], atol=1e-4)


def test_ex2_x_marginal_is_dirac_at_quarter(ex2):
    res = solve_relaxation(ex2, 2)
    x = [res.native_integral("mu", extract.Polynomial.monomial((0, k))) for k in range(4)]
    np.testing.assert_allclose(x, [2.0, 0.5, 0.125, 0.03125], atol=1e-5)


def test_flat_rank_examples():
    two_atoms = np.array([2.0 ** k * (k > 0) + (k == 0) for k in range(5)]) + np.array([1.0, 0, 0, 0, 0])
    np.testing.assert_array_equal(two_atoms, [2, 2, 4, 8, 16])
    assert flat_rank(two_atoms) == 2
    assert flat_rank(lebesgue(0.0, 1.0, 6), interval=(0.0, 1.0)) is None


def test_atoms_from_moments_examples():
    a = atoms_from_moments([0.25, 0.5, 1.0], 1)
    assert a.atoms[0] == pytest.approx((2.0, 0.25))
    b = atoms_from_moments([0.75, 0.0, 0.0], 1)
    assert b.atoms[0] == pytest.approx((0.0, 0.75))
    c = atoms_from_moments([2.0, 2.0, 4.0, 8.0], 2)
    np.testing.assert_allclose(c.locations, [0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(c.weights, [1.0, 1.0], atol=1e-12)
    assert c.residual <= 1e-12


def test_ill_conditioned_pencil_reduces_atoms():
    one_atom = [1.0, 0.5, 0.25, 0.125]
    with pytest.warns(UserWarning):
        meas = atoms_from_moments(one_atom, 2)
    assert len(meas.atoms) == 1
    assert meas.atoms[0] == pytest.approx((0.5, 1.0))
    with pytest.raises(ValueError):
        atoms_from_moments([1.0], 1)


def test_signed_atoms():
    m = [-0.75 + 0.25, 0.25 * 2, 0.25 * 4, 0.25 * 8]
    meas = atoms_from_moments(m, 2, signed=True)
    np.testing.assert_allclose(meas.locations, [0.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(meas.weights, [-0.75, 0.25], atol=1e-10)


def random_atoms(seed, r, gap, wmin):
    rng = np.random.default_rng(seed)
    while True:
        t = np.sort(rng.uniform(0.0, 1.0, r))
        if r == 1 or np.diff(t).min() > gap:
            break
    return t, rng.uniform(wmin, 1.0, r)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31))
def test_reconstruction_residual(r, seed):
    t, w = random_atoms(seed, r, 0.05, 0.1)
    m = np.array([np.sum(w * t ** k) for k in range(2 * r + 1)])
    meas = atoms_from_moments(m, r, interval=(0.0, 1.0))
    assert meas.residual <= 1e-5
    assert np.all(meas.weights > 0)
    assert np.all((meas.locations >= -1e-6) & (meas.locations <= 1 + 1e-6))
    np.testing.assert_allclose(meas.moments(2 * r), m, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31))
def test_flat_rank_counts_separated_atoms(r, seed):
    t, w = random_atoms(seed, r, 0.25, 0.3)
    m = np.array([np.sum(w * t ** k) for k in range(2 * r + 3)])
    assert flat_rank(m, interval=(0.0, 1.0)) == r


def test_hankel_shift():
    H = hankel([1, 2, 3, 4, 5], 2, shift=1)
    np.testing.assert_array_equal(H, [[2, 3], [3, 4]])


def test_ex2_plan(ex2):
    plan = identify_controls(solve_relaxation(ex2, 2))
    assert plan.atomic
    ((t0, u0), (t1, u1)) = plan.channels[0]
    assert t0 == pytest.approx(0.0, abs=1e-4) and u0 == pytest.approx(-0.75, abs=1e-3)
    assert t1 == pytest.approx(2.0, abs=1e-4) and u1 == pytest.approx(0.25, abs=1e-3)
    assert all(r <= 1e-5 for r in plan.residuals.values())


def test_extraction_invariant_under_scaling(ex2):
    a = identify_controls(solve_relaxation(ex2, 2))
    b = identify_controls(solve_relaxation(ex2, 2, scaled=False))
    ta = [t for t, _ in a.channels[0]]
    tb = [t for t, _ in b.channels[0]]
    np.testing.assert_allclose(ta, tb, atol=1e-6)


def test_ex1_padding_is_reported(ex1):
    plan = identify_controls(solve_relaxation(ex1, 3))
    assert plan.atomic
    np.testing.assert_allclose(plan.channels[0], [(0.0, -1.0), (2.0, 0.5)], atol=1e-5)
    assert any("padding" in c for c in plan.cancellations)


def test_ex3_flagged_non_atomic(bundled):
    ocp, settings_ = bundled("ex3")
    res = solve_relaxation(ocp, 4, discrete_identity=settings_["discrete_identity"])
    plan = identify_controls(res)
    assert NON_ATOMIC in plan.flags
    assert plan.non_atomic == [0]
    dens = np.asarray(plan.density[0])[:8]
    # net control of the optimal plan: -1 on [0, 1], chattering with zero mean
    # on [1, 3/2], +1 on [3/2, 2]
    cand = piecewise_uniform_moments([(0.0, 1.0, -1.0), (1.5, 2.0, 1.0)], 7)
    np.testing.assert_allclose(dens, cand, rtol=2e-2, atol=1e-3)
    # a plan without the chattering window is clearly further away
    far = piecewise_uniform_moments([(0.0, 1.25, -1.0), (1.25, 2.0, 1.0)], 7)
    assert moment_distance(dens, far) > 10 * moment_distance(dens, cand)


def test_cancellation_of_coincident_opposite_atoms():
    plan = ImpulsePlan(channels=[[]])
    out = extract._cancel([(1.0, 0.3), (1.0005, -0.1)], 1e-3, 0, plan)
    assert out == [(1.0, pytest.approx(0.2))]
    assert plan.cancellations[0]["channel"] == 0


def test_plan_serialisation_round_trip():
    plan = ImpulsePlan(channels=[[(2.0, 0.25), (0.0, -0.75)]], flags=[NON_ATOMIC], non_atomic=[0],
                       density={0: [1.0, 0.5]}, residuals={"nu+1": 1e-9})
    assert plan.channels[0] == [(0.0, -0.75), (2.0, 0.25)]
    back = ImpulsePlan.from_dict(plan.to_dict())
    assert back == plan
    jumps = plan.jumps()
    assert [t for t, _ in jumps] == [0.0, 2.0]


def test_extraction_requires_solved_relaxation(bundled):
    ocp, _ = bundled("ex4")
    with pytest.raises(ValueError):
        identify_controls(solve_relaxation(ocp, 1))
