from dataclasses import replace

import numpy as np
import pytest

from impulsive_moments import model, transcribe, validate
from impulsive_moments.extract import ImpulsePlan
from impulsive_moments.poly import Polynomial
from impulsive_moments.relax import (assemble, first_order, localizing_matrix, moment_matrix,
                                     solve_hierarchy, solve_relaxation)

MU = ("mu", 2)


def test_moment_matrix_order_one():
    M = moment_matrix(MU, 1)
    assert M.side == 3
    labels = [[list(M.entries[(min(i, j), max(i, j))]) [0] for j in range(3)] for i in range(3)]
    assert labels == [[(0, 0), (1, 0), (0, 1)],
                      [(1, 0), (2, 0), (1, 1)],
                      [(0, 1), (1, 1), (0, 2)]]


def test_moment_matrix_small_orders():
    assert moment_matrix(MU, 0).entries == {(0, 0): {(0, 0): 1.0}}
    assert moment_matrix(MU, 2).side == 6
    with pytest.raises(ValueError):
        moment_matrix(MU, -1)


def test_localizing_scalar_for_state_constraint():
    a = Polynomial.constant(2, 1.0) - Polynomial.monomial((0, 2))
    L = localizing_matrix(MU, a, 1)
    assert L.side == 1
    assert L.entries[(0, 0)] == {(0, 0): 1.0, (0, 2): -1.0}


def test_localizing_time_box_generator():
    t = Polynomial.variable(2, 0)
    a = t * (1.0 - t)
    L = localizing_matrix(MU, a, 2)
    assert L.side == 3
    for (i, j), comb in L.entries.items():
        base = tuple(p + q for p, q in zip(L.basis[i], L.basis[j]))
        assert comb == {(base[0] + 1, base[1]): 1.0, (base[0] + 2, base[1]): -1.0}


def test_localizing_by_one_is_moment_matrix():
    L = localizing_matrix(MU, Polynomial.constant(2, 1.0), 2)
    assert L.entries == moment_matrix(MU, 2).entries
    with pytest.raises(ValueError):
        localizing_matrix(MU, Polynomial.monomial((0, 4)), 1)


def test_structure_symmetric_coefficients(rng):
    t = Polynomial.variable(2, 0)
    x = Polynomial.variable(2, 1)
    L = localizing_matrix(MU, 1.0 - x * x + 0.5 * t, 3)
    vals = {k: rng.standard_normal() for k in transcribe.enumerate_basis(2, 6)}
    M = L.evaluate(vals)
    np.testing.assert_array_equal(M, M.T)
    index = {("mu", k): i for i, k in enumerate(transcribe.enumerate_basis(2, 6))}
    y = np.array([vals[k] for k in transcribe.enumerate_basis(2, 6)])
    vecM = L.coefficient_matrix(index, len(y)) @ y
    np.testing.assert_allclose(vecM.reshape(L.side, L.side), M, rtol=1e-14, atol=1e-14)


def test_first_order_examples(ex1, bundled):
    assert first_order(transcribe.build(ex1, 2)) == 1
    t = Polynomial.variable(2, 0)
    x = Polynomial.variable(2, 1)
    heavy = replace(ex1, h=t ** 4 * x * x)
    assert first_order(transcribe.build(heavy, 6)) == 3
    rdv, _ = bundled("rdv_case1")
    assert first_order(transcribe.build(model.scale(rdv)[0], 2)) == 1


def test_assemble_ex1_order_one(ex1):
    cp = assemble(transcribe.build(ex1, 2), 1)
    assert cp.A.shape[0] == 5  # the v = 1 row folds to 0 = 0
    assert [b.side for b in cp.blocks] == [3, 3, 3]
    assert [b.owner for b in cp.blocks] == ["mu", "nu+1", "nu-1"]
    # per measure: 1 - x^2 and the two linear time-box generators
    assert len(cp.scalars) == 9
    state = [s for s in cp.scalars if s.generator.depends_on(1)]
    assert len(state) == 3
    pinned = assemble(transcribe.build(ex1, 2, fold_boundary=False), 1)
    assert sum(l.startswith("liouville") for l in pinned.row_labels) == 6


def test_assemble_rejects_order_below_first(ex1):
    mp = transcribe.build(replace(ex1, h=Polynomial.monomial((0, 4))), 4)
    with pytest.raises(ValueError):
        assemble(mp, 1)


def test_assemble_block_sides(bundled):
    ex3, s3 = bundled("ex3")
    cp = assemble(transcribe.build(model.scale(ex3)[0], 8, discrete_identity=s3["discrete_identity"]), 4)
    moment_blocks = [b for b in cp.blocks if b.generator is None]
    assert [(b.owner, b.side) for b in moment_blocks] == [("mu", 15), ("nu1", 15), ("nu2", 15)]
    rdv, _ = bundled("rdv_case1")
    cp = assemble(transcribe.build(model.scale(rdv)[0], 4), 2)
    moment_blocks = [b for b in cp.blocks if b.generator is None]
    assert [(b.owner, b.side) for b in moment_blocks] == [
        ("mu", 21), ("nu+1", 21), ("nu-1", 21), ("nu+2", 21), ("nu-2", 21)]
    assert all(sum(k) <= 4 for _, k in cp.keys)


def test_simulated_trajectory_is_feasible_for_relaxation(ex2):
    plan = ImpulsePlan(channels=[[(0.0, -0.75), (2.0, 0.25)]])
    traj = validate.simulate(ex2, plan, moment_degree=4)
    mp = transcribe.build(ex2, 4)
    cp = assemble(mp, 2)
    moments = validate.project_moments(traj.moments, mp)
    y = np.zeros(cp.n)
    for (name, k), i in cp.index.items():
        # the TV slack is zero: |u| sums to exactly the bound
        y[i] = moments[name].values[k] if name in moments else 0.0
    assert np.abs(cp.A @ y - cp.b).max() <= 1e-6
    for blk in cp.blocks + cp.scalars:
        M = blk.evaluate(moments[blk.owner].values)
        assert np.linalg.eigvalsh(M).min() >= -1e-8


def test_ex1_bound_and_marginals(ex1):
    res = solve_relaxation(ex1, 1)
    assert res.status == "optimal"
    assert res.bound == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(res.time_marginal("mu", 1, native=True), [2.0, 2.0], atol=1e-5)


def test_ex2_bounds_monotone(ex2):
    bounds = [r.bound for r in solve_hierarchy(ex2, [1, 2, 3])]
    assert all(b2 >= b1 - 1e-6 for b1, b2 in zip(bounds, bounds[1:]))
    np.testing.assert_allclose(bounds, 0.125, atol=1e-4)


def test_ex3_bounds_monotone(bundled):
    ocp, settings = bundled("ex3")
    res = solve_hierarchy(ocp, [1, 2, 3, 4], discrete_identity=settings["discrete_identity"])
    bounds = [r.bound for r in res]
    assert all(r.ok for r in res)
    assert all(b2 >= b1 - 1e-6 for b1, b2 in zip(bounds, bounds[1:]))
    assert max(bounds) <= 0.375 + 1e-6


def test_scaled_and_native_bounds_agree(ex2):
    a = solve_relaxation(ex2, 2)
    b = solve_relaxation(ex2, 2, scaled=False)
    assert a.bound == pytest.approx(b.bound, abs=1e-6)
    np.testing.assert_allclose(a.time_marginal("nu-1", 2, native=True),
                               b.time_marginal("nu-1", 2, native=True), atol=1e-5)
