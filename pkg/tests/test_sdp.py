import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from impulsive_moments import sdp, transcribe
from impulsive_moments.relax import ConicProgram, assemble, solve_relaxation
from impulsive_moments.sdp import (SolverOptions, export_sdpa, read_sdpa, sdpa_to_standard,
                                   solve_standard)


def schur_toy():
    """min y11 s.t. [[1, y12], [y12, y11]] psd, y12 = 1."""
    F = sp.csr_matrix(np.array([[0, 0], [0, 1], [0, 1], [1, 0]], float))
    f0 = np.array([1.0, 0, 0, 0])
    A = sp.csr_matrix([[0.0, 1.0]])
    return dict(c=np.array([1.0, 0.0]), A=A, b=np.array([1.0]), L=sp.csr_matrix((0, 2)),
                l0=np.zeros(0), F=[F], f0=[f0], sides=[2])


def standard_parts(cp):
    L = cp.nonneg_system()
    return cp.A, cp.b, L, cp.psd_system(), [b.side for b in cp.blocks]


def cone_residual(cp, vec):
    """Most negative eigenvalue over the cone pieces of ``vec`` (flat z or s layout)."""
    A, b, L, F, sides = standard_parts(cp)
    nl = L.shape[0]
    worst = vec[:nl].min() if nl else 0.0
    off = nl
    for s in sides:
        blk = vec[off:off + s * s].reshape(s, s)
        worst = min(worst, np.linalg.eigvalsh(0.5 * (blk + blk.T)).min())
        off += s * s
    return worst


def stacked(cp, x):
    A, b, L, F, sides = standard_parts(cp)
    return np.concatenate([L @ x] + [Fk @ x for Fk in F])


def test_schur_toy():
    res = solve_standard(**schur_toy())
    assert res.status == sdp.OPTIMAL
    assert res.objective == pytest.approx(1.0, abs=1e-7)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_pure_lp_mode():
    # min x1 + 2 x2 : x1 + x2 = 1, x >= 0
    res = solve_standard(np.array([1.0, 2.0]), sp.csr_matrix([[1.0, 1.0]]), np.array([1.0]),
                         sp.identity(2, format="csr"), np.zeros(2), [], [], [])
    assert res.status == sdp.OPTIMAL
    np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-7)


def test_ex1_first_relaxation(ex1):
    cp = assemble(transcribe.build(ex1, 2), 1)
    res = sdp.solve(cp)
    assert res.status == sdp.OPTIMAL
    assert res.objective == pytest.approx(0.0, abs=1e-6)


def test_ex4_farkas_certificate(bundled):
    ocp, _ = bundled("ex4")
    res = solve_relaxation(ocp, 1)
    assert res.status == sdp.PRIMAL_INFEASIBLE
    cp = res.program
    y, z = res.certificate["y"], res.certificate["z"]
    A, b, L, F, sides = standard_parts(cp)
    # A'y - [L; F]'z = 0, z in the cone, b'y + h'z = -1 with h = 0 for moment programs
    lhs = A.T @ y - stacked(cp, np.eye(cp.n)).T @ z
    assert np.abs(lhs).max() <= 1e-6
    assert cone_residual(cp, z) >= -1e-6
    assert b @ y == pytest.approx(-1.0, abs=1e-6)


def test_ex5_unbounded_ray(bundled):
    ocp, _ = bundled("ex5")
    res = solve_relaxation(ocp, 1)
    assert res.status == sdp.DUAL_INFEASIBLE
    cp = res.program
    x = res.certificate["x"]
    assert cp.c @ x == pytest.approx(-1.0, abs=1e-6)
    assert np.abs(cp.A @ x).max() <= 1e-6
    assert cone_residual(cp, stacked(cp, x)) >= -1e-6


def test_options_validated():
    with pytest.raises(ValueError):
        SolverOptions(tol_feas=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iters=-1)


def test_iteration_limit_reported(ex2):
    cp = assemble(transcribe.build(ex2, 4), 2)
    res = sdp.solve(cp, SolverOptions(max_iters=3))
    assert res.status in (sdp.ITERATION_LIMIT, sdp.INACCURATE)
    assert res.iterations == 3


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_weak_duality_on_random_sdps(n, seed):
    rng = np.random.default_rng(seed)
    side = n
    # min <C, X> : <A_i, X> = b_i, X psd, written over the vec of a symmetric X
    idx = [(i, j) for i in range(side) for j in range(i, side)]
    nv = len(idx)
    F = np.zeros((side * side, nv))
    for k, (i, j) in enumerate(idx):
        F[i * side + j, k] = 1.0
        F[j * side + i, k] = 1.0
    X0 = rng.standard_normal((side, side))
    X0 = X0 @ X0.T + np.eye(side)
    x0 = np.array([X0[i, j] for i, j in idx])
    m = max(1, nv // 2)
    A = rng.standard_normal((m, nv))
    C = rng.standard_normal((side, side))
    C = C @ C.T
    c = F.T @ C.ravel() / 1.0
    res = solve_standard(c, sp.csr_matrix(A), A @ x0, sp.csr_matrix((0, nv)), np.zeros(0),
                         [sp.csr_matrix(F)], [np.zeros(side * side)], [side])
    assert res.status == sdp.OPTIMAL
    for rec in res.history:
        assert rec["pcost"] >= rec["dcost"] - max(1e-8, 10 * rec["gap"]) - 1e-12 * abs(rec["pcost"])
    assert res.objective >= res.dual_objective - 1e-7 * (1 + abs(res.objective))


def test_deterministic(ex2):
    cp = assemble(transcribe.build(ex2, 4), 2)
    a = sdp.solve(cp)
    b = sdp.solve(cp)
    assert a.iterations == b.iterations
    assert a.objective == b.objective
    np.testing.assert_array_equal(a.x, b.x)


def empty_program():
    return ConicProgram(order=0, keys=[], A=sp.csr_matrix((0, 0)), b=np.zeros(0), c=np.zeros(0),
                        offset=0.0, blocks=[], scalars=[], nonneg_vars=[])


def test_export_empty_program():
    text = export_sdpa(empty_program())
    assert "0 = mDIM" in text.splitlines()
    assert read_sdpa(text).n == 0


def test_export_ex1_blocks(ex1):
    cp = assemble(transcribe.build(ex1, 2), 1)
    text = export_sdpa(cp)
    data = read_sdpa(text)
    n_diag = len(cp.scalars) + len(cp.nonneg_vars) + 2 * cp.A.shape[0]
    assert data.block_struct == [3, 3, 3, -n_diag]
    assert data.n == cp.n
    assert data.layout == {"cone_rows": len(cp.scalars), "equalities": cp.A.shape[0]}


def test_export_round_trip_is_exact(ex2):
    cp = assemble(transcribe.build(ex2, 4), 2)
    data = read_sdpa(export_sdpa(cp))
    np.testing.assert_array_equal(data.c, cp.c)
    for k, (blk, F) in enumerate(zip(cp.blocks, cp.psd_system()), start=1):
        for col in range(cp.n):
            M = data.block_matrix(col + 1, k)
            np.testing.assert_array_equal(M.ravel(), F[:, col].toarray().ravel())
    # equality rows sit in the diagonal block twice with opposite signs
    kd = len(data.block_struct)
    nc, ne = data.layout["cone_rows"], data.layout["equalities"]
    rhs = np.diag(data.block_matrix(0, kd))
    np.testing.assert_array_equal(rhs[nc:nc + ne], cp.b)
    np.testing.assert_array_equal(rhs[nc + ne:], -cp.b)


def test_sdpa_reimport_solves_to_same_value(ex2):
    cp = assemble(transcribe.build(ex2, 4), 2)
    data = read_sdpa(export_sdpa(cp))
    c, A, b, L, l0, F, f0, sides = sdpa_to_standard(data)
    res = solve_standard(c, A, b, L, l0, F, f0, sides)
    assert res.ok
    assert res.objective + data.offset == pytest.approx(0.125, abs=1e-5)


def test_external_cross_check(ex2):
    pytest.importorskip("cvxpy")
    cp = assemble(transcribe.build(ex2, 4), 2)
    status, value = sdp.solve_external(read_sdpa(export_sdpa(cp)))
    assert status.startswith("optimal")
    assert value == pytest.approx(0.125, abs=1e-4)
