"""Truncation of a moment problem into a finite semidefinite program."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import model, sdp, transcribe
from .model import DISCRETE, ImpulsiveOCP, ScalingMap
from .poly import MultiIndex, Polynomial, add_index, enumerate_basis
from .transcribe import Key, MeasureId, MomentProblem, MomentVector

log = logging.getLogger(__name__)


@dataclass
class MatrixStructure:
    """Symmetric matrix of moment combinations.

    Entry ``(i, j)`` is ``sum_k a_k y_{b_i + b_j + k}`` with ``a`` the generator
    (``None`` means the plain moment matrix, ``a = 1``).
    """

    owner: str
    n_vars: int
    generator: Optional[Polynomial]
    order: int
    basis: List[MultiIndex]
    entries: Dict[tuple, Dict[MultiIndex, float]]

    @property
    def side(self) -> int:
        return len(self.basis)

    def evaluate(self, values: Dict[MultiIndex, float]) -> np.ndarray:
        s = self.side
        M = np.zeros((s, s))
        for (i, j), comb in self.entries.items():
            v = sum(c * values[k] for k, c in comb.items())
            M[i, j] = M[j, i] = v
        return M

    def coefficient_matrix(self, index: Dict[Key, int], n: int) -> sp.csr_matrix:
        """Sparse ``(side^2, n)`` map from the variable vector to ``vec(M)``."""
        s = self.side
        rows, cols, vals = [], [], []
        for (i, j), comb in self.entries.items():
            for k, c in comb.items():
                col = index[(self.owner, k)]
                rows.append(i * s + j)
                cols.append(col)
                vals.append(c)
                if i != j:
                    rows.append(j * s + i)
                    cols.append(col)
                    vals.append(c)
        return sp.csr_matrix((vals, (rows, cols)), shape=(s * s, n))


def _owner_info(owner):
    if isinstance(owner, MeasureId):
        return owner.name, owner.n_vars
    name, n_vars = owner
    return name, n_vars


def moment_matrix(owner, d: int) -> MatrixStructure:
    """Plain moment matrix ``M_d(y)[i, j] = y_{i+j}`` over the basis of degree ``d``."""
    if d < 0:
        raise ValueError("order must be nonnegative")
    name, nv = _owner_info(owner)
    basis = enumerate_basis(nv, d)
    entries = {}
    for i, bi in enumerate(basis):
        for j in range(i, len(basis)):
            entries[(i, j)] = {add_index(bi, basis[j]): 1.0}
    return MatrixStructure(name, nv, None, d, basis, entries)


def localizing_matrix(owner, a: Polynomial, d: int) -> MatrixStructure:
    """``M(a y)[i, j] = sum_k a_k y_{i+j+k}`` of order ``d - ceil(deg a / 2)``."""
    name, nv = _owner_info(owner)
    if a.n_vars != nv:
        raise ValueError("generator must live in the owner's variables")
    order = d - math.ceil(a.degree / 2)
    if order < 0:
        raise ValueError(f"generator of degree {a.degree} does not fit relaxation order {d}")
    basis = enumerate_basis(nv, order)
    terms = a.terms
    entries = {}
    for i, bi in enumerate(basis):
        for j in range(i, len(basis)):
            bij = add_index(bi, basis[j])
            comb: Dict[MultiIndex, float] = {}
            for k, c in terms.items():
                key = add_index(bij, k)
                comb[key] = comb.get(key, 0.0) + c
            entries[(i, j)] = comb
    return MatrixStructure(name, nv, a, order, basis, entries)


def first_order(mp: MomentProblem) -> int:
    """Smallest order whose moments cover the cost and every support generator."""
    degs = [sum(k) for (_, k) in mp.cost]
    for m in mp.measures:
        degs.extend(a.degree for a in m.support)
    return max([1] + [math.ceil(d / 2) for d in degs])


@dataclass
class ConicProgram:
    """``min c'y + offset : A y = b, PSD blocks, scalar localizers >= 0, slacks >= 0``."""

    order: int
    keys: List[Key]
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    offset: float
    blocks: List[MatrixStructure]
    scalars: List[MatrixStructure]
    nonneg_vars: List[int]
    row_labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}

    @property
    def n(self) -> int:
        return len(self.keys)

    def psd_system(self):
        return [blk.coefficient_matrix(self.index, self.n) for blk in self.blocks]

    def nonneg_system(self) -> sp.csr_matrix:
        """Rows ``L`` with ``L y >= 0``: scalar localizers then slack variables."""
        rows = [blk.coefficient_matrix(self.index, self.n) for blk in self.scalars]
        for i in self.nonneg_vars:
            rows.append(sp.csr_matrix(([1.0], ([0], [i])), shape=(1, self.n)))
        if not rows:
            return sp.csr_matrix((0, self.n))
        return sp.vstack(rows).tocsr()

    def values(self, y: np.ndarray, name: str) -> Dict[MultiIndex, float]:
        return {k: float(y[i]) for (n, k), i in self.index.items() if n == name}

    def summary(self) -> dict:
        return {
            "order": self.order,
            "variables": self.n,
            "equalities": int(self.A.shape[0]),
            "psd_sides": [b.side for b in self.blocks],
            "scalar_localizers": len(self.scalars),
            "nonneg_vars": len(self.nonneg_vars),
        }


def assemble(mp: MomentProblem, d: int) -> ConicProgram:
    """Truncate ``mp`` to moments of degree ``<= 2d``."""
    if d < first_order(mp):
        raise ValueError(f"order {d} below the first relaxation order {first_order(mp)}")
    keys: List[Key] = []
    for m in mp.measures:
        basis = enumerate_basis(m.n_vars, 2 * d)
        keys.extend((m.name, k) for k in basis)
    slack_start = len(keys)
    keys.extend((s, ()) for s in mp.slacks)
    index = {k: i for i, k in enumerate(keys)}
    rows, cols, vals, rhs, labels = [], [], [], [], []
    r = 0
    for row in mp.rows:
        if row.test_degree > 2 * d or row.degree > 2 * d:
            continue
        if not row.coeffs and row.rhs == 0.0:
            continue
        for key, c in row.coeffs.items():
            rows.append(r)
            cols.append(index[key])
            vals.append(c)
        rhs.append(row.rhs)
        labels.append(row.label)
        r += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, len(keys)))
    c = np.zeros(len(keys))
    for key, coef in mp.cost.items():
        if key not in index:
            raise ValueError(f"cost monomial {key} exceeds relaxation order {d}")
        c[index[key]] += coef
    blocks, scalars = [], []
    for m in mp.measures:
        mats = [moment_matrix(m, d)]
        for a in m.support:
            if d - math.ceil(a.degree / 2) >= 0:
                mats.append(localizing_matrix(m, a, d))
        for mat in mats:
            (scalars if mat.side == 1 else blocks).append(mat)
    return ConicProgram(
        order=d, keys=keys, A=A, b=np.asarray(rhs, float), c=c, offset=mp.cost_offset,
        blocks=blocks, scalars=scalars, nonneg_vars=list(range(slack_start, len(keys))),
        row_labels=labels,
    )


# --- solving the hierarchy ----------------------------------------------------

@dataclass
class RelaxationResult:
    order: int
    status: str
    bound: float
    moments: Dict[str, MomentVector]
    scaling: Optional[ScalingMap]
    problem: MomentProblem
    program: ConicProgram
    solve: sdp.SolveResult
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status in (sdp.OPTIMAL, sdp.INACCURATE)

    @property
    def certificate(self):
        return self.solve.certificate

    def native_integral(self, name: str, p: Polynomial) -> float:
        """``int p d(name)`` in native units for ``p`` in native ``(t, x)``."""
        meas = self.problem.measure(name)
        q = p
        factor = 1.0
        if self.scaling is not None:
            q = self.scaling.poly_to_scaled(p)
            if meas.tag in ("mu", "nu_discrete"):
                factor = self.scaling.T
        return factor * self.moments[name].integrate(meas.restrict(q))

    def time_marginal(self, name: str, max_deg: int | None = None, native: bool = False) -> np.ndarray:
        """Moments ``int t^a d(name)``, ``a = 0..max_deg`` (scaled time by default)."""
        meas = self.problem.measure(name)
        tp = meas.time_position
        if tp is None:
            raise ValueError(f"{name} has no time variable")
        dmax = 2 * self.order if max_deg is None else max_deg
        nvar = self.problem.ocp.n_vars
        out = []
        for a in range(dmax + 1):
            k = [0] * nvar
            k[0] = a
            mono = Polynomial.monomial(k)
            if native:
                out.append(self.native_integral(name, mono))
            else:
                out.append(self.moments[name].integrate(meas.restrict(mono)))
        return np.array(out)


def solve_relaxation(ocp: ImpulsiveOCP, d: int, opts: sdp.SolverOptions | None = None,
                     scaled: bool = True, fold_boundary: bool = True,
                     discrete_identity: str = "time", smap: ScalingMap | None = None) -> RelaxationResult:
    """Solve the order-``d`` moment relaxation of ``ocp``.

    With ``scaled`` the problem is mapped onto the unit box first, by
    ``smap`` when given and by the declared state ranges otherwise.
    """
    t0 = time.perf_counter()
    if scaled:
        work, smap = model.scale(ocp, smap)
    else:
        work, smap = ocp, None
    mp = transcribe.build(work, 2 * d, fold_boundary=fold_boundary, discrete_identity=discrete_identity)
    cp = assemble(mp, d)
    res = sdp.solve(cp, opts)
    moments = {
        m.name: MomentVector(m.name, m.n_vars, cp.values(res.x, m.name)) for m in mp.measures
    }
    bound = res.objective
    out = RelaxationResult(d, res.status, bound, moments, smap, mp, cp, res, time.perf_counter() - t0)
    log.info("order %d: %s bound %.6g (%d iterations, %.2fs)", d, res.status, bound, res.iterations, out.seconds)
    return out


def solve_hierarchy(ocp: ImpulsiveOCP, orders: Sequence[int], opts: sdp.SolverOptions | None = None,
                    **kw) -> List[RelaxationResult]:
    return [solve_relaxation(ocp, d, opts, **kw) for d in orders]
