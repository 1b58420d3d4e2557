"""Occupation-measure transcription into linear constraints on moments.

For every test monomial ``v(t, x)`` the weak Liouville identity

    int v dmuT - int v dmu0 = int (dv/dt + grad_x v . f) dmu
                              + sum_j int (grad_x v . G_j) d(nu+_j - nu-_j)

becomes one sparse row on the moments of the unknown measures.  Boundary
measures that are given (Dirac or uniform) are folded into the right-hand
side by default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model
from .model import DISCRETE, BoundaryCondition, ImpulsiveOCP
from .poly import MultiIndex, Polynomial, enumerate_basis

Key = Tuple[str, MultiIndex]

SLACK_TV = "s_tv"


@dataclass(frozen=True)
class MeasureId:
    """An unknown measure: which joint coordinates it lives on, its support.

    ``variables`` are positions in the ``(t, x)`` space, ``fixed`` holds the
    coordinates frozen by the support (e.g. ``t = T`` for a terminal measure)
    and ``support`` lists generators ``a >= 0`` in the measure's own variables.
    """

    name: str
    tag: str
    variables: Tuple[int, ...]
    fixed: Tuple[Tuple[int, float], ...] = ()
    support: Tuple[Polynomial, ...] = ()
    channel: Optional[int] = None

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def restrict(self, p: Polynomial) -> Polynomial:
        return p.restrict(self.variables, dict(self.fixed))

    @property
    def time_position(self) -> Optional[int]:
        return self.variables.index(0) if 0 in self.variables else None


@dataclass(frozen=True)
class FixedMeasure:
    """A given boundary probability measure at time ``time``."""

    name: str
    tag: str
    time: float
    bc: BoundaryCondition

    def integrate(self, p: Polynomial) -> float:
        """``int p(time, x) dmu(x)`` for ``p`` in the joint space."""
        if self.bc.kind == "dirac":
            return p((self.time,) + tuple(self.bc.point))
        if self.bc.kind == "uniform_box":
            lo, hi = self.bc.lo, self.bc.hi
            total = 0.0
            for k, c in p.terms.items():
                term = c * self.time ** k[0]
                for i, e in enumerate(k[1:]):
                    term *= _interval_moment(lo[i], hi[i], e)
                total += term
            return total
        raise ValueError("free boundary has no fixed moments")


def _interval_moment(lo, hi, e):
    return (hi ** (e + 1) - lo ** (e + 1)) / ((e + 1) * (hi - lo))


@dataclass
class MomentVector:
    """Moments ``y_k = int z^k dtau`` of one measure, keyed by exponent."""

    owner: str
    n_vars: int
    values: Dict[MultiIndex, float]

    def as_array(self, max_deg: int | None = None) -> np.ndarray:
        keys = self.keys(max_deg)
        return np.array([self.values[k] for k in keys])

    def keys(self, max_deg: int | None = None):
        d = max(sum(k) for k in self.values) if max_deg is None else max_deg
        return enumerate_basis(self.n_vars, d) if self.n_vars else [()]

    @property
    def mass(self) -> float:
        return self.values[(0,) * self.n_vars]

    def integrate(self, p: Polynomial) -> float:
        return sum(c * self.values[k] for k, c in p.terms.items())


def boundary_moments(bc: BoundaryCondition, max_deg: int, time: float | None = None) -> MomentVector:
    """Moments of a given boundary distribution.

    With ``time`` the moments are over ``(t, x)``, otherwise over ``x`` only.
    """
    if bc.kind == "free":
        raise ValueError("free boundary has no fixed moments; register an unknown measure instead")
    n = len(bc.point) if bc.kind == "dirac" else len(bc.lo)
    with_t = time is not None
    nv = n + 1 if with_t else n
    fm = FixedMeasure("b", "b", time if with_t else 0.0, bc)
    vals = {}
    for k in enumerate_basis(nv, max_deg):
        full = k if with_t else (0,) + k
        vals[k] = fm.integrate(Polynomial.monomial(full))
    return MomentVector("boundary", nv, vals)


@dataclass
class Row:
    coeffs: Dict[Key, float]
    rhs: float
    test_degree: int
    label: str = ""

    @property
    def degree(self) -> int:
        return max((sum(k) for (_, k) in self.coeffs), default=0)

    def evaluate(self, moments: Dict[str, MomentVector]) -> float:
        """Left-hand side minus right-hand side at the given moments."""
        total = 0.0
        for (name, k), c in self.coeffs.items():
            total += c * moments[name].values[k]
        return total - self.rhs


@dataclass
class MomentProblem:
    ocp: ImpulsiveOCP
    measures: List[MeasureId]
    fixed: Dict[str, FixedMeasure]
    rows: List[Row] = field(default_factory=list)
    cost: Dict[Key, float] = field(default_factory=dict)
    cost_offset: float = 0.0
    slacks: List[str] = field(default_factory=list)
    max_degree: int = 0

    def measure(self, name: str) -> MeasureId:
        for m in self.measures:
            if m.name == name:
                return m
        raise KeyError(name)

    @property
    def names(self):
        return [m.name for m in self.measures]

    def control_names(self):
        return [m.name for m in self.measures if m.tag.startswith("nu")]


def time_generators(T: float, nv: int) -> tuple:
    """``t >= 0`` and ``T - t >= 0`` as two linear localizers."""
    t = Polynomial.variable(nv, 0)
    return (t, T - t)


def ball_generator(ocp: ImpulsiveOCP) -> Optional[Polynomial]:
    """``n - sum ((x_i - c_i)/r_i)^2`` from the scaling box, if ranges exist."""
    ranges = model.state_ranges(ocp)
    if ranges is None:
        return None
    nv = ocp.n_vars
    out = Polynomial.constant(nv, float(ocp.n_states))
    for i, (lo, hi) in enumerate(ranges):
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        xi = (Polynomial.variable(nv, i + 1) - c) * (1.0 / r)
        out = out - xi * xi
    return out


def _dedupe(polys):
    out = []
    for p in polys:
        if p.is_zero():
            continue
        if not any(p.allclose(q, rtol=1e-12, atol=1e-15) for q in out):
            out.append(p)
    return tuple(out)


def _roster(ocp: ImpulsiveOCP, fold_boundary: bool):
    nv = ocp.n_vars
    full = tuple(range(nv))
    states = tuple(range(1, nv))
    ball = ball_generator(ocp)
    extra = (ball,) if ball is not None else ()
    tgen = time_generators(ocp.T, nv)
    path_support = _dedupe(ocp.X.inequalities + tgen + extra)
    measures: List[MeasureId] = [MeasureId("mu", "mu", full, (), path_support)]
    if ocp.control_mode == DISCRETE:
        for l in range(len(ocp.U)):
            measures.append(MeasureId(f"nu{l + 1}", "nu_discrete", full, (), path_support, channel=l))
    else:
        for j in range(ocp.m_controls):
            measures.append(MeasureId(f"nu+{j + 1}", "nu_plus", full, (), path_support, channel=j))
            measures.append(MeasureId(f"nu-{j + 1}", "nu_minus", full, (), path_support, channel=j))
    fixed: Dict[str, FixedMeasure] = {}

    def boundary(name, tag, bc: BoundaryCondition, time: float, free_time: bool):
        if free_time:
            if bc.kind == "dirac":
                fix = tuple((i + 1, v) for i, v in enumerate(bc.point))
                sup = tuple(g.restrict((0,), dict(fix)) for g in tgen)
                measures.append(MeasureId(name, tag, (0,), fix, _dedupe(sup)))
            elif bc.kind == "free":
                sup = _dedupe(bc.region.inequalities + tgen + extra)
                measures.append(MeasureId(name, tag, full, (), sup))
            else:
                raise NotImplementedError("uniform terminal distribution with free final time")
            return
        if bc.kind == "free":
            fix = ((0, time),)
            sup = _dedupe(tuple(a.restrict(states, {0: time}) for a in bc.region.inequalities + extra))
            measures.append(MeasureId(name, tag, states, fix, sup))
        elif fold_boundary:
            fixed[name] = FixedMeasure(name, tag, time, bc)
        else:
            # pinned mode: keep as an unknown and pin every moment later
            measures.append(MeasureId(name, tag, full, (), ()))
            fixed["pinned:" + name] = FixedMeasure(name, tag, time, bc)

    boundary("mu0", "mu0", ocp.initial, 0.0, False)
    boundary("muT", "muT", ocp.terminal, ocp.T, ocp.free_final_time)
    return measures, fixed


def _accumulate(mp: MomentProblem, terms: Dict[Key, float], name: str, p: Polynomial, sign: float) -> float:
    """Add ``sign * int p d(name)``; returns the amount moved to the rhs."""
    if p.is_zero():
        return 0.0
    if name in mp.fixed:
        return -sign * mp.fixed[name].integrate(p)
    meas = mp.measure(name)
    for k, c in meas.restrict(p).terms.items():
        key = (name, k)
        terms[key] = terms.get(key, 0.0) + sign * c
    return 0.0


def liouville_row(v: MultiIndex, ocp: ImpulsiveOCP, mp: MomentProblem) -> Row:
    """Weak Liouville identity for the test monomial ``z^v``."""
    nv = ocp.n_vars
    vp = Polynomial.monomial(v)
    grads = [vp.differentiate(i) for i in range(nv)]
    drift = grads[0]
    for i in range(ocp.n_states):
        if not grads[i + 1].is_zero():
            drift = drift + grads[i + 1] * ocp.f[i]
    terms: Dict[Key, float] = {}
    rhs = 0.0
    rhs += _accumulate(mp, terms, "muT", vp, +1.0)
    rhs += _accumulate(mp, terms, "mu0", vp, -1.0)
    rhs += _accumulate(mp, terms, "mu", drift, -1.0)
    jump = []
    for j in range(ocp.m_controls):
        g = Polynomial.zero(nv)
        for i in range(ocp.n_states):
            if not grads[i + 1].is_zero() and not ocp.G[i][j].is_zero():
                g = g + grads[i + 1] * ocp.G[i][j]
        jump.append(g)
    if ocp.control_mode == DISCRETE:
        for l, u in enumerate(ocp.U):
            g = Polynomial.zero(nv)
            for j, uj in enumerate(u):
                if uj != 0.0:
                    g = g + jump[j] * uj
            rhs += _accumulate(mp, terms, f"nu{l + 1}", g, -1.0)
    else:
        for j, g in enumerate(jump):
            rhs += _accumulate(mp, terms, f"nu+{j + 1}", g, -1.0)
            rhs += _accumulate(mp, terms, f"nu-{j + 1}", g, +1.0)
    terms = {k: c for k, c in terms.items() if c != 0.0}
    return Row(terms, rhs, sum(v), label=f"liouville{tuple(v)}")


def tv_rows(bound: float, m_controls: int, n_vars: int) -> list[Row]:
    """``sum_j mass(nu+_j) + mass(nu-_j) + s = bound`` with slack ``s >= 0``."""
    zero = (0,) * n_vars
    coeffs: Dict[Key, float] = {}
    for j in range(m_controls):
        coeffs[(f"nu+{j + 1}", zero)] = 1.0
        coeffs[(f"nu-{j + 1}", zero)] = 1.0
    coeffs[(SLACK_TV, ())] = 1.0
    return [Row(coeffs, float(bound), 0, label="total_variation")]


def discrete_control_rows(U: Sequence[Sequence[float]], ocp: ImpulsiveOCP, max_deg: int,
                          identity: str = "time") -> list[Row]:
    """Unit total probability: ``sum_l int w dnu_l = int w dmu``.

    ``identity="time"`` imposes it for ``w = t^a`` (equal time marginals);
    ``identity="full"`` for every monomial ``w(t, x)``, which is tighter.
    """
    if not U:
        raise ValueError("empty control set")
    if identity not in ("time", "full"):
        raise ValueError("identity must be 'time' or 'full'")
    nv = ocp.n_vars
    rows = []
    for w in enumerate_basis(nv, max_deg):
        if identity == "time" and any(w[1:]):
            continue
        coeffs = {(f"nu{l + 1}", w): 1.0 for l in range(len(U))}
        coeffs[("mu", w)] = -1.0
        rows.append(Row(coeffs, 0.0, sum(w), label=f"probability{w}"))
    return rows


def build(ocp: ImpulsiveOCP, max_degree: int, fold_boundary: bool = True,
          discrete_identity: str = "time") -> MomentProblem:
    """Measure roster, Liouville rows for all test monomials up to ``max_degree``, cost."""
    diags = model.errors(model.validate(ocp))
    if diags:
        raise ValueError("; ".join(str(d) for d in diags))
    nv = ocp.n_vars
    measures, fixed = _roster(ocp, fold_boundary)
    pinned = {k.split(":", 1)[1]: v for k, v in fixed.items() if k.startswith("pinned:")}
    fixed = {k: v for k, v in fixed.items() if not k.startswith("pinned:")}
    mp = MomentProblem(ocp, measures, fixed, max_degree=max_degree)
    for v in enumerate_basis(nv, max_degree):
        row = liouville_row(v, ocp, mp)
        # the v = 1 row is kept even when folding leaves it as 0 = 0
        if row.coeffs or abs(row.rhs) > 0 or not any(v):
            mp.rows.append(row)
    if ocp.control_mode == DISCRETE:
        mp.rows.extend(discrete_control_rows(ocp.U, ocp, max_degree, discrete_identity))
    elif ocp.tv_bound is not None:
        mp.rows.extend(tv_rows(ocp.tv_bound, ocp.m_controls, nv))
        mp.slacks.append(SLACK_TV)
    for name, fm in pinned.items():
        meas = mp.measure(name)
        for k in enumerate_basis(meas.n_vars, max_degree):
            mp.rows.append(Row({(name, k): 1.0}, fm.integrate(Polynomial.monomial(k)), sum(k), label=f"pin:{name}{k}"))
    mu0 = [m for m in mp.measures if m.name == "mu0"]
    if mu0 and "mu0" not in pinned:
        mp.rows.append(Row({("mu0", (0,) * mu0[0].n_vars): 1.0}, 1.0, 0, label="initial_mass"))
    _cost(mp)
    return mp


def _cost(mp: MomentProblem):
    ocp = mp.ocp
    cost: Dict[Key, float] = {}
    offset = 0.0
    offset += _accumulate(mp, cost, "mu", ocp.h, +1.0)
    if ocp.control_mode == DISCRETE:
        for l, u in enumerate(ocp.U):
            g = Polynomial.zero(ocp.n_vars)
            for j, uj in enumerate(u):
                g = g + ocp.H[j] * uj + ocp.abs_cost[j] * abs(uj)
            offset += _accumulate(mp, cost, f"nu{l + 1}", g, +1.0)
    else:
        for j in range(ocp.m_controls):
            offset += _accumulate(mp, cost, f"nu+{j + 1}", ocp.H[j] + ocp.abs_cost[j], +1.0)
            offset += _accumulate(mp, cost, f"nu-{j + 1}", ocp.abs_cost[j] - ocp.H[j], +1.0)
    offset += _accumulate(mp, cost, "muT", ocp.h_T, +1.0)
    # _accumulate returns rhs contributions (negated); the cost wants +value
    mp.cost = {k: c for k, c in cost.items() if c != 0.0}
    mp.cost_offset = -offset
