"""Impulsive optimal control problem description, validation and scaling.

All polynomials live in the joint ``(t, x_1, ..., x_n)`` space.  Controls are
never polynomial variables: they enter only through the control matrix ``G``
(signed measures) or a finite list of control values (discrete mode).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .poly import Polynomial

SIGNED = "signed_measure"
DISCRETE = "discrete_set"


@dataclass(frozen=True)
class SemialgebraicSet:
    """``{z : a_i(z) >= 0 for all i}`` in the joint time-state space."""

    n_vars: int
    inequalities: Tuple[Polynomial, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inequalities", tuple(self.inequalities))
        for a in self.inequalities:
            if a.n_vars != self.n_vars:
                raise ValueError("inequality lives in a different variable space")

    def contains(self, point, tol: float = 1e-9) -> bool:
        return self.violation(point) <= tol

    def violation(self, point) -> float:
        return max((max(0.0, -a(point)) for a in self.inequalities), default=0.0)


@dataclass(frozen=True)
class BoundaryCondition:
    """Initial or terminal condition.

    ``kind`` is ``"dirac"`` (``point``), ``"uniform_box"`` (``lo``, ``hi``) or
    ``"free"`` (``region``: a set the unknown boundary measure lives on).
    """

    kind: str
    point: Optional[Tuple[float, ...]] = None
    lo: Optional[Tuple[float, ...]] = None
    hi: Optional[Tuple[float, ...]] = None
    region: Optional[SemialgebraicSet] = None

    @classmethod
    def dirac(cls, point):
        return cls("dirac", point=tuple(float(v) for v in point))

    @classmethod
    def uniform_box(cls, lo, hi):
        return cls("uniform_box", lo=tuple(float(v) for v in lo), hi=tuple(float(v) for v in hi))

    @classmethod
    def free(cls, region: SemialgebraicSet):
        return cls("free", region=region)


@dataclass(frozen=True)
class ImpulsiveOCP:
    """Measure-control problem

    ``min  int h dt + int H dw + int abs_cost d|w| + h_T(x(T))``
    ``s.t. dx = f dt + G dw,  x(t) in X,  boundary conditions``.
    """

    n_states: int
    m_controls: int
    T: float
    f: Tuple[Polynomial, ...]
    G: Tuple[Tuple[Polynomial, ...], ...]
    h: Polynomial
    H: Tuple[Polynomial, ...]
    h_T: Polynomial
    X: SemialgebraicSet
    initial: BoundaryCondition
    terminal: BoundaryCondition
    abs_cost: Tuple[Polynomial, ...] = ()
    tv_bound: Optional[float] = None
    control_mode: str = SIGNED
    U: Tuple[Tuple[float, ...], ...] = ()
    free_final_time: bool = False
    state_ranges: Optional[Tuple[Tuple[float, float], ...]] = None
    state_names: Tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        nv = self.n_vars
        if not self.abs_cost:
            object.__setattr__(self, "abs_cost", tuple(Polynomial.zero(nv) for _ in range(self.m_controls)))
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i + 1}" for i in range(self.n_states)))
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "G", tuple(tuple(row) for row in self.G))
        object.__setattr__(self, "H", tuple(self.H))
        object.__setattr__(self, "U", tuple(tuple(float(v) for v in u) for u in self.U))

    @property
    def n_vars(self) -> int:
        return self.n_states + 1

    def polynomials(self):
        yield from self.f
        for row in self.G:
            yield from row
        yield self.h
        yield from self.H
        yield from self.abs_cost
        yield self.h_T
        yield from self.X.inequalities
        for bc in (self.initial, self.terminal):
            if bc.kind == "free":
                yield from bc.region.inequalities


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    message: str

    def __str__(self):
        return f"{self.level}: {self.message}"


def validate(ocp: ImpulsiveOCP) -> list[Diagnostic]:
    """Structural checks; returns diagnostics rather than raising."""
    out: list[Diagnostic] = []
    err = lambda m: out.append(Diagnostic("error", m))
    warn = lambda m: out.append(Diagnostic("warning", m))
    nv = ocp.n_vars
    if ocp.T <= 0:
        err("horizon must be positive")
    if len(ocp.f) != ocp.n_states:
        err("dynamics must have one polynomial per state")
    if len(ocp.G) != ocp.n_states or any(len(r) != ocp.m_controls for r in ocp.G):
        err("control matrix must be n_states x m_controls")
    if len(ocp.H) != ocp.m_controls or len(ocp.abs_cost) != ocp.m_controls:
        err("control cost must have one entry per channel")
    try:
        polys = list(ocp.polynomials())
    except Exception as exc:  # malformed boundary data
        err(f"malformed problem: {exc}")
        return out
    if any(p.n_vars != nv for p in polys):
        err("all polynomials must share the (t, x) variable space")
        return out
    state_dep = lambda p: any(p.depends_on(v) for v in range(1, nv))
    if any(state_dep(g) for row in ocp.G for g in row):
        err("control matrix depends on state")
    if any(state_dep(p) for p in ocp.H) or any(state_dep(p) for p in ocp.abs_cost):
        err("control cost depends on state")
    if not ocp.X.inequalities:
        err("state set must be described")
    if ocp.control_mode == DISCRETE:
        if not ocp.U:
            err("discrete control set is empty")
        if any(len(u) != ocp.m_controls for u in ocp.U):
            err("control values must have one entry per channel")
        if ocp.tv_bound is not None:
            err("total variation bound is not available with a discrete control set")
    elif ocp.control_mode != SIGNED:
        err(f"unknown control mode {ocp.control_mode!r}")
    if ocp.tv_bound is not None and ocp.tv_bound < 0:
        err("total variation bound must be nonnegative")
    for label, bc, t0 in (("initial", ocp.initial, 0.0), ("terminal", ocp.terminal, ocp.T)):
        if bc.kind == "dirac":
            if bc.point is None or len(bc.point) != ocp.n_states:
                err(f"{label} point has wrong dimension")
                continue
            z = (t0,) + tuple(bc.point)
            if ocp.X.violation(z) > 1e-9 and not (label == "terminal" and ocp.free_final_time):
                err(f"{label} point violates the state constraints")
        elif bc.kind == "uniform_box":
            lo, hi = np.asarray(bc.lo, float), np.asarray(bc.hi, float)
            if lo.shape != (ocp.n_states,) or hi.shape != (ocp.n_states,):
                err(f"{label} box has wrong dimension")
            elif np.any(hi <= lo):
                err(f"{label} box is degenerate")
        elif bc.kind == "free":
            if bc.region is None or not bc.region.inequalities:
                err(f"free {label} state needs a described set")
        else:
            err(f"unknown {label} boundary kind {bc.kind!r}")
    if ocp.state_ranges is not None:
        if len(ocp.state_ranges) != ocp.n_states or any(hi <= lo for lo, hi in ocp.state_ranges):
            err("state ranges must be nondegenerate, one per state")
    if not out or all(d.level == "warning" for d in out):
        if _bounding_ranges(ocp.X, ocp.n_states) is None:
            warn("no ball-type constraint bounds X; the relaxation relies on the declared state ranges")
    return out


def errors(diags) -> list[Diagnostic]:
    return [d for d in diags if d.level == "error"]


def _bounding_ranges(X: SemialgebraicSet, n_states: int):
    """Ranges implied by univariate concave quadratics or a centred ball."""
    ranges: list[Optional[Tuple[float, float]]] = [None] * n_states
    for a in X.inequalities:
        if a.depends_on(0) or a.degree != 2:
            continue
        used = [v for v in range(1, n_states + 1) if a.depends_on(v)]
        if len(used) == 1:
            v = used[0]
            k2 = [0] * (n_states + 1)
            k2[v] = 2
            k1 = [0] * (n_states + 1)
            k1[v] = 1
            q = a.coefficient(k2)
            l = a.coefficient(k1)
            c0 = a.coefficient([0] * (n_states + 1))
            if q >= 0:
                continue
            disc = l * l - 4 * q * c0
            if disc <= 0:
                continue
            r1 = (-l + math.sqrt(disc)) / (2 * q)
            r2 = (-l - math.sqrt(disc)) / (2 * q)
            lo, hi = min(r1, r2), max(r1, r2)
            ranges[v - 1] = _intersect(ranges[v - 1], (lo, hi))
        elif len(used) == n_states and n_states > 1:
            # r^2 - sum x_i^2 with identical unit curvature and no cross terms
            quad = []
            ok = True
            for k, c in a.terms.items():
                if sum(k) == 2:
                    if max(k) != 2:
                        ok = False
                    quad.append(c)
                elif sum(k) == 1:
                    ok = False
            if ok and len(quad) == n_states and np.allclose(quad, quad[0]) and quad[0] < 0:
                r2 = a.coefficient([0] * (n_states + 1)) / -quad[0]
                if r2 > 0:
                    r = math.sqrt(r2)
                    for i in range(n_states):
                        ranges[i] = _intersect(ranges[i], (-r, r))
    if any(r is None for r in ranges):
        return None
    return tuple(ranges)


def _intersect(a, b):
    if a is None:
        return b
    return (max(a[0], b[0]), min(a[1], b[1]))


@dataclass(frozen=True)
class ScalingMap:
    """Affine change of variables ``t = T s``, ``x_i = c_i + r_i xs_i``.

    ``T`` is the horizon (``T_max`` for free final time), so internal time
    lives on ``[0, 1]`` and declared state ranges map onto ``[-1, 1]``.
    """

    T: float
    center: Tuple[float, ...]
    half_range: Tuple[float, ...]

    @property
    def n_vars(self):
        return len(self.center) + 1

    # points -------------------------------------------------------------
    def to_scaled(self, t, x):
        return t / self.T, (np.asarray(x, float) - self.center) / np.asarray(self.half_range)

    def to_native(self, s, xs):
        return s * self.T, np.asarray(self.center) + np.asarray(self.half_range) * np.asarray(xs, float)

    def time_to_native(self, s):
        return np.asarray(s, float) * self.T

    # polynomials --------------------------------------------------------
    def poly_to_scaled(self, p: Polynomial) -> Polynomial:
        """``p o phi`` where ``phi`` maps scaled coordinates to native ones."""
        return p.affine_substitute((0.0,) + tuple(self.center), (self.T,) + tuple(self.half_range))

    def poly_to_native(self, q: Polynomial) -> Polynomial:
        off = (0.0,) + tuple(-c / r for c, r in zip(self.center, self.half_range))
        scl = (1.0 / self.T,) + tuple(1.0 / r for r in self.half_range)
        return q.affine_substitute(off, scl)


def state_ranges(ocp: ImpulsiveOCP):
    if ocp.state_ranges is not None:
        return tuple(ocp.state_ranges)
    return _bounding_ranges(ocp.X, ocp.n_states)


def scaling_for(ocp: ImpulsiveOCP) -> ScalingMap:
    ranges = state_ranges(ocp)
    if ranges is None:
        raise ValueError("cannot scale: state ranges unavailable (declare ranges or a box/ball constraint)")
    center = tuple(0.5 * (lo + hi) for lo, hi in ranges)
    half = tuple(0.5 * (hi - lo) for lo, hi in ranges)
    return ScalingMap(float(ocp.T), center, half)


def _map_problem(ocp: ImpulsiveOCP, smap: ScalingMap, forward: bool) -> ImpulsiveOCP:
    """Shared body of ``scale`` and ``unscale``."""
    T = smap.T
    r = np.asarray(smap.half_range, float)
    c = np.asarray(smap.center, float)
    sub = smap.poly_to_scaled if forward else smap.poly_to_native
    tf = T if forward else 1.0 / T
    rf = (1.0 / r) if forward else r
    # discrete-mode control measures are probabilities in time, so they pick
    # up the time factor; impulse amplitudes do not
    gt = tf if ocp.control_mode == DISCRETE else 1.0
    f = tuple(sub(fi) * (tf * rf[i]) for i, fi in enumerate(ocp.f))
    G = tuple(tuple(sub(g) * (gt * rf[i]) for g in row) for i, row in enumerate(ocp.G))
    h = sub(ocp.h) * tf
    H = tuple(sub(p) * gt for p in ocp.H)
    abs_cost = tuple(sub(p) * gt for p in ocp.abs_cost)
    h_T = sub(ocp.h_T)
    X = SemialgebraicSet(ocp.n_vars, tuple(sub(a) for a in ocp.X.inequalities))

    def point(p):
        p = np.asarray(p, float)
        return tuple((p - c) / r) if forward else tuple(c + r * p)

    def bc_map(bc: BoundaryCondition):
        if bc.kind == "dirac":
            return BoundaryCondition.dirac(point(bc.point))
        if bc.kind == "uniform_box":
            return BoundaryCondition.uniform_box(point(bc.lo), point(bc.hi))
        return BoundaryCondition.free(SemialgebraicSet(ocp.n_vars, tuple(sub(a) for a in bc.region.inequalities)))

    if forward:
        ranges = tuple((-1.0, 1.0) for _ in range(ocp.n_states))
    else:
        ranges = tuple((ci - ri, ci + ri) for ci, ri in zip(c, r))
    return replace(
        ocp, T=1.0 if forward else T, f=f, G=G, h=h, H=H, abs_cost=abs_cost, h_T=h_T, X=X,
        initial=bc_map(ocp.initial), terminal=bc_map(ocp.terminal), state_ranges=ranges,
    )


def scale(ocp: ImpulsiveOCP, smap: ScalingMap | None = None) -> tuple[ImpulsiveOCP, ScalingMap]:
    """Map the problem onto ``t in [0, 1]``, ``x in [-1, 1]^n``."""
    smap = smap or scaling_for(ocp)
    return _map_problem(ocp, smap, forward=True), smap


def unscale(scaled: ImpulsiveOCP, smap: ScalingMap) -> ImpulsiveOCP:
    return _map_problem(scaled, smap, forward=False)
