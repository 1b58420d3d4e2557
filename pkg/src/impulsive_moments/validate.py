"""A posteriori checks: simulation, occupation moments, gaps, rendezvous LP."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import nnls

from . import sdp
from .extract import ImpulsePlan
from .model import DISCRETE, ImpulsiveOCP
from .poly import Polynomial, enumerate_basis
from .transcribe import MomentProblem, MomentVector

log = logging.getLogger(__name__)


class _PolyBank:
    """Fast repeated evaluation of a fixed list of polynomials at one point."""

    def __init__(self, polys: Sequence[Polynomial], n_vars: int):
        keys = sorted({k for p in polys for k in p.terms}) or [(0,) * n_vars]
        self.E = np.array(keys, dtype=float).reshape(len(keys), n_vars)
        self.C = np.zeros((len(polys), len(keys)))
        col = {k: i for i, k in enumerate(keys)}
        for r, p in enumerate(polys):
            for k, c in p.terms.items():
                self.C[r, col[k]] = c

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.C @ np.prod(z ** self.E, axis=1)


def _monomial_values(E: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.prod(z ** E, axis=1)


@dataclass
class Trajectory:
    grid: np.ndarray
    states: np.ndarray
    jumps: List[Tuple[float, np.ndarray]]
    cost: float
    violation: float = 0.0
    terminal_error: float = 0.0
    steps: int = 0
    horizon: float = 0.0
    moments: Dict[str, MomentVector] = field(default_factory=dict)
    moment_degree: int = -1

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def feasible(self, tol: float = 1e-5) -> bool:
        return self.violation <= tol and self.terminal_error <= tol

    def to_csv(self) -> str:
        n = self.states.shape[1]
        lines = ["t," + ",".join(f"x{i + 1}" for i in range(n))]
        for t, x in zip(self.grid, self.states):
            lines.append(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in x))
        return "\n".join(lines) + "\n"


def _control_at(plan: ImpulsePlan, t: float, m: int) -> np.ndarray:
    for a, b, u in plan.segments:
        if a <= t < b:
            return np.asarray(u, float)
    return np.zeros(m)


def _probabilities(U: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Weights ``p >= 0``, ``sum p = 1``, ``U' p = u`` (least squares)."""
    A = np.vstack([U.T, np.ones(len(U))])
    p, _ = nnls(A, np.append(u, 1.0))
    return p


class _Integrand:
    """Right-hand side of the augmented system ``(x, cost, moments)``."""

    def __init__(self, ocp: ImpulsiveOCP, plan: ImpulsePlan, degree: int):
        self.ocp = ocp
        nv = ocp.n_vars
        self.nx, self.m = ocp.n_states, ocp.m_controls
        self.f = _PolyBank(ocp.f, nv)
        self.G = _PolyBank([g for row in ocp.G for g in row], nv)
        self.h = _PolyBank([ocp.h], nv)
        self.H = _PolyBank(list(ocp.H) + list(ocp.abs_cost), nv)
        self.degree = degree
        self.E = np.array(enumerate_basis(nv, degree), float) if degree >= 0 else np.zeros((0, nv))
        self.K = len(self.E)
        self.discrete = ocp.control_mode == DISCRETE
        self.U = np.array(ocp.U, float).reshape(-1, self.m) if self.discrete else None
        # moment blocks: mu, then per channel nu+ and nu- (or per value nu_l)
        self.n_meas = 1 + (len(self.U) if self.discrete else 2 * self.m)
        self.plan = plan

    def size(self) -> int:
        return self.nx + 1 + self.n_meas * self.K

    def __call__(self, t: float, w: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = w[: self.nx]
        z = np.concatenate([[t], x])
        G = self.G(z).reshape(self.nx, self.m)
        out = np.zeros_like(w)
        out[: self.nx] = self.f(z) + G @ u
        Hv = self.H(z)
        out[self.nx] = self.h(z)[0] + Hv[: self.m] @ u + Hv[self.m:] @ np.abs(u)
        if self.K:
            mono = _monomial_values(self.E, z)
            o = self.nx + 1
            out[o: o + self.K] = mono
            if self.discrete:
                p = _probabilities(self.U, u)
                for l in range(len(self.U)):
                    s = o + (1 + l) * self.K
                    out[s: s + self.K] = p[l] * mono
            else:
                for j in range(self.m):
                    s = o + (1 + 2 * j) * self.K
                    out[s: s + self.K] = max(u[j], 0.0) * mono
                    out[s + self.K: s + 2 * self.K] = max(-u[j], 0.0) * mono
        return out


def _rk4(rhs, t0, t1, w, u, n):
    h = (t1 - t0) / n
    ts, ws = [t0], [w.copy()]
    t = t0
    for _ in range(n):
        k1 = rhs(t, w, u)
        k2 = rhs(t + h / 2, w + h / 2 * k1, u)
        k3 = rhs(t + h / 2, w + h / 2 * k2, u)
        k4 = rhs(t + h, w + h * k3, u)
        w = w + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        ts.append(t)
        ws.append(w.copy())
    ts[-1] = t1
    return ts, ws


def _initial_state(ocp: ImpulsiveOCP, x0):
    if x0 is not None:
        return np.asarray(x0, float)
    if ocp.initial.kind != "dirac":
        raise ValueError("simulation needs a dirac initial state or an explicit x0")
    return np.asarray(ocp.initial.point, float)


def _simulate_once(ocp, plan, steps, horizon, x0, degree):
    T = horizon
    rhs = _Integrand(ocp, plan, degree)
    nx, m = ocp.n_states, ocp.m_controls
    jumps = plan.jumps()
    for t, _ in jumps:
        if t < -1e-9 or t > T + 1e-9:
            raise ValueError(f"impulse time {t} outside [0, {T}]")
    breaks = {0.0, T}
    breaks.update(min(max(t, 0.0), T) for t, _ in jumps)
    for a, b, _ in plan.segments:
        breaks.update((min(max(a, 0.0), T), min(max(b, 0.0), T)))
    breaks = sorted(breaks)
    jump_at: Dict[float, np.ndarray] = {}
    for t, u in jumps:
        key = min(breaks, key=lambda b: abs(b - min(max(t, 0.0), T)))
        jump_at[key] = jump_at.get(key, np.zeros(m)) + u
    w = np.zeros(rhs.size())
    w[:nx] = x0
    grid, states, applied = [], [], []
    nv = ocp.n_vars
    gl_nodes, gl_weights = np.polynomial.legendre.leggauss(max(degree, 2) // 2 + 2)
    gl_nodes, gl_weights = 0.5 * (gl_nodes + 1.0), 0.5 * gl_weights
    Gb = _PolyBank([g for row in ocp.G for g in row], nv)
    Hb = _PolyBank(list(ocp.H) + list(ocp.abs_cost), nv)
    jump_moments = np.zeros(rhs.n_meas * rhs.K)

    def apply_jump(t, w):
        u = jump_at[t]
        x = w[:nx]
        z = np.concatenate([[t], x])
        dx = Gb(z).reshape(nx, m) @ u
        # cost and moments use the segment-uniform kernel along [x-, x+]
        pts = [np.concatenate([[t], x + s * dx]) for s in gl_nodes]
        Havg = sum(wt * Hb(p) for wt, p in zip(gl_weights, pts))
        w = w.copy()
        w[nx] += Havg[:m] @ u + Havg[m:] @ np.abs(u)
        if rhs.K:
            avg = sum(wt * _monomial_values(rhs.E, p) for wt, p in zip(gl_weights, pts))
            for j in range(m):
                s = (1 + 2 * j) * rhs.K
                jump_moments[s: s + rhs.K] += max(u[j], 0.0) * avg
                jump_moments[s + rhs.K: s + 2 * rhs.K] += max(-u[j], 0.0) * avg
        w[:nx] = x + dx
        applied.append((t, dx))
        return w

    for i, (a, b) in enumerate(zip(breaks[:-1], breaks[1:])):
        if a in jump_at:
            grid.append(a)
            states.append(w[:nx].copy())
            w = apply_jump(a, w)
        n = max(1, int(round(steps * (b - a) / T)))
        u = _control_at(plan, 0.5 * (a + b), m)
        ts, ws = _rk4(rhs, a, b, w, u, n)
        grid.extend(ts)
        states.extend(x[:nx].copy() for x in ws)
        w = ws[-1]
    if T in jump_at:
        w = apply_jump(T, w)
        grid.append(T)
        states.append(w[:nx].copy())
    grid = np.array(grid)
    states = np.array(states)
    viol = 0.0
    for t, x in zip(grid, states):
        viol = max(viol, ocp.X.violation(np.concatenate([[t], x])))
    cost = w[nx] + ocp.h_T(np.concatenate([[T], w[:nx]]))
    term = 0.0
    if ocp.terminal.kind == "dirac":
        term = float(np.max(np.abs(w[:nx] - np.asarray(ocp.terminal.point))))
    elif ocp.terminal.kind == "free":
        term = ocp.terminal.region.violation(np.concatenate([[T], w[:nx]]))
    traj = Trajectory(grid, states, applied, float(cost), float(viol), term, steps, T)
    if degree >= 0:
        traj.moment_degree = degree
        traj.moments = _collect_moments(ocp, rhs, w[nx + 1:] + jump_moments, x0, w[:nx], T, degree)
    return traj


def _collect_moments(ocp, rhs, flat, x0, xT, T, degree):
    nv = ocp.n_vars
    keys = [tuple(int(e) for e in k) for k in rhs.E]
    blocks = flat.reshape(rhs.n_meas, rhs.K)
    if ocp.control_mode == DISCRETE:
        names = ["mu"] + [f"nu{l + 1}" for l in range(len(ocp.U))]
    else:
        names = ["mu"] + [n for j in range(ocp.m_controls) for n in (f"nu+{j + 1}", f"nu-{j + 1}")]
    out = {n: MomentVector(n, nv, dict(zip(keys, blk))) for n, blk in zip(names, blocks)}
    for name, t, x in (("mu0", 0.0, x0), ("muT", T, xT)):
        z = np.concatenate([[t], x])
        out[name] = MomentVector(name, nv, dict(zip(keys, _monomial_values(rhs.E, z))))
    return out


def simulate(ocp: ImpulsiveOCP, plan: ImpulsePlan, steps: int = 1000, horizon: float | None = None,
             x0=None, tol: float = 1e-8, max_doublings: int = 6, moment_degree: int = -1) -> Trajectory:
    """Integrate the measure-driven dynamics under ``plan`` with fixed-step RK4.

    Impulses are applied algebraically; the step count is doubled until the
    cost changes by less than ``tol``.
    """
    if plan.m_controls != ocp.m_controls:
        raise ValueError("plan and problem disagree on the number of controls")
    T = ocp.T if horizon is None else float(horizon)
    start = _initial_state(ocp, x0)
    traj = _simulate_once(ocp, plan, steps, T, start, moment_degree)
    for _ in range(max_doublings):
        steps *= 2
        finer = _simulate_once(ocp, plan, steps, T, start, moment_degree)
        done = abs(finer.cost - traj.cost) < tol
        traj = finer
        if done:
            break
    return traj


def occupation_moments(traj_or_args, max_deg: int, ocp: ImpulsiveOCP | None = None,
                       plan: ImpulsePlan | None = None) -> Dict[str, MomentVector]:
    """Moments of ``mu``, the control measures, ``mu0`` and ``muT`` along a trajectory.

    Either pass a trajectory already simulated with ``moment_degree >= max_deg``
    or pass ``ocp`` and ``plan`` to resimulate.
    """
    traj = traj_or_args
    if traj is not None and traj.moment_degree >= max_deg:
        return traj.moments
    if ocp is None or plan is None:
        raise ValueError("trajectory lacks moments of that degree; pass ocp and plan")
    steps = traj.steps if traj is not None else 1000
    horizon = traj.horizon if traj is not None else None
    return simulate(ocp, plan, steps, horizon=horizon, moment_degree=max_deg, max_doublings=0).moments


def project_moments(full: Dict[str, MomentVector], mp: MomentProblem) -> Dict[str, MomentVector]:
    """Re-key full ``(t, x)`` moments onto each unknown measure's own variables."""
    out = {}
    for meas in mp.measures:
        src = full[meas.name]
        vals = {}
        for k in enumerate_basis(meas.n_vars, mp.max_degree):
            e = [0] * src.n_vars
            for pos, v in zip(meas.variables, k):
                e[pos] = v
            e = tuple(e)
            if e in src.values:
                vals[k] = src.values[e]
        out[meas.name] = MomentVector(meas.name, meas.n_vars, vals)
    return out


def liouville_residuals(mp: MomentProblem, moments: Dict[str, MomentVector]) -> np.ndarray:
    proj = project_moments(moments, mp)
    res = []
    for row in mp.rows:
        try:
            res.append(row.evaluate(proj))
        except KeyError:
            continue
    return np.array(res)


@dataclass
class GapReport:
    lower_bound: float
    cost: float
    gap: float
    relative_gap: float
    verdict: str

    def to_dict(self) -> dict:
        return dict(lower_bound=self.lower_bound, cost=self.cost, gap=self.gap,
                    relative_gap=self.relative_gap, verdict=self.verdict)


def certify(result, traj: Trajectory, eps: float = 1e-4, feas_tol: float = 1e-5) -> GapReport:
    """Compare a relaxation bound with the cost of a simulated feasible trajectory."""
    if not traj.feasible(feas_tol):
        raise ValueError(
            f"trajectory infeasible: state violation {traj.violation:.3g}, "
            f"terminal error {traj.terminal_error:.3g}")
    lb = float(result.bound)
    gap = traj.cost - lb
    rel = gap / max(1.0, abs(traj.cost))
    if gap < -1e-6:
        verdict = "bound exceeds simulated cost (numerical trouble)"
    elif gap <= eps:
        verdict = f"globally optimal within {eps:g}"
    else:
        verdict = f"gap {gap:.6g} above {eps:g}"
    return GapReport(lb, traj.cost, gap, rel, verdict)


# --- rendezvous ----------------------------------------------------------------

HCW_A = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 2], [0, 3, -2, 0]], dtype=float)
HCW_B = np.vstack([np.zeros((2, 2)), np.eye(2)])


@dataclass
class HcwModel:
    x0: np.ndarray
    xf: np.ndarray
    theta_f: float = 2 * np.pi
    theta_1: float = 0.0
    A: np.ndarray = field(default_factory=lambda: HCW_A.copy())
    B: np.ndarray = field(default_factory=lambda: HCW_B.copy())

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        self.xf = np.asarray(self.xf, float)


def hcw_transition(theta_b: float, theta_a: float) -> np.ndarray:
    """``Phi(theta_b, theta_a) = expm(A (theta_b - theta_a))``."""
    if theta_b < theta_a:
        raise ValueError("transition needs theta_b >= theta_a")
    return sla.expm(HCW_A * (theta_b - theta_a))


@dataclass
class RendezvousLP:
    status: str
    cost: float
    grid: np.ndarray
    impulses: np.ndarray
    nonzero: List[Tuple[float, np.ndarray]]


def solve_rendezvous_lp(model: HcwModel, N: int = 50, prune: float = 1e-6,
                        opts: sdp.SolverOptions | None = None) -> RendezvousLP:
    """Fixed-grid minimum one-norm impulse LP, solved with the in-house IPM."""
    if N < 2:
        raise ValueError("grid needs at least two nodes")
    grid = np.linspace(model.theta_1, model.theta_f, N)
    m = model.B.shape[1]
    cols = [sla.expm(model.A * (model.theta_f - th)) @ model.B for th in grid]
    M = np.hstack(cols)
    rhs = model.xf - sla.expm(model.A * (model.theta_f - model.theta_1)) @ model.x0
    n = 2 * N * m
    Aeq = sp.csr_matrix(np.hstack([M, -M]))
    res = sdp.solve_standard(np.ones(n), Aeq, rhs, sp.identity(n, format="csr"), np.zeros(n),
                             [], [], [], opts)
    if res.status not in (sdp.OPTIMAL, sdp.INACCURATE):
        return RendezvousLP(res.status, float("nan"), grid, np.zeros((N, m)), [])
    u = (res.x[: N * m] - res.x[N * m:]).reshape(N, m)
    u[np.abs(u) < prune] = 0.0
    nz = [(float(th), u[i].copy()) for i, th in enumerate(grid) if np.any(u[i] != 0.0)]
    return RendezvousLP(res.status, float(res.objective), grid, u, nz)


def hcw_samples(model: HcwModel, impulses: Sequence[Tuple[float, np.ndarray]], n: int = 400) -> np.ndarray:
    """Closed-form trajectory samples ``[theta, x1..x4]`` under impulses."""
    out = []
    for th in np.linspace(model.theta_1, model.theta_f, n):
        x = hcw_transition(th, model.theta_1) @ model.x0
        for tj, uj in impulses:
            if tj <= th:
                x = x + hcw_transition(th, tj) @ model.B @ np.asarray(uj, float)
        out.append(np.concatenate([[th], x]))
    return np.array(out)
