"""Primal-dual interior-point solver for the truncated moment programs.

The solver works on the homogeneous self-dual embedding of

    minimize    c'x
    subject to  A x = b
                s = f0 + F x,   s in K

where ``K`` is a product of a nonnegative orthant and PSD cones (stored as
full row-major ``vec`` of the symmetric slack).  Internally the program is
written as ``G x + s = h`` with ``G = -F`` and ``h = f0``; the dual is

    maximize    -h'z - b'y
    subject to  G'z + A'y + c = 0,   z in K.

Directions use Nesterov-Todd scaling and a Mehrotra predictor-corrector.
The embedding makes infeasibility and unboundedness show up as
certificates instead of divergence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"
INACCURATE = "inaccurate"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class SolverOptions:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iters: int = 200
    tau_kappa_ratio_threshold: float = 1e6
    inaccurate_tol: float = 1e-5
    step_fraction: float = 0.99
    refinement_steps: int = 4
    stall_iters: int = 10
    verbose: bool = False

    def __post_init__(self):
        for name in ("tol_feas", "tol_gap", "max_iters", "tau_kappa_ratio_threshold", "stall_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveResult:
    status: str
    objective: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    dual_objective: float
    iterations: int
    residuals: dict
    certificate: Optional[dict] = None
    history: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, INACCURATE)


class ConeLayout:
    """Offsets of a nonnegative orthant followed by PSD blocks in a flat vector."""

    def __init__(self, n_nonneg: int, sides: Sequence[int]):
        self.nl = int(n_nonneg)
        self.sides = [int(s) for s in sides]
        self.offsets = []
        off = self.nl
        for s in self.sides:
            self.offsets.append(off)
            off += s * s
        self.dim = off
        self.degree = self.nl + sum(self.sides)

    def blocks(self, v):
        for off, s in zip(self.offsets, self.sides):
            yield v[off:off + s * s].reshape(s, s)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[:self.nl] = 1.0
        for blk in self.blocks(e):
            np.fill_diagonal(blk, 1.0)
        return e


class _Scaling:
    """Nesterov-Todd scaling ``W`` plus the scaled point ``lambda``.

    For a PSD block ``W(z) = R' z R`` and ``W^{-T}(s) = R^{-1} s R^{-T}``;
    both equal ``diag(lam)``.  For the orthant ``R`` is the vector ``w``.
    """

    def __init__(self, cones: ConeLayout):
        self.cones = cones
        self.w = np.ones(cones.nl)
        self.lam_l = np.ones(cones.nl)
        self.R = [np.eye(s) for s in cones.sides]
        self.Rinv = [np.eye(s) for s in cones.sides]
        self.lam = [np.ones(s) for s in cones.sides]

    # scaled-space helpers (vectors laid out like s and z) ------------------
    def lam_vec(self) -> np.ndarray:
        v = np.zeros(self.cones.dim)
        v[:self.cones.nl] = self.lam_l
        for blk, lam in zip(self.cones.blocks(v), self.lam):
            np.fill_diagonal(blk, lam)
        return v

    def apply(self, v, kind):
        """Apply one of the scaling maps blockwise.

        kind: 'W' (z-space -> scaled), 'WinvT' (s-space -> scaled),
        'WT' (scaled -> s-space), 'Winv' (scaled -> z-space),
        'WTWinv' ((W'W)^{-1}: s-space -> z-space), 'WTW' (z-space -> s-space).
        """
        out = np.empty_like(v)
        nl = self.cones.nl
        w = self.w
        if kind == "W" or kind == "WT":
            out[:nl] = v[:nl] * w
        elif kind == "WinvT" or kind == "Winv":
            out[:nl] = v[:nl] / w
        elif kind == "WTWinv":
            out[:nl] = v[:nl] / (w * w)
        elif kind == "WTW":
            out[:nl] = v[:nl] * (w * w)
        else:
            raise ValueError(kind)
        for k, (blk_in, blk_out) in enumerate(zip(self.cones.blocks(v), self.cones.blocks(out))):
            R, Ri = self.R[k], self.Rinv[k]
            if kind == "W":
                m = R.T @ blk_in @ R
            elif kind == "WinvT":
                m = Ri @ blk_in @ Ri.T
            elif kind == "WT":
                m = R @ blk_in @ R.T
            elif kind == "Winv":
                m = Ri.T @ blk_in @ Ri
            elif kind == "WTWinv":
                Wi = Ri.T @ Ri
                m = Wi @ blk_in @ Wi
            else:
                Wm = R @ R.T
                m = Wm @ blk_in @ Wm
            blk_out[...] = 0.5 * (m + m.T)
        return out

    def lam_inv_product(self, r):
        """Solve ``lam o u = r`` for ``u`` (Jordan product, lam diagonal)."""
        out = np.empty_like(r)
        nl = self.cones.nl
        out[:nl] = r[:nl] / self.lam_l
        for blk_in, blk_out, lam in zip(self.cones.blocks(r), self.cones.blocks(out), self.lam):
            blk_out[...] = 2.0 * blk_in / (lam[:, None] + lam[None, :])
        return out

    def max_step(self, d) -> float:
        """Largest ``a`` with ``lam + a d`` in the cone (inf if unbounded)."""
        nl = self.cones.nl
        worst = 0.0
        if nl:
            ratio = -d[:nl] / self.lam_l
            worst = max(worst, float(ratio.max()))
        for blk, lam in zip(self.cones.blocks(d), self.lam):
            isq = 1.0 / np.sqrt(lam)
            m = blk * isq[:, None] * isq[None, :]
            ev = sla.eigvalsh(0.5 * (m + m.T))
            worst = max(worst, float(-ev[0]))
        return np.inf if worst <= 0 else 1.0 / worst

    def update(self, ds_scaled, dz_scaled, alpha):
        """Move to ``lam + alpha*d`` in the scaled space and rescale."""
        nl = self.cones.nl
        st = self.lam_l + alpha * ds_scaled[:nl]
        zt = self.lam_l + alpha * dz_scaled[:nl]
        self.w = self.w * np.sqrt(st / zt)
        self.lam_l = np.sqrt(st * zt)
        for k, (dsb, dzb) in enumerate(zip(self.cones.blocks(ds_scaled), self.cones.blocks(dz_scaled))):
            lam = self.lam[k]
            st = np.diag(lam) + alpha * dsb
            zt = np.diag(lam) + alpha * dzb
            L1 = np.linalg.cholesky(0.5 * (st + st.T))
            L2 = np.linalg.cholesky(0.5 * (zt + zt.T))
            U, sv, Vt = np.linalg.svd(L2.T @ L1)
            isq = 1.0 / np.sqrt(sv)
            R2 = (L1 @ Vt.T) * isq[None, :]
            # R2^{-1} = diag(sqrt(sv)) V' L1^{-1}
            R2inv = (np.sqrt(sv)[:, None] * Vt) @ sla.solve_triangular(L1, np.eye(len(sv)), lower=True)
            self.R[k] = self.R[k] @ R2
            self.Rinv[k] = R2inv @ self.Rinv[k]
            self.lam[k] = sv

    def s_and_z(self):
        lv = self.lam_vec()
        return self.apply(lv, "WT"), self.apply(lv, "Winv")


def jordan(a, b, cones: ConeLayout):
    out = np.empty_like(a)
    nl = cones.nl
    out[:nl] = a[:nl] * b[:nl]
    for ba, bb, bo in zip(cones.blocks(a), cones.blocks(b), cones.blocks(out)):
        m = ba @ bb
        bo[...] = 0.5 * (m + m.T)
    return out


def _components(F_blocks, L, n):
    """Group variables coupled through a common cone block (union-find)."""
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def join(cols):
        if len(cols) < 2:
            return
        r0 = find(cols[0])
        for c in cols[1:]:
            r = find(c)
            if r != r0:
                parent[r] = r0

    for F in F_blocks:
        join(np.unique(F.indices))
    Lr = L.tocsr()
    for i in range(Lr.shape[0]):
        join(Lr.indices[Lr.indptr[i]:Lr.indptr[i + 1]])
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [np.array(g) for g in groups.values()]


def _psd_schur(F: sp.csr_matrix, Winv: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``F_c' (Winv kron Winv) F_c`` for the columns ``cols`` of one block.

    Each live column is a symmetric coefficient matrix ``A_i``; all products
    ``Winv A_i Winv`` are formed by two dense GEMMs over the stacked columns.
    """
    side = Winv.shape[0]
    Fc = F[:, cols].tocsc()
    H = np.zeros((len(cols), len(cols)))
    live = np.flatnonzero(np.diff(Fc.indptr))
    if live.size == 0:
        return H
    Fl = Fc[:, live]
    nl = live.size
    T = Fl.toarray().reshape(side, side * nl)
    U = (Winv @ T).reshape(side, side, nl).transpose(0, 2, 1).reshape(side * nl, side)
    V = (U @ Winv).reshape(side, nl, side).transpose(0, 2, 1).reshape(side * side, nl)
    Hl = np.asarray(Fl.T @ V)
    H[np.ix_(live, live)] = 0.5 * (Hl + Hl.T)
    return H


class _KKT:
    """Factorisation of ``[0 A' G'; A 0 0; G 0 -W'W]`` by block elimination."""

    def __init__(self, prob: "_Standard", scaling: _Scaling, groups):
        self.prob = prob
        self.sc = scaling
        self.groups = groups
        n = prob.n
        self.H_factors = []
        w2inv = 1.0 / (scaling.w ** 2)
        Winvs = [Ri.T @ Ri for Ri in scaling.Rinv]
        for g in groups:
            H = np.zeros((len(g), len(g)))
            Lg = prob.L[:, g]
            if Lg.nnz:
                H += (Lg.T @ sp.diags(w2inv) @ Lg).toarray()
            self.H_factors.append(H)
        for k, (F, Wi) in enumerate(zip(prob.F, Winvs)):
            gi = prob.block_group[k]
            self.H_factors[gi] += _psd_schur(F, Wi, groups[gi])
        self.H_factors = [self._chol(H) for H in self.H_factors]
        self.Ag = [prob.A[:, g].tocsc() for g in groups]
        p = prob.A.shape[0]
        if p:
            S = np.zeros((p, p))
            for Ag, fac in zip(self.Ag, self.H_factors):
                if Ag.nnz == 0:
                    continue
                X = self._hsolve(fac, Ag.T.toarray())
                S += Ag @ X
            self.S = self._chol(0.5 * (S + S.T))
        else:
            self.S = None

    @staticmethod
    def _chol(M):
        d = np.abs(np.diag(M))
        scale = d.max() if d.size and d.max() > 0 else 1.0
        reg = 0.0
        for _ in range(12):
            try:
                c = sla.cho_factor(M + reg * np.eye(len(M)), lower=True, check_finite=False)
                if np.all(np.isfinite(c[0])):
                    return ("chol", c)
            except np.linalg.LinAlgError:
                pass
            reg = scale * 1e-14 if reg == 0.0 else reg * 100.0
        w, V = np.linalg.eigh(M)
        cut = 1e-14 * max(abs(w).max(), 1e-300)
        winv = np.where(w > cut, 1.0 / np.maximum(w, cut), 0.0)
        return ("eig", (V, winv))

    @staticmethod
    def _hsolve(fac, rhs):
        kind, data = fac
        if kind == "chol":
            return sla.cho_solve(data, rhs, check_finite=False)
        V, winv = data
        return V @ (winv[:, None] * (V.T @ rhs)) if rhs.ndim == 2 else V @ (winv * (V.T @ rhs))

    def _Hinv(self, v):
        out = np.zeros_like(v)
        for g, fac in zip(self.groups, self.H_factors):
            out[g] = self._hsolve(fac, v[g])
        return out

    def _solve_once(self, b1, b2, b3s):
        # third block in scaled form: W^{-T} G ux - W uz = b3s
        prob, sc = self.prob, self.sc
        q = b1 + prob.GT(sc.apply(b3s, "Winv"))
        if self.S is not None:
            Hq = self._Hinv(q)
            uy = self._hsolve(self.S, prob.A @ Hq - b2)
            ux = self._Hinv(q - prob.A.T @ uy)
        else:
            uy = np.zeros(0)
            ux = self._Hinv(q)
        uz = sc.apply(sc.apply(prob.Gx(ux), "WinvT") - b3s, "Winv")
        return ux, uy, uz

    def solve(self, b1, b2, b3, refine=1, scaled=False):
        """Solve with right-hand side ``b3`` in s-space, or ``W^{-T} b3`` when ``scaled``.

        Refinement residuals are measured in the scaled space, where they stay
        well conditioned as ``W`` degenerates near the optimum.
        """
        prob, sc = self.prob, self.sc
        b3s = b3 if scaled else sc.apply(b3, "WinvT")
        ux, uy, uz = self._solve_once(b1, b2, b3s)
        for _ in range(refine):
            r1 = b1 - (prob.A.T @ uy + prob.GT(uz))
            r2 = b2 - prob.A @ ux
            r3 = b3s - (sc.apply(prob.Gx(ux), "WinvT") - sc.apply(uz, "W"))
            cx, cy, cz = self._solve_once(r1, r2, r3)
            ux, uy, uz = ux + cx, uy + cy, uz + cz
        return ux, uy, uz


class _Standard:
    """Problem data in ``G x + s = h`` form with ``G = -[L; F_1; ...]``."""

    def __init__(self, c, A, b, L, l0, F, f0, sides):
        self.c = np.asarray(c, float)
        self.n = len(self.c)
        self.A = sp.csr_matrix(A) if A is not None else sp.csr_matrix((0, self.n))
        self.b = np.asarray(b, float) if b is not None else np.zeros(0)
        self.L = sp.csr_matrix(L) if L is not None else sp.csr_matrix((0, self.n))
        self.F = [sp.csr_matrix(Fk) for Fk in F]
        self.cones = ConeLayout(self.L.shape[0], sides)
        h = np.zeros(self.cones.dim)
        if self.cones.nl:
            h[:self.cones.nl] = l0
        for off, s, fk in zip(self.cones.offsets, self.cones.sides, f0):
            h[off:off + s * s] = fk
        self.h = h
        self.block_group: list[int] = []

    def Fx(self, x):
        out = np.empty(self.cones.dim)
        nl = self.cones.nl
        out[:nl] = self.L @ x
        for off, s, Fk in zip(self.cones.offsets, self.cones.sides, self.F):
            out[off:off + s * s] = Fk @ x
        return out

    def Gx(self, x):
        return -self.Fx(x)

    def GT(self, z):
        nl = self.cones.nl
        out = -(self.L.T @ z[:nl])
        for off, s, Fk in zip(self.cones.offsets, self.cones.sides, self.F):
            out -= Fk.T @ z[off:off + s * s]
        return out


def solve_standard(c, A, b, L, l0, F, f0, sides, opts: SolverOptions | None = None) -> SolveResult:
    """Solve ``min c'x : A x = b, L x + l0 >= 0, F_k x + f0_k psd``.

    ``F_k`` maps ``x`` to the row-major ``vec`` of block ``k`` (side ``sides[k]``).
    """
    opts = opts or SolverOptions()
    prob = _Standard(c, A, b, L, l0, F, f0, sides)
    # normalise equality rows; drop dependent ones
    A0, b0 = prob.A, prob.b
    row_scale = np.ones(A0.shape[0])
    keep = np.arange(A0.shape[0])
    if A0.shape[0]:
        norms = sp.linalg.norm(A0, axis=1)
        empty = norms == 0
        if np.any(empty & (np.abs(b0) > 0)):
            return _trivially_infeasible(prob, np.where(empty & (np.abs(b0) > 0))[0][0])
        keep, cert = _independent_rows(A0, b0, norms)
        if cert is not None:
            return _linear_infeasible(prob, cert)
        row_scale = 1.0 / norms[keep]
        prob.A = sp.diags(row_scale) @ A0[keep]
        prob.b = b0[keep] * row_scale
    groups = _components(prob.F, prob.L, prob.n)
    owner = np.empty(prob.n, dtype=int)
    for gi, g in enumerate(groups):
        owner[g] = gi
    prob.block_group = [int(owner[F.indices[0]]) if F.nnz else 0 for F in prob.F]
    res = _hsde(prob, groups, opts)
    # undo row scaling of the multipliers
    y_full = np.zeros(A0.shape[0])
    y_full[keep] = res.y * row_scale
    res.y = y_full
    if res.certificate is not None and "y" in res.certificate:
        yc = np.zeros(A0.shape[0])
        yc[keep] = res.certificate["y"] * row_scale
        res.certificate["y"] = yc
    return res


def _independent_rows(A, b, norms):
    """Drop linearly dependent equality rows; flag inconsistent ones."""
    An = (sp.diags(1.0 / norms) @ A).toarray()
    bn = b / norms
    q, r, piv = sla.qr(An.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    tol = max(An.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 10
    rank = int(np.sum(d > tol))
    keep = np.sort(piv[:rank])
    if rank == An.shape[0]:
        return keep, None
    sol, *_ = np.linalg.lstsq(An, bn, rcond=None)
    resid = bn - An @ sol
    if np.linalg.norm(resid) > 1e-9 * max(1.0, np.linalg.norm(bn)):
        # y = -resid / norms gives A'y ~ 0 and b'y < 0
        return keep, -resid / norms
    return keep, None


def _trivially_infeasible(prob, row):
    y = np.zeros(prob.A.shape[0])
    y[row] = -np.sign(prob.b[row])
    return _linear_infeasible(prob, y)


def _linear_infeasible(prob, y):
    z = np.zeros(prob.cones.dim)
    return SolveResult(
        status=PRIMAL_INFEASIBLE, objective=np.inf, x=np.zeros(prob.n), y=np.zeros(prob.A.shape[0]),
        z=z, s=z.copy(), dual_objective=np.inf, iterations=0,
        residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf},
        certificate={"y": y, "z": z},
    )


def _hsde(prob: _Standard, groups, opts: SolverOptions) -> SolveResult:
    cones = prob.cones
    c, A, b, h = prob.c, prob.A, prob.b, prob.h
    n, p = prob.n, A.shape[0]
    resx0 = max(1.0, np.linalg.norm(c))
    resy0 = max(1.0, np.linalg.norm(b))
    resz0 = max(1.0, np.linalg.norm(h))
    sc = _Scaling(cones)
    x = np.zeros(n)
    y = np.zeros(p)
    s, z = sc.s_and_z()
    tau, kappa = 1.0, 1.0
    e = cones.identity()
    deg = cones.degree
    history = []
    best = None
    status = ITERATION_LIMIT
    cert = None
    it = 0
    for it in range(opts.max_iters + 1):
        rx = A.T @ y + prob.GT(z) + c * tau
        ry = b * tau - A @ x
        rz = s + prob.Gx(x) - h * tau
        rt = kappa + c @ x + b @ y + h @ z
        gap = float(s @ z)
        mu = (gap + tau * kappa) / (deg + 1)
        pcost = c @ x / tau
        dcost = -(h @ z + b @ y) / tau
        pres = max(np.linalg.norm(ry) / resy0, np.linalg.norm(rz) / resz0) / tau
        dres = np.linalg.norm(rx) / resx0 / tau
        relgap = abs(pcost - dcost) / (1.0 + abs(pcost) + abs(dcost))
        gap_rel = gap / tau ** 2 / (1.0 + min(abs(pcost), abs(dcost)))
        hz_by = h @ z + b @ y
        pinf = np.linalg.norm(A.T @ y + prob.GT(z)) / resx0 / (-hz_by) if hz_by < 0 else np.inf
        cx = c @ x
        dinf = (max(np.linalg.norm(A @ x) / resy0, np.linalg.norm(prob.Gx(x) + s) / resz0) / (-cx)
                if cx < 0 else np.inf)
        rec = dict(it=it, pcost=pcost, dcost=dcost, pres=pres, dres=dres, gap=gap / tau ** 2,
                   relgap=relgap, tau=tau, kappa=kappa, pinf=pinf, dinf=dinf)
        history.append(rec)
        if opts.verbose:
            log.info("%3d pcost %+.8e dcost %+.8e pres %.1e dres %.1e gap %.1e k/t %.1e",
                     it, pcost, dcost, pres, dres, gap_rel, kappa / tau)
        score = max(pres, dres, min(relgap, gap_rel))
        if best is None or score < best[0]:
            best = (score, x.copy(), y.copy(), z.copy(), s.copy(), tau, kappa, rec)
            best_it = it
        if pres <= opts.tol_feas and dres <= opts.tol_feas and min(relgap, gap_rel) <= opts.tol_gap:
            status = OPTIMAL
            break
        if pinf <= opts.tol_feas:
            status = PRIMAL_INFEASIBLE
            cert = {"y": y / (-hz_by), "z": z / (-hz_by), "residual": pinf}
            break
        if dinf <= opts.tol_feas:
            status = DUAL_INFEASIBLE
            cert = {"x": x / (-cx), "s": s / (-cx), "residual": dinf}
            break
        if it == opts.max_iters:
            status = ITERATION_LIMIT
            break
        if it - best_it >= opts.stall_iters:
            # no progress on the best iterate; further steps only accumulate rounding
            status = INACCURATE
            break
        try:
            kkt = _KKT(prob, sc, groups)
            vx, vy, vz = kkt.solve(-c, b, h, refine=opts.refinement_steps)
            denom = c @ vx + b @ vy + h @ vz - kappa / tau
            lam = sc.lam_vec()
            lamsq = jordan(lam, lam, cones)
            sigma, eta = 0.0, 1.0
            dsa = dza = None
            dtau_a = dkappa_a = 0.0
            for phase in ("predictor", "corrector"):
                if phase == "predictor":
                    rs = -lamsq
                    rk = -tau * kappa
                    eta = 1.0
                else:
                    rs = -lamsq + sigma * mu * e - jordan(dsa, dza, cones)
                    rk = -tau * kappa + sigma * mu - dtau_a * dkappa_a
                    eta = 1.0 - sigma
                u = sc.lam_inv_product(rs)
                b3s = -eta * sc.apply(rz, "WinvT") - u
                ux, uy, uz = kkt.solve(-eta * rx, eta * ry, b3s, refine=opts.refinement_steps, scaled=True)
                dtau = (-eta * rt - rk / tau - (c @ ux + b @ uy + h @ uz)) / denom
                dx = ux + dtau * vx
                dy = uy + dtau * vy
                dz = uz + dtau * vz
                dkappa = (rk - kappa * dtau) / tau
                dz_s = sc.apply(dz, "W")
                ds_s = u - dz_s
                amax = min(sc.max_step(ds_s), sc.max_step(dz_s))
                if dtau < 0:
                    amax = min(amax, -tau / dtau)
                if dkappa < 0:
                    amax = min(amax, -kappa / dkappa)
                if phase == "predictor":
                    alpha = min(1.0, amax)
                    sigma = min(1.0, max(0.0, (1.0 - alpha)) ** 3)
                    dsa, dza, dtau_a, dkappa_a = ds_s, dz_s, dtau, dkappa
                else:
                    alpha = min(1.0, opts.step_fraction * amax)
            if not np.isfinite(alpha) or alpha < 1e-10:
                status = INACCURATE
                break
            x = x + alpha * dx
            y = y + alpha * dy
            tau = tau + alpha * dtau
            kappa = kappa + alpha * dkappa
            sc.update(ds_s, dz_s, alpha)
            s, z = sc.s_and_z()
            if not (np.all(np.isfinite(x)) and np.isfinite(tau)):
                status = INACCURATE
                break
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.debug("numerical failure at iteration %d: %s", it, exc)
            status = INACCURATE
            break

    if status in (INACCURATE, ITERATION_LIMIT):
        _, x, y, z, s, tau, kappa, rec = best
        status, cert = _classify(rec, x, y, z, s, tau, kappa, prob, opts, status)
    rec = history[-1] if status in (OPTIMAL,) or cert is not None else rec
    tau_safe = tau if tau > 0 else 1.0
    return SolveResult(
        status=status,
        objective=float(rec["pcost"]) if status in (OPTIMAL, INACCURATE, ITERATION_LIMIT) else (
            np.inf if status == PRIMAL_INFEASIBLE else -np.inf),
        x=x / tau_safe, y=y / tau_safe, z=z / tau_safe, s=s / tau_safe,
        dual_objective=float(rec["dcost"]),
        iterations=it,
        residuals={"primal": rec["pres"], "dual": rec["dres"], "gap": rec["relgap"]},
        certificate=cert,
        history=history,
    )


def _classify(rec, x, y, z, s, tau, kappa, prob, opts, status):
    loose = opts.inaccurate_tol
    if rec["pinf"] <= loose and kappa / tau > opts.tau_kappa_ratio_threshold:
        hz_by = prob.h @ z + prob.b @ y
        return PRIMAL_INFEASIBLE, {"y": y / (-hz_by), "z": z / (-hz_by), "residual": rec["pinf"]}
    if rec["dinf"] <= loose and kappa / tau > opts.tau_kappa_ratio_threshold:
        cx = prob.c @ x
        return DUAL_INFEASIBLE, {"x": x / (-cx), "s": s / (-cx), "residual": rec["dinf"]}
    if rec["pres"] <= loose and rec["dres"] <= loose and min(rec["relgap"], rec["gap"]) <= loose:
        return INACCURATE, None
    return status if status == ITERATION_LIMIT else INACCURATE, None


def solve(cp, opts: SolverOptions | None = None) -> SolveResult:
    """Solve an assembled moment program (see ``relax.ConicProgram``)."""
    F = cp.psd_system()
    sides = [blk.side for blk in cp.blocks]
    f0 = [np.zeros(s * s) for s in sides]
    L = cp.nonneg_system()
    res = solve_standard(cp.c, cp.A, cp.b, L, np.zeros(L.shape[0]), F, f0, sides, opts)
    if res.status in (OPTIMAL, INACCURATE, ITERATION_LIMIT):
        res.objective += cp.offset
        res.dual_objective += cp.offset
    return res


# --- sparse SDPA text format ---------------------------------------------------

@dataclass
class SdpaData:
    """Contents of a sparse SDPA file: ``min c'x : sum_i F_i x_i - F_0 psd``.

    ``entries`` maps ``(matno, blkno)`` to a list of ``(i, j, value)`` with
    1-based ``i <= j``.  Diagonal blocks have negative size in ``block_struct``.
    """

    n: int
    block_struct: List[int]
    c: np.ndarray
    entries: dict
    offset: float = 0.0
    layout: dict = field(default_factory=dict)

    def block_matrix(self, mat: int, blk: int) -> np.ndarray:
        size = abs(self.block_struct[blk - 1])
        M = np.zeros((size, size))
        for i, j, v in self.entries.get((mat, blk), []):
            M[i - 1, j - 1] = v
            M[j - 1, i - 1] = v
        return M


def _diag_rows(cp):
    """Rows of the diagonal block: ``(coefficient row, constant)`` meaning ``row y - const >= 0``."""
    L = cp.nonneg_system()
    A = cp.A.tocsr()
    rows = [(L.getrow(i), 0.0) for i in range(L.shape[0])]
    rows += [(A.getrow(i), float(cp.b[i])) for i in range(A.shape[0])]
    rows += [(-A.getrow(i), -float(cp.b[i])) for i in range(A.shape[0])]
    return rows, L.shape[0], A.shape[0]


def export_sdpa(cp) -> str:
    """Sparse SDPA text for an assembled moment program.

    Equalities become pairs of opposite inequalities in the trailing diagonal
    block; the objective offset is written as a ``* offset`` comment.
    """
    n = cp.n
    blocks = list(cp.blocks)
    diag, n_cone, n_eq = _diag_rows(cp)
    struct = [b.side for b in blocks] + ([-len(diag)] if diag else [])
    lines = [
        "* sparse SDPA: min c'x s.t. sum_i F_i x_i - F_0 psd",
        f"* offset {cp.offset + 0.0:.17g}",
        f"* layout cone_rows={n_cone} equalities={n_eq}",
        f"{n} = mDIM",
        f"{len(struct)} = nBLOCK",
        " ".join(str(s) for s in struct) + " = blockStruct",
        " ".join(f"{v:.17g}" for v in cp.c) if n else "",
    ]
    out = []
    for k, (blk, F) in enumerate(zip(blocks, cp.psd_system()), start=1):
        s = blk.side
        F = F.tocsc()
        for col in range(n):
            lo, hi = F.indptr[col], F.indptr[col + 1]
            for r, v in zip(F.indices[lo:hi], F.data[lo:hi]):
                i, j = divmod(int(r), s)
                if i <= j and v != 0.0:
                    out.append((col + 1, k, i + 1, j + 1, v))
    if diag:
        kd = len(struct)
        for i, (row, const) in enumerate(diag, start=1):
            if const != 0.0:
                out.append((0, kd, i, i, const))
            for col, v in zip(row.indices, row.data):
                if v != 0.0:
                    out.append((int(col) + 1, kd, i, i, v))
    out.sort()
    lines += [f"{m} {b} {i} {j} {v:.17g}" for m, b, i, j, v in out]
    return "\n".join(lines) + "\n"


def read_sdpa(text: str) -> SdpaData:
    """Parse sparse SDPA text written by :func:`export_sdpa` (or any ``.dat-s``)."""
    offset, layout = 0.0, {}
    body = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line[0] in "*\"":
            words = line.lstrip("*\" ").split()
            if words[:1] == ["offset"]:
                offset = float(words[1])
            elif words[:1] == ["layout"]:
                layout = {k: int(v) for k, v in (w.split("=") for w in words[1:])}
            continue
        body.append(line)
    clean = lambda s: s.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " ")
    n = int(clean(body[0]).split()[0])
    nblock = int(clean(body[1]).split()[0])
    struct = [int(v) for v in clean(body[2]).split()[:nblock]]
    pos = 3
    c = np.zeros(n)
    if n:
        c = np.array([float(v) for v in clean(body[3]).split()[:n]])
        pos = 4
    entries: dict = {}
    for line in body[pos:]:
        m, b, i, j, v = clean(line).split()[:5]
        entries.setdefault((int(m), int(b)), []).append((int(i), int(j), float(v)))
    return SdpaData(n, struct, c, entries, offset, layout)


def sdpa_to_standard(data: SdpaData):
    """Arguments for :func:`solve_standard` from SDPA data (equality pairs are kept as pairs)."""
    n = data.n
    F, f0, sides = [], [], []
    L_rows, l0 = [], []
    for blk, size in enumerate(data.block_struct, start=1):
        if size > 0:
            rows, cols, vals = [], [], []
            const = np.zeros(size * size)
            for (m, b), ents in data.entries.items():
                if b != blk:
                    continue
                for i, j, v in ents:
                    pairs = {((i - 1) * size + (j - 1)), ((j - 1) * size + (i - 1))}
                    for r in pairs:
                        if m == 0:
                            const[r] -= v
                        else:
                            rows.append(r)
                            cols.append(m - 1)
                            vals.append(v)
            F.append(sp.csr_matrix((vals, (rows, cols)), shape=(size * size, n)))
            f0.append(const)
            sides.append(size)
        else:
            size = -size
            M = np.zeros((size, n))
            const = np.zeros(size)
            for (m, b), ents in data.entries.items():
                if b != blk:
                    continue
                for i, j, v in ents:
                    if m == 0:
                        const[i - 1] -= v
                    else:
                        M[i - 1, m - 1] += v
            L_rows.append(M)
            l0.append(const)
    L = sp.csr_matrix(np.vstack(L_rows)) if L_rows else sp.csr_matrix((0, n))
    l0 = np.concatenate(l0) if l0 else np.zeros(0)
    return data.c, sp.csr_matrix((0, n)), np.zeros(0), L, l0, F, f0, sides


def solve_external(data: SdpaData, solver: str | None = None) -> tuple[str, float]:
    """Cross-check an SDPA program with cvxpy (optional dependency)."""
    import cvxpy as cvx

    c, _, _, L, l0, F, f0, sides = sdpa_to_standard(data)
    x = cvx.Variable(data.n)
    cons = []
    if L.shape[0]:
        cons.append(L @ x + l0 >= 0)
    for Fk, fk, s in zip(F, f0, sides):
        S = cvx.reshape(Fk @ x + fk, (s, s), order="C")
        cons.append(0.5 * (S + S.T) >> 0)
    prob = cvx.Problem(cvx.Minimize(c @ x), cons)
    prob.solve(solver=solver)
    val = prob.value + data.offset if prob.value is not None else float("nan")
    return prob.status, float(val)
