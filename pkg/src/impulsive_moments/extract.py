"""Recovery of impulse times and amplitudes from optimal moment vectors."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.special import comb

from .model import DISCRETE
from .poly import Polynomial
from .transcribe import MomentVector

log = logging.getLogger(__name__)

NON_ATOMIC = "non-atomic (possible chattering or density)"


@dataclass
class AtomicMeasure:
    atoms: List[Tuple[float, float]]
    residual: float = 0.0

    @property
    def locations(self) -> np.ndarray:
        return np.array([a for a, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    def moments(self, max_deg: int) -> np.ndarray:
        t, w = self.locations, self.weights
        return np.array([np.sum(w * t ** k) for k in range(max_deg + 1)])


@dataclass
class ImpulsePlan:
    """Per-channel signed impulses ``(t_j, u_j)`` plus an optional density part.

    ``segments`` holds piecewise-constant controls ``(t0, t1, u)`` with ``u``
    a vector over all channels; ``density`` holds native time moments of
    channels whose marginals were not atomic, and ``non_atomic`` lists those
    channel indices.
    """

    channels: List[List[Tuple[float, float]]]
    segments: List[Tuple[float, float, Tuple[float, ...]]] = field(default_factory=list)
    density: Dict[int, List[float]] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)
    residuals: Dict[str, float] = field(default_factory=dict)
    cancellations: List[dict] = field(default_factory=list)
    non_atomic: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.channels = [sorted((float(t), float(u)) for t, u in ch) for ch in self.channels]

    @property
    def m_controls(self) -> int:
        return len(self.channels)

    @property
    def atomic(self) -> bool:
        return NON_ATOMIC not in self.flags

    def jumps(self) -> List[Tuple[float, np.ndarray]]:
        """Impulses merged across channels, sorted by time."""
        out: Dict[float, np.ndarray] = {}
        for j, ch in enumerate(self.channels):
            for t, u in ch:
                vec = out.setdefault(t, np.zeros(self.m_controls))
                vec[j] += u
        return sorted(out.items())

    def to_dict(self) -> dict:
        return {
            "channels": [[[t, u] for t, u in ch] for ch in self.channels],
            "segments": [[a, b, list(u)] for a, b, u in self.segments],
            "density": {str(k): list(v) for k, v in self.density.items()},
            "flags": list(self.flags),
            "residuals": dict(self.residuals),
            "cancellations": list(self.cancellations),
            "non_atomic": list(self.non_atomic),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImpulsePlan":
        return cls(
            channels=[[(float(t), float(u)) for t, u in ch] for ch in data["channels"]],
            segments=[(float(a), float(b), tuple(float(v) for v in u)) for a, b, u in data.get("segments", [])],
            density={int(k): list(v) for k, v in data.get("density", {}).items()},
            flags=list(data.get("flags", [])),
            residuals=dict(data.get("residuals", {})),
            cancellations=list(data.get("cancellations", [])),
            non_atomic=[int(j) for j in data.get("non_atomic", [])],
        )


# --- univariate moment tools ---------------------------------------------------

def marginal(y: MomentVector, variables: Sequence[int]) -> MomentVector:
    """Moments of ``y`` involving only ``variables`` (exponents elsewhere zero)."""
    keep = tuple(variables)
    if not keep:
        raise ValueError("marginal needs at least one variable")
    drop = [i for i in range(y.n_vars) if i not in keep]
    values = {}
    for k, v in y.values.items():
        if all(k[i] == 0 for i in drop):
            values[tuple(k[i] for i in keep)] = v
    return MomentVector(y.owner, len(keep), values)


def univariate(y: MomentVector, var: int = 0, max_deg: int | None = None) -> np.ndarray:
    """``[int z_var^a dy]`` for ``a = 0..max_deg``."""
    m = marginal(y, [var])
    top = max(k[0] for k in m.values) if max_deg is None else max_deg
    return np.array([m.values[(a,)] for a in range(top + 1)])


def hankel(m: Sequence[float], size: int, shift: int = 0) -> np.ndarray:
    m = np.asarray(m, float)
    return np.array([[m[i + j + shift] for j in range(size)] for i in range(size)])


def affine_moments(m: Sequence[float], a: float, b: float) -> np.ndarray:
    """Moments of the push-forward under ``z -> a + b z``."""
    m = np.asarray(m, float)
    out = np.zeros_like(m)
    for k in range(len(m)):
        i = np.arange(k + 1)
        out[k] = np.sum(comb(k, i) * a ** (k - i) * b ** i * m[i])
    return out


def _centre(m, interval):
    if interval is None:
        return np.asarray(m, float), (0.0, 1.0)
    lo, hi = interval
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return affine_moments(m, -c / r, 1.0 / r), (c, r)


def numerical_rank(M: np.ndarray, tol: float, ref: float | None = None) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    ref = s[0] if ref is None else ref
    if ref <= 0:
        return 0
    return int(np.sum(s > tol * ref))


def flat_rank(moments: Sequence[float], tol: float = 1e-3, interval=None) -> Optional[int]:
    """Rank ``r`` when ``rank M_d = rank M_{d-1}``, otherwise ``None``.

    ``moments`` runs up to degree ``2d``. When ``interval`` is given the
    moments are first mapped to ``[-1, 1]``, which keeps Hankel matrices of
    absolutely continuous measures away from spurious rank drops.
    """
    m, _ = _centre(moments, interval)
    d = (len(m) - 1) // 2
    if d < 1:
        return None
    Md, Mp = hankel(m, d + 1), hankel(m, d)
    ref = np.linalg.svd(Md, compute_uv=False)[0]
    r1, r0 = numerical_rank(Md, tol, ref), numerical_rank(Mp, tol, ref)
    return r1 if r1 == r0 else None


def atoms_from_moments(m: Sequence[float], r: int, interval=None, tol: float = 1e-10,
                       signed: bool = False) -> AtomicMeasure:
    """Prony decomposition of univariate moments into ``r`` positive atoms.

    ``tol`` is the relative singular-value cutoff below which the Hankel
    pencil counts as singular (the atom count itself comes from the caller,
    usually :func:`flat_rank`).  With ``signed`` the weights may have either
    sign (a net Jordan measure).
    """
    m_orig = np.asarray(m, float)
    if r < 1 or len(m_orig) < 2 * r:
        raise ValueError("need r >= 1 and at least 2r moments")
    mc, (c, rad) = _centre(m_orig, interval)
    while r >= 1:
        H0, H1 = hankel(mc, r), hankel(mc, r, shift=1)
        rank = numerical_rank(H0, tol)
        if rank < r:
            warnings.warn(f"ill-conditioned Hankel pencil; reducing to {rank} atoms")
            r = rank
            continue
        z = sla.eigvals(H1, H0)
        if np.any(np.abs(z.imag) > 1e-6 * max(1.0, np.abs(z).max())) or not np.all(np.isfinite(z)):
            warnings.warn(f"complex atoms in pencil of size {r}; reducing")
            r -= 1
            continue
        z = np.sort(z.real)
        V = np.vander(z, len(mc), increasing=True).T
        w = np.linalg.lstsq(V, mc, rcond=None)[0]
        if (np.any(w == 0) if signed else np.any(w <= 0)):
            warnings.warn("nonpositive weight in atomic fit; reducing")
            r -= 1
            continue
        t = c + rad * z
        atoms = list(zip(t.tolist(), w.tolist()))
        meas = AtomicMeasure(atoms)
        meas.residual = float(np.max(np.abs(meas.moments(len(m_orig) - 1) - m_orig)))
        return meas
    return AtomicMeasure([], float(np.max(np.abs(m_orig))))


def piecewise_uniform_moments(pieces: Sequence[Tuple[float, float, float]], max_deg: int) -> np.ndarray:
    """Moments of ``sum density * I_[a, b]``."""
    out = np.zeros(max_deg + 1)
    for a, b, rho in pieces:
        k = np.arange(max_deg + 1)
        out += rho * (b ** (k + 1) - a ** (k + 1)) / (k + 1)
    return out


def moment_distance(m: Sequence[float], candidate: Sequence[float]) -> float:
    """Max absolute difference over the common degrees."""
    n = min(len(m), len(candidate))
    return float(np.max(np.abs(np.asarray(m[:n]) - np.asarray(candidate[:n]))))


# --- plan extraction -----------------------------------------------------------

def _channel_measures(result):
    """Per channel, the list of (sign, measure name, amplitude factor)."""
    ocp = result.problem.ocp
    if ocp.control_mode == DISCRETE:
        return [[(1.0, f"nu{l + 1}", u[j]) for l, u in enumerate(ocp.U) if u[j] != 0.0]
                for j in range(ocp.m_controls)]
    return [[(1.0, f"nu+{j + 1}", 1.0), (-1.0, f"nu-{j + 1}", 1.0)] for j in range(ocp.m_controls)]


def _fit(m, tol, interval, residual_tol, signed=False, scale=None):
    """Flat rank plus Prony fit of one marginal, or ``None`` when not atomic."""
    r = flat_rank(m, tol, interval)
    if r is None and len(m) % 2 == 1 and len(m) >= 5:
        # the degree-2d moment is pinned by no linear row; retry without it
        m = m[:-1]
        r = flat_rank(m, tol, interval)
    if r is None:
        return None
    meas = atoms_from_moments(m, r, interval, signed=signed)
    ref = max(1.0, abs(m[0]) if scale is None else scale)
    if not meas.atoms or meas.residual > residual_tol * ref:
        return None
    return meas


def identify_controls(result, tol: float = 1e-3, prune: float = 1e-4,
                      merge_window: float = 1e-3, residual_tol: float = 1e-5) -> ImpulsePlan:
    """Impulse plan from the time marginals of the control measures.

    A marginal is accepted as atomic when its Hankel ranks stabilise and the
    recovered atoms reproduce its moments to ``residual_tol`` (relative to
    mass).  When the positive or negative part alone is not atomic, the net
    signed marginal is tried, since the relaxation may pad both parts with
    mass that cancels; padding removed this way is reported in
    ``plan.cancellations``.  Channels that still fail are flagged non-atomic
    and their native time moments are returned as ``plan.density``.
    """
    if not result.ok:
        raise ValueError(f"cannot extract from a relaxation with status {result.status}")
    ocp = result.problem.ocp
    smap = result.scaling
    interval = (0.0, 1.0) if smap is not None else (0.0, ocp.T)

    def to_native(s):
        # atoms may sit a hair outside the support after the eigen solve
        lo, hi = interval
        if lo - 1e-6 * (hi - lo) <= s <= hi + 1e-6 * (hi - lo):
            s = min(max(s, lo), hi)
        return float(smap.time_to_native(s)) if smap is not None else float(s)

    discrete = ocp.control_mode == DISCRETE
    time_factor = smap.T if (smap is not None and discrete) else 1.0
    chans = _channel_measures(result)
    marg = {}
    for ch in chans:
        for _, name, _ in ch:
            if name not in marg:
                marg[name] = result.time_marginal(name)
    total = sum(abs(m[0]) for m in marg.values()) or 1.0
    plan = ImpulsePlan(channels=[[] for _ in chans])
    for j, ch in enumerate(chans):
        if not ch:
            continue
        if discrete:
            # u-weighted combination of the discrete-control measures is signed
            pos = sum(max(a, 0.0) * marg[n] for _, n, a in ch)
            neg = sum(max(-a, 0.0) * marg[n] for _, n, a in ch)
            parts = [(1.0, f"u{j + 1}+", np.asarray(pos, float)), (-1.0, f"u{j + 1}-", np.asarray(neg, float))]
        else:
            parts = [(sgn, name, marg[name]) for sgn, name, _ in ch]
        found, failed, labels = [], [], {}
        for sgn, label, m in parts:
            if m.ndim == 0 or m[0] <= prune * total:
                continue
            meas = _fit(m, tol, interval, residual_tol)
            if meas is None:
                failed.append((sgn, m))
                continue
            labels[label] = meas.residual
            found.extend((to_native(s), sgn * w * time_factor) for s, w in meas.atoms if w >= prune * total)
        if failed:
            p, q = parts[0][2], parts[1][2]
            n = min(len(p), len(q))
            net = _fit(p[:n] - q[:n], tol, interval, residual_tol, signed=True, scale=p[0] + q[0])
            if net is not None:
                atoms = [(to_native(s), w * time_factor) for s, w in net.atoms if abs(w) >= prune * total]
                padding = time_factor * (p[0] + q[0]) - sum(abs(w) for _, w in atoms)
                plan.residuals[f"net{j + 1}"] = net.residual
                if padding > prune * total:
                    plan.cancellations.append({"channel": j, "padding": float(padding)})
                plan.channels[j] = _cancel(atoms, merge_window, j, plan)
                continue
        plan.residuals.update(labels)
        for sgn, m in failed:
            if NON_ATOMIC not in plan.flags:
                plan.flags.append(NON_ATOMIC)
            if j not in plan.non_atomic:
                plan.non_atomic.append(j)
            native = time_factor * _native_time_moments(m, smap)
            prev = np.asarray(plan.density.get(j, np.zeros(len(native))))
            k = min(len(prev), len(native))
            plan.density[j] = (prev[:k] + sgn * native[:k]).tolist()
        plan.channels[j] = _cancel(found, merge_window, j, plan)
    plan.__post_init__()
    return plan


def _native_time_moments(m, smap):
    if smap is None:
        return np.asarray(m, float)
    return affine_moments(m, 0.0, smap.T)


def _cancel(atoms, window, channel, plan):
    """Merge opposite-sign atoms closer than ``window`` in time, reporting each merge."""
    atoms = sorted(atoms)
    out: List[Tuple[float, float]] = []
    for t, u in atoms:
        if out and abs(out[-1][0] - t) <= window and np.sign(out[-1][1]) != np.sign(u):
            t0, u0 = out.pop()
            plan.cancellations.append({"channel": channel, "time": t0, "positive": max(u0, u), "negative": min(u0, u)})
            net = u0 + u
            if net != 0.0:
                out.append((t0 if abs(u0) >= abs(u) else t, net))
        else:
            out.append((t, u))
    return out
