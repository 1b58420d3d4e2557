"""Sparse multivariate polynomials over a graded-lex monomial order.

Variable 0 is always time ``t``; the state variables follow.  A monomial is
a tuple of nonnegative exponents (a ``MultiIndex``).  Within a degree,
monomials are ordered lexicographically with the higher power of the
earlier variable first, so for ``(t, x)`` the degree-2 basis reads
``1, t, x, t^2, t x, x^2``.
"""
from __future__ import annotations

from itertools import combinations_with_replacement
from math import comb
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

MultiIndex = Tuple[int, ...]


def degree(k: MultiIndex) -> int:
    return sum(k)


def grlex_key(k: MultiIndex):
    return (sum(k), tuple(-e for e in k))


def add_index(a: MultiIndex, b: MultiIndex) -> MultiIndex:
    return tuple(i + j for i, j in zip(a, b))


def enumerate_basis(n_vars: int, max_deg: int) -> list[MultiIndex]:
    """All exponent vectors in ``n_vars`` variables with degree <= ``max_deg``.

    Returned in graded-lex order, starting with the zero index, so the basis
    of degree ``d`` is a prefix of the basis of degree ``d + 1``.
    """
    if n_vars < 1 or max_deg < 0:
        raise ValueError("need n_vars >= 1 and max_deg >= 0")
    out: list[MultiIndex] = []
    for d in range(max_deg + 1):
        # combinations of variable positions, earliest variables first gives
        # the required descending-lex order within the degree
        for combo in combinations_with_replacement(range(n_vars), d):
            k = [0] * n_vars
            for v in combo:
                k[v] += 1
            out.append(tuple(k))
    return out


def basis_size(n_vars: int, max_deg: int) -> int:
    return comb(n_vars + max_deg, max_deg)


class Polynomial:
    """Immutable sparse polynomial ``sum_k c_k z^k`` in ``n_vars`` variables."""

    __slots__ = ("n_vars", "_terms")

    def __init__(self, n_vars: int, terms: Mapping[MultiIndex, float] | None = None):
        self.n_vars = int(n_vars)
        clean: Dict[MultiIndex, float] = {}
        for k, c in (terms or {}).items():
            k = tuple(int(e) for e in k)
            if len(k) != self.n_vars:
                raise ValueError(f"exponent {k} does not match n_vars={n_vars}")
            if any(e < 0 for e in k):
                raise ValueError(f"negative exponent in {k}")
            c = float(c)
            if c != 0.0:
                clean[k] = clean.get(k, 0.0) + c
        self._terms = {k: c for k, c in clean.items() if c != 0.0}

    # constructors -------------------------------------------------------
    @classmethod
    def constant(cls, n_vars: int, value: float) -> "Polynomial":
        return cls(n_vars, {(0,) * n_vars: value})

    @classmethod
    def zero(cls, n_vars: int) -> "Polynomial":
        return cls(n_vars)

    @classmethod
    def monomial(cls, k: Sequence[int], coef: float = 1.0) -> "Polynomial":
        return cls(len(k), {tuple(k): coef})

    @classmethod
    def variable(cls, n_vars: int, var: int, coef: float = 1.0) -> "Polynomial":
        k = [0] * n_vars
        k[var] = 1
        return cls(n_vars, {tuple(k): coef})

    @classmethod
    def from_pairs(cls, n_vars: int, pairs: Iterable[Tuple[float, Sequence[int]]]) -> "Polynomial":
        return cls(n_vars, _accumulate((tuple(k), c) for c, k in pairs))

    # queries ------------------------------------------------------------
    @property
    def terms(self) -> Dict[MultiIndex, float]:
        return dict(self._terms)

    def items(self):
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]))

    def coefficient(self, k: Sequence[int]) -> float:
        return self._terms.get(tuple(k), 0.0)

    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree -1."""
        return max((sum(k) for k in self._terms), default=-1)

    def is_zero(self) -> bool:
        return not self._terms

    def depends_on(self, var: int) -> bool:
        return any(k[var] > 0 for k in self._terms)

    def degree_in(self, var: int) -> int:
        return max((k[var] for k in self._terms), default=-1)

    # arithmetic ---------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if other.n_vars != self.n_vars:
            raise ValueError("polynomials live in different variable spaces")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        return Polynomial.constant(self.n_vars, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        out = dict(self._terms)
        for k, c in other._terms.items():
            out[k] = out.get(k, 0.0) + c
        return Polynomial(self.n_vars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.n_vars, {k: -c for k, c in self._terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            s = float(other)
            return Polynomial(self.n_vars, {k: s * c for k, c in self._terms.items()})
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, s: float):
        return self * (1.0 / float(s))

    def __pow__(self, e: int):
        out = Polynomial.constant(self.n_vars, 1.0)
        for _ in range(int(e)):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.n_vars == other.n_vars and self._terms == other._terms

    def __hash__(self):
        return hash((self.n_vars, frozenset(self._terms.items())))

    def __call__(self, point):
        return evaluate(self, point)

    def __repr__(self):
        if not self._terms:
            return "Polynomial(0)"
        parts = [f"{c:g}*z^{k}" for k, c in self.items()]
        return "Polynomial(" + " + ".join(parts) + ")"

    def allclose(self, other: "Polynomial", rtol: float = 1e-12, atol: float = 0.0) -> bool:
        self._check(other)
        keys = set(self._terms) | set(other._terms)
        return all(
            np.isclose(self.coefficient(k), other.coefficient(k), rtol=rtol, atol=atol)
            for k in keys
        )

    # structural ---------------------------------------------------------
    def differentiate(self, var: int) -> "Polynomial":
        return differentiate(self, var)

    def restrict(self, keep: Sequence[int], fixed: Mapping[int, float]) -> "Polynomial":
        """Substitute ``z_v = fixed[v]`` and re-express in the ``keep`` variables."""
        out: Dict[MultiIndex, float] = {}
        for k, c in self._terms.items():
            for v, val in fixed.items():
                if k[v]:
                    c *= float(val) ** k[v]
            kk = tuple(k[v] for v in keep)
            out[kk] = out.get(kk, 0.0) + c
        return Polynomial(len(keep), out)

    def embed(self, n_vars: int, positions: Sequence[int]) -> "Polynomial":
        """Lift into a larger space, variable ``i`` going to ``positions[i]``."""
        out = {}
        for k, c in self._terms.items():
            kk = [0] * n_vars
            for i, p in enumerate(positions):
                kk[p] = k[i]
            out[tuple(kk)] = c
        return Polynomial(n_vars, out)

    def affine_substitute(self, offset: Sequence[float], scale: Sequence[float]) -> "Polynomial":
        """Return ``q(z) = p(offset + scale * z)`` (elementwise affine map)."""
        if len(offset) != self.n_vars or len(scale) != self.n_vars:
            raise ValueError("affine map must match n_vars")
        out: Dict[MultiIndex, float] = {}
        for k, c in self._terms.items():
            # expand prod_i (a_i + b_i z_i)^{k_i}
            partial: Dict[MultiIndex, float] = {(): c}
            for i, e in enumerate(k):
                a, b = float(offset[i]), float(scale[i])
                nxt: Dict[MultiIndex, float] = {}
                for kk, cc in partial.items():
                    for j in range(e + 1):
                        w = comb(e, j) * (a ** (e - j)) * (b ** j)
                        if w == 0.0:
                            continue
                        key = kk + (j,)
                        nxt[key] = nxt.get(key, 0.0) + cc * w
                partial = nxt
            for kk, cc in partial.items():
                out[kk] = out.get(kk, 0.0) + cc
        return Polynomial(self.n_vars, out)


def _accumulate(pairs):
    out: Dict[MultiIndex, float] = {}
    for k, c in pairs:
        out[k] = out.get(k, 0.0) + float(c)
    return out


def differentiate(p: Polynomial, var: int) -> Polynomial:
    if not 0 <= var < p.n_vars:
        raise ValueError(f"variable {var} out of range")
    out: Dict[MultiIndex, float] = {}
    for k, c in p._terms.items():
        e = k[var]
        if e == 0:
            continue
        kk = list(k)
        kk[var] = e - 1
        kk = tuple(kk)
        out[kk] = out.get(kk, 0.0) + e * c
    return Polynomial(p.n_vars, out)


def multiply(p: Polynomial, q: Polynomial) -> Polynomial:
    p._check(q)
    out: Dict[MultiIndex, float] = {}
    for k1, c1 in p._terms.items():
        for k2, c2 in q._terms.items():
            k = add_index(k1, k2)
            out[k] = out.get(k, 0.0) + c1 * c2
    return Polynomial(p.n_vars, out)


def evaluate(p: Polynomial, point) -> float:
    z = np.asarray(point, dtype=float)
    if z.shape != (p.n_vars,):
        raise ValueError(f"point must have length {p.n_vars}")
    total = 0.0
    for k, c in p._terms.items():
        total += c * float(np.prod(z ** np.asarray(k)))
    return total


def evaluate_many(p: Polynomial, points: np.ndarray) -> np.ndarray:
    """Vectorised evaluation on an ``(N, n_vars)`` array of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    total = np.zeros(pts.shape[0])
    for k, c in p._terms.items():
        total += c * np.prod(pts ** np.asarray(k), axis=1)
    return total
