"""Univariate B-spline kernel.

Open knot vectors on [0, 1], Cox-de Boor evaluation with derivatives,
knot-insertion (two-scale) matrices and per-element Bezier extraction.
Everything here is a pure function of an immutable :class:`KnotVector`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "KnotVector",
    "LocalBasisEval",
    "make_knot_vector",
    "uniform_knot_vector",
    "eval_basis",
    "basis_derivatives",
    "subdivision_matrix",
    "bezier_extraction",
]

_KNOT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open knot vector of degree ``degree`` on [0, 1]."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        p = int(self.degree)
        if p < 0:
            raise ValueError("degree must be nonnegative")
        t = np.array(self.knots, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", t)
        if t.ndim != 1 or len(t) < 2 * (p + 1):
            raise ValueError("knot vector too short for degree %d" % p)
        if np.any(np.diff(t) < 0):
            raise ValueError("knots must be nondecreasing")
        if np.any(t[: p + 1] != 0.0) or np.any(t[-p - 1:] != 1.0):
            raise ValueError("knot vector must be open on [0, 1]")
        mult = self.multiplicities[1:-1]
        if np.any(mult > p) and p > 0:
            raise ValueError("interior knot multiplicity exceeds degree")

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    @property
    def multiplicities(self) -> np.ndarray:
        _, counts = np.unique(self.knots, return_counts=True)
        return counts

    @property
    def n_elements(self) -> int:
        return len(self.breakpoints) - 1

    def element_spans(self) -> np.ndarray:
        """Span index ``k`` (``t[k] < t[k+1]``) of every element, left to right."""
        t = self.knots
        k = np.nonzero(t[:-1] < t[1:])[0]
        return k

    def find_span(self, xi):
        """Span containing ``xi``: right-continuous, left-continuous at 1."""
        xi = np.asarray(xi, dtype=float)
        t = self.knots
        p = self.degree
        span = np.searchsorted(t, xi, side="right") - 1
        return np.clip(span, p, self.n_basis - 1)

    def same_as(self, other: "KnotVector") -> bool:
        return (self.degree == other.degree and len(self.knots) == len(other.knots)
                and np.allclose(self.knots, other.knots, atol=_KNOT_TOL, rtol=0))


@dataclass(frozen=True, eq=False)
class LocalBasisEval:
    """Derivatives ``0..max_deriv`` of the ``p+1`` functions nonzero at a point.

    ``values[k, a]`` is the k-th derivative of function ``span - p + a``.
    """

    span: int
    values: np.ndarray


def make_knot_vector(p, breakpoints, regularity=None) -> KnotVector:
    """Open knot vector with multiplicity ``p - regularity`` at interior breakpoints."""
    b = np.asarray(breakpoints, dtype=float)
    if b.ndim != 1 or len(b) < 2:
        raise ValueError("need at least two breakpoints")
    if b[0] != 0.0 or b[-1] != 1.0:
        raise ValueError("breakpoints must start at 0 and end at 1")
    if np.any(np.diff(b) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    n_int = len(b) - 2
    if regularity is None:
        regularity = [p - 1] * n_int
    reg = np.asarray(regularity, dtype=int)
    if reg.ndim > 1 or (reg.ndim == 1 and len(reg) != n_int):
        raise ValueError("expected %d interior regularities, got %d" % (n_int, reg.size))
    reg = np.broadcast_to(reg, (n_int,))
    if np.any(reg < 0) or np.any(reg > p - 1):
        raise ValueError("regularity must lie in [0, p-1]")
    knots = [0.0] * (p + 1)
    for x, r in zip(b[1:-1], reg):
        knots += [float(x)] * int(p - r)
    knots += [1.0] * (p + 1)
    return KnotVector(p, np.array(knots))


def uniform_knot_vector(n_elements: int, p: int, regularity: int) -> KnotVector:
    """Knot vector on ``n_elements`` uniform elements with constant regularity."""
    b = np.arange(n_elements + 1) / n_elements
    return make_knot_vector(p, b, [regularity] * (n_elements - 1))


def basis_derivatives(kv: KnotVector, xi, nderiv: int, spans=None):
    """Vectorised Cox-de Boor with derivatives.

    Returns ``(spans, ders)`` with ``ders`` of shape ``(npts, nderiv+1, p+1)``.
    Derivatives above the degree are zero.
    """
    t = kv.knots
    p = kv.degree
    u = np.atleast_1d(np.asarray(xi, dtype=float))
    if spans is None:
        spans = kv.find_span(u)
    spans = np.broadcast_to(np.asarray(spans), u.shape)
    npts = len(u)
    ders = np.zeros((npts, nderiv + 1, p + 1))
    n = min(nderiv, p)

    ndu = [[None] * (p + 1) for _ in range(p + 1)]
    ndu[0][0] = np.ones(npts)
    left = [None] * (p + 1)
    right = [None] * (p + 1)
    for j in range(1, p + 1):
        left[j] = u - t[spans + 1 - j]
        right[j] = t[spans + j] - u
        saved = np.zeros(npts)
        for r in range(j):
            ndu[j][r] = right[r + 1] + left[j - r]
            temp = ndu[r][j - 1] / ndu[j][r]
            ndu[r][j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j][j] = saved
    for j in range(p + 1):
        ders[:, 0, j] = ndu[j][p]

    for r in range(p + 1):
        a = [[np.zeros(npts) for _ in range(p + 1)] for _ in range(2)]
        s1, s2 = 0, 1
        a[0][0] = np.ones(npts)
        for k in range(1, n + 1):
            d = np.zeros(npts)
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk]
                d = a[s2][0] * ndu[rk][pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j]
                d = d + a[s2][j] * ndu[rk + j][pk]
            if r <= pk:
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r]
                d = d + a[s2][k] * ndu[r][pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1

    fac = p
    for k in range(1, n + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return spans, ders


def eval_basis(kv: KnotVector, xi: float, max_deriv: int = 0) -> LocalBasisEval:
    """Nonzero basis functions and derivatives at a single point ``xi``."""
    if max_deriv < 0 or max_deriv > 2:
        raise ValueError("max_deriv must be 0, 1 or 2")
    xi = float(xi)
    if not 0.0 <= xi <= 1.0:
        raise ValueError("xi=%r outside [0, 1]" % xi)
    spans, ders = basis_derivatives(kv, np.array([xi]), max_deriv)
    return LocalBasisEval(int(spans[0]), ders[0])


def _insert_knot(t: np.ndarray, p: int, x: float):
    """Boehm insertion of ``x``; returns new knots and the (n+1) x n matrix."""
    n = len(t) - p - 1
    k = int(np.searchsorted(t, x, side="right") - 1)
    k = min(max(k, p), n - 1)
    rows, cols, vals = [], [], []
    for i in range(n + 1):
        if i <= k - p:
            rows.append(i); cols.append(i); vals.append(1.0)
        elif i >= k + 1:
            rows.append(i); cols.append(i - 1); vals.append(1.0)
        else:
            a = (x - t[i]) / (t[i + p] - t[i])
            if a != 0.0:
                rows.append(i); cols.append(i); vals.append(a)
            if a != 1.0:
                rows.append(i); cols.append(i - 1); vals.append(1.0 - a)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))
    return np.insert(t, k + 1, x), S


def _knot_difference(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Multiset ``fine - coarse``; raises if coarse is not contained in fine."""
    extra = []
    i = 0
    for x in fine:
        if i < len(coarse) and abs(coarse[i] - x) <= _KNOT_TOL:
            i += 1
        else:
            extra.append(x)
    if i != len(coarse):
        raise ValueError("knot vectors are not nested")
    return np.array(extra)


def subdivision_matrix(coarse: KnotVector, fine: KnotVector) -> sp.csr_matrix:
    """Two-scale matrix ``S`` (n_fine x n_coarse): fine coefficients ``S @ c``."""
    if coarse.degree != fine.degree:
        raise ValueError("degree mismatch between knot vectors")
    p = coarse.degree
    extra = _knot_difference(coarse.knots, fine.knots)
    t = np.array(coarse.knots)
    S = sp.identity(coarse.n_basis, format="csr")
    for x in extra:
        t, Si = _insert_knot(t, p, float(x))
        S = Si @ S
    S = S.tocsr()
    S.eliminate_zeros()
    return S


def bezier_extraction(kv: KnotVector) -> np.ndarray:
    """Per-element extraction operators, shape ``(n_elements, p+1, p+1)``.

    On element ``e`` the function ``span_e - p + a`` equals
    ``sum_b C[e, a, b] * bernstein_b`` (Bernstein basis mapped to the element).
    """
    p = kv.degree
    if p == 0:
        return np.ones((kv.n_elements, 1, 1))
    bp = kv.breakpoints
    bez = make_knot_vector(p, bp, [0] * (len(bp) - 2))
    S = subdivision_matrix(kv, bez).toarray()
    spans = kv.element_spans()
    C = np.empty((len(spans), p + 1, p + 1))
    for e, k in enumerate(spans):
        C[e] = S[e * p: e * p + p + 1, k - p: k + 1].T
    return C
