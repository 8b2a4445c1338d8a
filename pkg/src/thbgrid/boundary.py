"""Boundary curves, Dirichlet data and Coons-patch initial maps.

A domain is given by four spline curves traversed counterclockwise: south,
east, north and west.  On the unit square they are attached as

    x(xi, 0) = south(xi)       x(1, eta) = east(eta)
    x(xi, 1) = north(1 - xi)   x(0, eta) = west(1 - eta)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import l2_project, trace_projection
from .splinecore import KnotVector, basis_derivatives, uniform_knot_vector
from .thb import GeometryMap, ThbSpace

__all__ = [
    "SIDES",
    "CORNER_TOL",
    "CornerMismatchError",
    "SideCurve",
    "BoundaryData",
    "fit_curve",
    "dirichlet_coefficients",
    "coons_patch",
]

SIDES = ("south", "east", "north", "west")
CORNER_TOL = 1e-10
_CORNERS = (("south", "east"), ("east", "north"), ("north", "west"), ("west", "south"))


class CornerMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SideCurve:
    """Planar spline curve on [0, 1]."""

    kv: KnotVector
    cps: np.ndarray

    def __post_init__(self):
        cps = np.array(self.cps, dtype=float)
        if cps.shape != (self.kv.n_basis, 2):
            raise ValueError("expected %d control points, got %s" % (self.kv.n_basis, cps.shape))
        cps.setflags(write=False)
        object.__setattr__(self, "cps", cps)

    @property
    def degree(self) -> int:
        return self.kv.degree

    def __call__(self, t, nderiv: int = 0):
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, 1.0)
        spans, ders = basis_derivatives(self.kv, t, nderiv)
        p = self.kv.degree
        rows = spans[:, None] - p + np.arange(p + 1)
        pts = np.einsum("nk,nkc->nc", ders[:, nderiv, :], self.cps[rows])
        return pts

    def reversed(self) -> "SideCurve":
        t = 1.0 - self.kv.knots[::-1]
        return SideCurve(KnotVector(self.kv.degree, t), self.cps[::-1])


class BoundaryData:
    """Four counterclockwise boundary curves with matching corners."""

    def __init__(self, south: SideCurve, east: SideCurve, north: SideCurve, west: SideCurve,
                 name: str = ""):
        self.sides = {"south": south, "east": east, "north": north, "west": west}
        self.name = name
        for a, b in _CORNERS:
            gap = float(np.linalg.norm(self.sides[a](1.0)[0] - self.sides[b](0.0)[0]))
            if gap > CORNER_TOL:
                raise CornerMismatchError("corner %s/%s mismatch of %.3e" % (a, b, gap))

    def __getitem__(self, side: str) -> SideCurve:
        return self.sides[side]

    def corners(self) -> np.ndarray:
        """Images of (0,0), (1,0), (1,1), (0,1)."""
        return np.array([self.sides[s](0.0)[0] for s in SIDES])

    def on_edge(self, side: str, t):
        """Boundary point for the unit-square edge parameter ``t`` (increasing in xi or eta)."""
        t = np.asarray(t, dtype=float)
        if side in ("south", "east"):
            return self.sides[side](t)
        return self.sides[side](1.0 - t)

    def trace(self, pts) -> np.ndarray:
        """Physical boundary points for points on the boundary of the unit square."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.empty_like(pts)
        tol = 1e-14
        done = np.zeros(len(pts), dtype=bool)
        for side, sel, t in (("south", pts[:, 1] <= tol, pts[:, 0]),
                             ("north", pts[:, 1] >= 1 - tol, pts[:, 0]),
                             ("west", pts[:, 0] <= tol, pts[:, 1]),
                             ("east", pts[:, 0] >= 1 - tol, pts[:, 1])):
            sel = sel & ~done
            if sel.any():
                out[sel] = self.on_edge(side, t[sel])
                done |= sel
        if not done.all():
            raise ValueError("trace evaluated away from the boundary of the unit square")
        return out

    def coons(self, pts) -> np.ndarray:
        """Bilinearly blended transfinite interpolant of the four curves."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        u, v = pts[:, :1], pts[:, 1:]
        s = self.on_edge("south", pts[:, 0])
        n = self.on_edge("north", pts[:, 0])
        w = self.on_edge("west", pts[:, 1])
        e = self.on_edge("east", pts[:, 1])
        c00, c10, c11, c01 = self.corners()
        bil = (1 - u) * (1 - v) * c00 + u * (1 - v) * c10 + u * v * c11 + (1 - u) * v * c01
        return (1 - u) * w + u * e + (1 - v) * s + v * n - bil

    def transformed(self, matrix=None, shift=None) -> "BoundaryData":
        """Affine image of the boundary (control points transform exactly)."""
        M = np.eye(2) if matrix is None else np.asarray(matrix, dtype=float)
        b = np.zeros(2) if shift is None else np.asarray(shift, dtype=float)
        sides = {k: SideCurve(c.kv, c.cps @ M.T + b) for k, c in self.sides.items()}
        return BoundaryData(name=self.name, **sides)


def fit_curve(f, n_elements: int = 64, degree: int = 3, n_samples: int | None = None) -> SideCurve:
    """Least-squares uniform spline fit of a parametric curve ``f(t) -> (n, 2)``.

    End points are interpolated exactly so that fitted sides share corners.
    """
    kv = uniform_knot_vector(n_elements, degree, degree - 1)
    n = kv.n_basis
    m = n_samples or 8 * n
    t = np.linspace(0.0, 1.0, m)
    spans, ders = basis_derivatives(kv, t, 0)
    B = np.zeros((m, n))
    rows = spans[:, None] - degree + np.arange(degree + 1)
    np.put_along_axis(B, rows, ders[:, 0, :], axis=1)
    y = np.asarray(f(t), dtype=float)
    ends = np.asarray(f(np.array([0.0, 1.0])), dtype=float)
    inner = slice(1, n - 1)
    rhs = y - np.outer(B[:, 0], ends[0]) - np.outer(B[:, -1], ends[1])
    sol, *_ = np.linalg.lstsq(B[:, inner], rhs, rcond=None)
    cps = np.vstack([ends[0], sol, ends[1]])
    return SideCurve(kv, cps)


def dirichlet_coefficients(space: ThbSpace, boundary: BoundaryData) -> np.ndarray:
    """Boundary control points: L2 projection of the curves onto the trace space."""
    return trace_projection(space, boundary.trace)


def coons_patch(boundary: BoundaryData, space: ThbSpace) -> GeometryMap:
    """Coons interpolant projected onto ``space`` with trace-projected boundary data."""
    cB = dirichlet_coefficients(space, boundary)
    return l2_project(boundary.coons, space, "interior", boundary_coeffs=cB)
