"""Packaged test domains.

``square`` and ``skewed_quad`` have straight sides; ``quarter_annulus`` has
a closed-form inversely harmonic parameterization; ``horseshoe`` is a thick
U-shaped band whose tight inner bend folds coarse solutions; ``tube`` is a
sinusoidal channel used for the boundary-orthogonality workflow.
"""
from __future__ import annotations

import numpy as np

from .boundary import BoundaryData, SideCurve, fit_curve
from .splinecore import make_knot_vector

__all__ = [
    "square",
    "skewed_quad",
    "quarter_annulus",
    "annulus_exact",
    "horseshoe",
    "tube",
    "GEOMETRIES",
    "get_geometry",
]


def _segment(a, b) -> SideCurve:
    return SideCurve(make_knot_vector(1, [0.0, 1.0]), np.array([a, b], dtype=float))


def _polygon(c00, c10, c11, c01, name) -> BoundaryData:
    return BoundaryData(_segment(c00, c10), _segment(c10, c11), _segment(c11, c01), _segment(c01, c00),
                        name=name)


def square() -> BoundaryData:
    return _polygon((0, 0), (1, 0), (1, 1), (0, 1), "square")


def skewed_quad() -> BoundaryData:
    return _polygon((0, 0), (2.0, 0.3), (1.6, 1.8), (-0.3, 1.2), "skewed_quad")


def annulus_exact(pts) -> np.ndarray:
    """Inversely harmonic map onto the quarter annulus ``1 <= r <= 2``.

    ``x = 2**eta (sin(pi xi / 2), cos(pi xi / 2))``: the angle is measured
    from the y-axis so that the map is orientation preserving.
    """
    pts = np.atleast_2d(pts)
    r = np.exp(pts[:, 1] * np.log(2.0))
    a = 0.5 * np.pi * pts[:, 0]
    return np.column_stack([r * np.sin(a), r * np.cos(a)])


def quarter_annulus(n_elements: int = 128) -> BoundaryData:
    """Quarter annulus whose sides carry the traces of :func:`annulus_exact`."""
    def edge(fn):
        return fit_curve(fn, n_elements)

    south = edge(lambda t: annulus_exact(np.column_stack([t, 0 * t])))
    east = edge(lambda t: annulus_exact(np.column_stack([1 + 0 * t, t])))
    north = edge(lambda t: annulus_exact(np.column_stack([1 - t, 1 + 0 * t])))
    west = edge(lambda t: annulus_exact(np.column_stack([0 * t, 1 - t])))
    return BoundaryData(south, east, north, west, name="quarter_annulus")


def _u_curve(radius, leg, t):
    """Arc-length parameterized U: down the right leg, round the bottom, up the left leg."""
    total = 2 * leg + np.pi * radius
    s = np.asarray(t) * total
    out = np.empty((len(s), 2))
    a = s <= leg
    out[a] = np.column_stack([np.full(a.sum(), radius), leg - s[a]])
    b = (s > leg) & (s < leg + np.pi * radius)
    phi = (s[b] - leg) / radius
    out[b] = np.column_stack([radius * np.cos(phi), -radius * np.sin(phi)])
    c = s >= leg + np.pi * radius
    out[c] = np.column_stack([np.full(c.sum(), -radius), s[c] - leg - np.pi * radius])
    return out


def horseshoe(inner: float = 0.15, outer: float = 1.0, leg: float = 1.5, n_elements: int = 96) -> BoundaryData:
    """Thick U-shaped band; ``xi`` runs along the band, ``eta`` from inner to outer rim."""
    south = fit_curve(lambda t: _u_curve(inner, leg, t), n_elements)
    north = fit_curve(lambda t: _u_curve(outer, leg, 1 - t), n_elements)
    east = _segment((-inner, leg), (-outer, leg))
    west = _segment((outer, leg), (inner, leg))
    return BoundaryData(south, east, north, west, name="horseshoe")


def tube(length: float = 3.0, width: float = 1.0, amplitude: float = 0.35, waves: int = 1,
         n_elements: int = 64) -> BoundaryData:
    """Channel between two parallel cosine walls.

    The walls are horizontal at both ends, so the straight end caps meet
    them at right angles.
    """
    def wall(t, y0):
        return np.column_stack([length * t, y0 + amplitude * (1 - np.cos(2 * np.pi * waves * t))])

    south = fit_curve(lambda t: wall(t, 0.0), n_elements)
    north = fit_curve(lambda t: wall(1 - t, width), n_elements)
    east = _segment((length, 0.0), (length, width))
    west = _segment((0.0, width), (0.0, 0.0))
    return BoundaryData(south, east, north, west, name="tube")


GEOMETRIES = {
    "square": square,
    "skewed_quad": skewed_quad,
    "quarter_annulus": quarter_annulus,
    "horseshoe": horseshoe,
    "tube": tube,
}


def get_geometry(name: str) -> BoundaryData:
    try:
        return GEOMETRIES[name]()
    except KeyError:
        raise KeyError("unknown geometry %r; choose from %s" % (name, sorted(GEOMETRIES))) from None
