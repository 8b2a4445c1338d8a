"""Parameterization quality functionals and bijectivity scans."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import BijectivityError, default_order, field_on, quadrature, tabulate
from .thb import GeometryMap

__all__ = [
    "FUNCTIONALS",
    "QualityReport",
    "pointwise",
    "evaluate",
    "bijectivity_scan",
]

FUNCTIONALS = ("W", "Area", "Length", "Uniformity", "Liao", "ML", "Orthogonality",
               "AreaOrthogonality", "Eccentricity")
_NEEDS_BIJECTIVE = ("W", "ML")
_NEEDS_HESSIAN = ("Uniformity", "Eccentricity")


def pointwise(name: str, jac, hess=None):
    """Integrand ``Q_name`` from Jacobians ``(..., 2, 2)`` and Hessians ``(..., 2, 3)``."""
    g11 = jac[..., 0, 0] ** 2 + jac[..., 1, 0] ** 2
    g22 = jac[..., 0, 1] ** 2 + jac[..., 1, 1] ** 2
    g12 = jac[..., 0, 0] * jac[..., 0, 1] + jac[..., 1, 0] * jac[..., 1, 1]
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if name == "Length":
        return g11 + g22
    if name == "Liao":
        return g11 ** 2 + 2 * g12 ** 2 + g22 ** 2
    if name == "Area":
        return det ** 2
    if name == "Orthogonality":
        return g12 ** 2
    if name == "AreaOrthogonality":
        return g11 * g22
    if name == "W":
        return (g11 + g22) / det
    if name == "ML":
        return ((g11 + g22) / det) ** 2
    if name == "Uniformity":
        return (hess ** 2 * np.array([1.0, 2.0, 1.0])).sum(axis=(-1, -2))
    if name == "Eccentricity":
        a = (jac[..., :, 0] * hess[..., :, 0]).sum(-1) / g11
        b = (jac[..., :, 1] * hess[..., :, 2]).sum(-1) / g22
        return a ** 2 + b ** 2
    raise KeyError("unknown functional %r" % name)


@dataclass
class QualityReport:
    """Integrated functionals plus Jacobian-determinant statistics over the quadrature set."""

    values: dict = field(default_factory=dict)
    min_det: float = np.nan
    max_det: float = np.nan
    n_negative: int = 0
    ndof: int = 0

    def to_dict(self) -> dict:
        return {"values": {("L_" + k): v for k, v in self.values.items()},
                "min_det": self.min_det, "max_det": self.max_det,
                "n_negative": self.n_negative, "ndof": self.ndof}

    def table(self) -> str:
        rows = [("L_" + k, "%.10g" % v) for k, v in self.values.items()]
        rows += [("min det J", "%.6g" % self.min_det), ("max det J", "%.6g" % self.max_det),
                 ("|Xi_-|", str(self.n_negative)), ("DOFs", str(self.ndof))]
        w = max(len(r[0]) for r in rows)
        return "\n".join("%-*s  %s" % (w, a, b) for a, b in rows)


def _element_selection(mesh, restrict):
    if restrict is None:
        return np.ones(mesh.n_elements, dtype=bool)
    x0, x1, y0, y1 = restrict
    b = mesh.element_bounds()
    cx = 0.5 * (b[:, 0] + b[:, 1])
    cy = 0.5 * (b[:, 2] + b[:, 3])
    return (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)


def evaluate(x: GeometryMap, which=FUNCTIONALS, restrict=None, q: int | None = None) -> QualityReport:
    """Integrals of the requested functionals over the (optionally restricted) unit square.

    ``restrict = (xi0, xi1, eta0, eta1)`` keeps the elements whose centres
    lie in the rectangle, so the region always snaps to element boundaries.
    """
    which = tuple(which)
    for name in which:
        if name not in FUNCTIONALS:
            raise KeyError("unknown functional %r" % name)
    if any(n in _NEEDS_HESSIAN for n in which) and x.space.regularity < 1:
        raise ValueError("Uniformity/Eccentricity need a C1 map (regularity >= 1)")
    quad = quadrature(x.space.mesh, default_order(x.space) if q is None else q)
    _, jac, hess = field_on(tabulate(x.space, quad), x.coeffs)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    sel = _element_selection(x.space.mesh, restrict)
    w = quad.weights[sel]
    rep = QualityReport(min_det=float(det.min()), max_det=float(det.max()),
                        n_negative=int((det < 0).sum()), ndof=x.space.ndof)
    for name in which:
        if name in _NEEDS_BIJECTIVE and rep.min_det <= 0:
            raise BijectivityError("L_%s undefined: det J <= 0 at a quadrature point" % name)
        rep.values[name] = float((pointwise(name, jac[sel], hess[sel]) * w).sum())
    return rep


def bijectivity_scan(x: GeometryMap, q: int | None = None):
    """``(min det J, points of Xi_-)`` over the quadrature set of ``x``."""
    quad = quadrature(x.space.mesh, default_order(x.space) if q is None else q)
    _, jac, _ = field_on(tabulate(x.space, quad), x.coeffs)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    neg = det < 0
    return float(det.min()), quad.points[neg]
