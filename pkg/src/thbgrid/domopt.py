"""Control maps of the parametric domain.

A control map ``s: (0,1)^2 -> (0,1)^2`` turns the elliptic grid equations
into ``A(x) : (H(x_i) + P1 dx_i/dxi + P2 dx_i/deta) det T = 0`` whose
solution approximates ``x* o s``.  This module builds such maps in several
ways: by an anisotropic-diffusion solve (maximum principle), by constrained
minimization of pulled-back quality functionals, and by the harmonic
construction that makes the recomputed map orthogonal at two opposite sides.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear

from .assembly import (BijectivityError, _interior_map, _scatter_matrix, _solve, default_order, field_on,
                       gauss_legendre, l2_project, map_on, mass_matrix, pack, quadrature, tabulate,
                       trace_projection, unpack)
from .quality import FUNCTIONALS, bijectivity_scan
from .solvers import SolverConfig, solve
from .thb import GeometryMap, ThbSpace, identity_map, prolong

__all__ = [
    "CONSTRAINT_KINDS",
    "CONE_MARGIN",
    "ControlMap",
    "CostTerm",
    "ConstraintSet",
    "OptimizeReport",
    "control_matrices",
    "maxprinciple_reparam",
    "parse_cost",
    "boundary_layer_weight",
    "bezier_constraint",
    "coarse_slack_constraint",
    "pointwise_constraint",
    "cone_constraint",
    "make_constraint",
    "constraint_value_and_gradient",
    "domain_cost",
    "optimize_domain",
    "optimize_geometry_direct",
    "hermite_blend",
    "boundary_orth_pipeline",
    "sprime_postprocess",
    "recompute",
]

CONSTRAINT_KINDS = ("bezier", "coarse-slack", "pointwise", "cone")
CONE_MARGIN = 1e-3
_DET_TINY = 1e-14
_FIRST_ORDER = ("W", "Area", "Length", "Liao", "ML", "Orthogonality", "AreaOrthogonality")


# control maps -----------------------------------------------------------------

def _control_from(T, H):
    """``(P1, P2, det T)`` from Jacobians ``T (...,2,2)`` and Hessians ``H (...,2,3)``."""
    det = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
    inv = np.empty_like(T)
    inv[..., 0, 0] = T[..., 1, 1]
    inv[..., 0, 1] = -T[..., 0, 1]
    inv[..., 1, 0] = -T[..., 1, 0]
    inv[..., 1, 1] = T[..., 0, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = inv / det[..., None, None]
    # p^{ij} = -T^{-1} d2s/dxi_i dxi_j; P^k_{ij} is its k-th component
    p = -np.einsum("...kc,...cm->...km", inv, H)
    return p[..., 0, :], p[..., 1, :], det


def control_matrices(s, pts):
    """``(P1, P2, det T)`` of a control map at points ``pts (n, 2)``.

    ``P1`` and ``P2`` are symmetric and stored as ``(n, 3)`` arrays
    ``(m11, m12, m22)``.
    """
    g = s.gmap if isinstance(s, ControlMap) else s
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    r = g.space.evaluate(g.coeffs, pts[:, 0], pts[:, 1], 2)
    T = np.stack([r[:, 1], r[:, 2]], axis=-1)
    H = np.moveaxis(r[:, 3:6], 1, 2)
    P1, P2, det = _control_from(T, H)
    bad = np.abs(det) <= _DET_TINY
    if bad.any():
        i = int(np.argmax(bad))
        raise BijectivityError("singular control Jacobian at (%.6f, %.6f)" % tuple(pts[i]))
    return P1, P2, det


class ControlMap:
    """Map of the unit square onto itself, used to steer the grid equations.

    Quadrature data ``(P1, P2, det T)`` are cached per quadrature rule.  With
    ``identity_trace=True`` (the default) the boundary correspondence is
    checked to be the identity.
    """

    def __init__(self, gmap: GeometryMap, identity_trace: bool = True, check: bool = True):
        self.gmap = gmap
        self.identity_trace = bool(identity_trace)
        self._cache = {}
        if identity_trace and check:
            t = np.linspace(0.0, 1.0, 41)
            z, o = np.zeros_like(t), np.ones_like(t)
            pts = np.concatenate([np.column_stack(a) for a in ((t, z), (o, t), (t, o), (z, t))])
            err = float(np.abs(gmap(pts) - pts).max())
            if err > 1e-12:
                raise ValueError("control map trace deviates from the identity by %.3e" % err)

    @property
    def space(self) -> ThbSpace:
        return self.gmap.space

    @property
    def coeffs(self) -> np.ndarray:
        return self.gmap.coeffs

    def __call__(self, pts):
        return self.gmap(pts)

    def quadrature_data(self, quad):
        key = (id(quad.mesh), quad.order)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is quad:
            return hit[1]
        _, T, H = map_on(self.gmap, quad)
        P1, P2, det = _control_from(T, H)
        if np.any(np.abs(det) <= _DET_TINY):
            e, k = np.unravel_index(np.argmin(np.abs(det)), det.shape)
            raise BijectivityError("singular control Jacobian at (%.6f, %.6f)" % tuple(quad.points[e, k]))
        out = (P1, P2, det)
        for a in out:
            a.setflags(write=False)
        self._cache[key] = (quad, out)
        return out

    def min_det(self, q: int | None = None) -> float:
        return bijectivity_scan(self.gmap, q)[0]

    @classmethod
    def identity(cls, space: ThbSpace) -> "ControlMap":
        return cls(identity_map(space))


def _fold_check(gmap, what, advice):
    mn, neg = bijectivity_scan(gmap)
    if mn <= 0:
        raise BijectivityError("%s folds: det T = %.3e at %d quadrature points; %s"
                               % (what, mn, len(neg), advice))


def _diffusion_solve(space, quad, K, bcoeffs):
    """Solve ``div(K grad u_c) = 0`` for both components with boundary coefficients ``bcoeffs``.

    ``K`` is the ``(ne, nq, 2, 2)`` tensor in parametric coordinates,
    already multiplied by the quadrature weights.
    """
    tab = tabulate(space, quad)
    E = np.einsum("eqad,eqdf,eqbf->eab", tab.grad, K, tab.grad, optimize=True)
    A = _scatter_matrix(tab, tab, E, (space.ndof, space.ndof)).tocsr()
    I, B = space.interior_dofs, space.boundary_dofs
    out = np.zeros((space.ndof, 2))
    out[B] = bcoeffs
    out[I] = _solve(A[I][:, I], -(A[I][:, B] @ out[B]))
    return out


def maxprinciple_reparam(x_star: GeometryMap, k: float, space_s: ThbSpace | None = None,
                         q: int | None = None) -> ControlMap:
    """Control map from ``div((det dx*/dxi)^k grad s_i) = 0`` with ``s = xi`` on the boundary.

    Larger ``k`` contracts the parametric domain where ``x*`` has large
    cells.  ``k = 0`` returns the identity.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    space_s = x_star.space if space_s is None else space_s
    ident = identity_map(space_s)
    if k == 0:
        return ControlMap(ident)
    quad = quadrature(space_s.mesh, default_order(space_s) + 1 if q is None else q)
    _, Jx, _ = map_on(x_star, quad)
    det = Jx[..., 0, 0] * Jx[..., 1, 1] - Jx[..., 0, 1] * Jx[..., 1, 0]
    if np.any(det <= 0):
        raise BijectivityError("x_star folds; the diffusivity (det J)^k needs det J > 0")
    D = (det ** k * quad.weights)[..., None, None] * np.eye(2)
    c = _diffusion_solve(space_s, quad, D, ident.coeffs[space_s.boundary_dofs])
    s = GeometryMap(space_s, c)
    _fold_check(s, "control map", "reduce k")
    return ControlMap(s)


# quality integrands and their Jacobian derivatives -------------------------------

def _metric_terms(J):
    g11 = J[..., 0, 0] ** 2 + J[..., 1, 0] ** 2
    g22 = J[..., 0, 1] ** 2 + J[..., 1, 1] ** 2
    g12 = J[..., 0, 0] * J[..., 0, 1] + J[..., 1, 0] * J[..., 1, 1]
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    z = np.zeros_like(g11)
    dg11 = np.stack([np.stack([2 * J[..., 0, 0], z], -1), np.stack([2 * J[..., 1, 0], z], -1)], -2)
    dg22 = np.stack([np.stack([z, 2 * J[..., 0, 1]], -1), np.stack([z, 2 * J[..., 1, 1]], -1)], -2)
    dg12 = np.stack([np.stack([J[..., 0, 1], J[..., 0, 0]], -1),
                     np.stack([J[..., 1, 1], J[..., 1, 0]], -1)], -2)
    ddet = np.stack([np.stack([J[..., 1, 1], -J[..., 1, 0]], -1),
                     np.stack([-J[..., 0, 1], J[..., 0, 0]], -1)], -2)
    return g11, g12, g22, det, dg11, dg12, dg22, ddet


def _q_first_order(name, J):
    """Integrand ``Q(J)`` and ``dQ/dJ`` for the functionals that only see the Jacobian."""
    g11, g12, g22, det, dg11, dg12, dg22, ddet = _metric_terms(J)
    e = lambda a: a[..., None, None]  # noqa: E731
    if name == "Length":
        return g11 + g22, dg11 + dg22
    if name == "Liao":
        return (g11 ** 2 + 2 * g12 ** 2 + g22 ** 2,
                e(2 * g11) * dg11 + e(4 * g12) * dg12 + e(2 * g22) * dg22)
    if name == "Area":
        return det ** 2, e(2 * det) * ddet
    if name == "Orthogonality":
        return g12 ** 2, e(2 * g12) * dg12
    if name == "AreaOrthogonality":
        return g11 * g22, e(g22) * dg11 + e(g11) * dg22
    if name in ("W", "ML"):
        with np.errstate(divide="ignore", invalid="ignore"):
            W = (g11 + g22) / det
            dW = (dg11 + dg22) / e(det) - e(W / det) * ddet
        if name == "W":
            return W, dW
        return W ** 2, e(2 * W) * dW
    raise KeyError(name)


def _q_second_order(name, J, H):
    """``(Q, dQ/dJ, dQ/dH)`` for Uniformity and Eccentricity; ``dQ/dH`` is ``(...,2,3)``."""
    if name == "Uniformity":
        w = np.array([1.0, 2.0, 1.0])
        return (H ** 2 * w).sum(axis=(-1, -2)), np.zeros_like(J), 2.0 * H * w
    if name == "Eccentricity":
        g11 = J[..., 0, 0] ** 2 + J[..., 1, 0] ** 2
        g22 = J[..., 0, 1] ** 2 + J[..., 1, 1] ** 2
        Pa = (J[..., :, 0] * H[..., :, 0]).sum(-1)
        Pb = (J[..., :, 1] * H[..., :, 2]).sum(-1)
        a, b = Pa / g11, Pb / g22
        dJ = np.zeros_like(J)
        dJ[..., :, 0] = 2 * a[..., None] * (H[..., :, 0] / g11[..., None]
                                            - 2 * Pa[..., None] * J[..., :, 0] / (g11 ** 2)[..., None])
        dJ[..., :, 1] = 2 * b[..., None] * (H[..., :, 2] / g22[..., None]
                                            - 2 * Pb[..., None] * J[..., :, 1] / (g22 ** 2)[..., None])
        dH = np.zeros_like(H)
        dH[..., :, 0] = 2 * a[..., None] * J[..., :, 0] / g11[..., None]
        dH[..., :, 2] = 2 * b[..., None] * J[..., :, 1] / g22[..., None]
        return a ** 2 + b ** 2, dJ, dH
    raise KeyError(name)


# cost specifications -----------------------------------------------------------

@dataclass(frozen=True)
class CostTerm:
    """One weighted term of a cost ``sum_i lambda_i Q_i``.

    ``composite=True`` evaluates the functional on ``x* o s`` through the
    pulled-back metric; otherwise it acts on the optimized map itself (a
    regularizer when optimizing a control map).  ``weight`` is a constant or
    a callable of parametric points ``(n, 2) -> (n,)``.
    """

    name: str
    weight: object = 1.0
    composite: bool = True

    def __post_init__(self):
        if self.name not in FUNCTIONALS:
            raise KeyError("unknown functional %r" % self.name)
        if self.composite and self.name not in _FIRST_ORDER:
            raise ValueError("%s is only available as a plain regularizer" % self.name)

    def weights_at(self, pts) -> np.ndarray:
        if callable(self.weight):
            return np.asarray(self.weight(pts), dtype=float)
        return np.full(len(pts), float(self.weight))


def boundary_layer_weight(lmax: float, delta: float, sides=("south", "north")):
    """``1 + lmax exp(-dist / delta)`` with ``dist`` the parametric distance to ``sides``."""
    def weight(pts):
        pts = np.atleast_2d(pts)
        d = np.full(len(pts), np.inf)
        for side in sides:
            dd = {"south": pts[:, 1], "north": 1 - pts[:, 1],
                  "west": pts[:, 0], "east": 1 - pts[:, 0]}[side]
            d = np.minimum(d, dd)
        return 1.0 + lmax * np.exp(-d / delta)
    return weight


def parse_cost(text: str, composite_default: bool = True) -> tuple:
    """Parse ``"Area^s:1,Uniformity:0.1"`` into cost terms.

    A ``^s`` suffix marks a pulled-back term, a bare name a plain term; with
    ``composite_default`` bare names of first-order functionals are taken as
    pulled back.
    """
    terms = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        name, _, w = item.partition(":")
        name = name.strip()
        weight = float(w) if w else 1.0
        if name.endswith("^s"):
            terms.append(CostTerm(name[:-2], weight, True))
        else:
            comp = composite_default and name in _FIRST_ORDER
            terms.append(CostTerm(name, weight, comp))
    if not terms:
        raise ValueError("empty cost specification")
    return tuple(terms)


class _Cost:
    """Cost ``sum_i int lambda_i Q_i`` of a map on ``space`` and its coefficient gradient."""

    def __init__(self, terms, space, x_star=None, q=None):
        self.terms = tuple(terms)
        if any(t.composite for t in self.terms) and x_star is None:
            raise ValueError("pulled-back terms need the reference map x_star")
        self.space, self.x_star = space, x_star
        self._xloc = None
        self.quad = quadrature(space.mesh, default_order(space) + 1 if q is None else q)
        self.tab = tabulate(space, self.quad)
        pts = self.quad.flat_points()
        shape = self.quad.weights.shape
        self.w = [t.weights_at(pts).reshape(shape) * self.quad.weights for t in self.terms]

    def __call__(self, coeffs, gradient=True):
        tab = self.tab
        _, T, Hs = field_on(tab, coeffs)
        ne, nq = T.shape[:2]
        A = np.zeros((ne, nq, 2))
        B = np.zeros((ne, nq, 2, 2))
        C = np.zeros((ne, nq, 2, 3))
        value = 0.0
        comp = None
        for term, w in zip(self.terms, self.w):
            if term.composite:
                if comp is None:
                    comp = self._composite(coeffs, T)
                    if comp is None:
                        return np.inf, None
                Jx, Hx4, Js = comp
                Q, G = _q_first_order(term.name, Js)
                if not np.all(np.isfinite(Q)):
                    return np.inf, None
                value += float((Q * w).sum())
                if gradient:
                    Gw = G * w[..., None, None]
                    GT = np.einsum("eqmj,eqdj->eqmd", Gw, T)
                    A += np.einsum("eqmdc,eqmd->eqc", Hx4, GT)
                    B += np.einsum("eqmc,eqmj->eqcj", Jx, Gw)
            elif term.name in _FIRST_ORDER:
                Q, G = _q_first_order(term.name, T)
                if not np.all(np.isfinite(Q)):
                    return np.inf, None
                value += float((Q * w).sum())
                if gradient:
                    B += G * w[..., None, None]
            else:
                Q, GJ, GH = _q_second_order(term.name, T, Hs)
                value += float((Q * w).sum())
                if gradient:
                    B += GJ * w[..., None, None]
                    C += GH * w[..., None, None]
        if not gradient:
            return value, None
        contrib = (np.einsum("eqk,eqc->ekc", tab.val, A)
                   + np.einsum("eqkd,eqcd->ekc", tab.grad, B)
                   + np.einsum("eqkm,eqcm->ekc", tab.hess, C))
        n = self.space.ndof
        grad = np.stack([np.bincount(tab.idx.ravel(), weights=contrib[..., c].ravel(), minlength=n)
                         for c in range(2)], axis=-1)
        return value, grad

    def _composite(self, coeffs, T):
        """Jacobian and Hessian of ``x*`` at ``s(xi)`` and the composite Jacobian."""
        sv = np.einsum("eqk,ekc->eqc", self.tab.val, np.asarray(coeffs)[self.tab.idx])
        if sv.min() < -1e-12 or sv.max() > 1 + 1e-12:
            return None
        p = np.clip(sv.reshape(-1, 2), 0.0, 1.0)
        if self._xloc is None:
            self._xloc = self.x_star.space.element_coefficients(self.x_star.coeffs)
        r = self.x_star.space.evaluate(self.x_star.coeffs, p[:, 0], p[:, 1], 2, local=self._xloc)
        shape = sv.shape[:2]
        Jx = np.stack([r[:, 1], r[:, 2]], axis=-1).reshape(shape + (2, 2))
        Hs = np.moveaxis(r[:, 3:6], 1, 2).reshape(shape + (2, 3))
        sym = np.array([[0, 1], [1, 2]])
        Hx4 = Hs[..., sym]
        Js = np.einsum("eqmd,eqdj->eqmj", Jx, T)
        return Jx, Hx4, Js


def domain_cost(terms, s, x_star=None, q=None) -> float:
    """Value of a cost specification for a map (control map or geometry map)."""
    g = s.gmap if isinstance(s, ControlMap) else s
    return _Cost(terms, g.space, x_star, q)(g.coeffs, gradient=False)[0]


# constraints --------------------------------------------------------------------

@dataclass(eq=False)
class ConstraintSet:
    """Constraints ``C(c) >= 0`` on the interior coefficients of a map.

    The first ``n_eq`` entries of the value vector are equalities (``= 0``),
    the rest inequalities required to stay strictly positive.  ``n_slack``
    extra variables follow the packed interior coefficients.
    """

    kind: str
    space: ThbSpace
    data: dict = field(default_factory=dict)
    n_eq: int = 0
    n_slack: int = 0

    def initial_slack(self, gmap) -> np.ndarray:
        if self.n_slack == 0:
            return np.zeros(0)
        f, _ = _det_moments(gmap, self.data["tab_c"], self.data["tab_s"], gradient=False)
        return _solve(self.data["M"], f)

    def feasible(self, values) -> bool:
        return bool(np.all(values[self.n_eq:] > 0))


def _det_and_cof(T):
    det = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
    cof = np.empty_like(T)
    cof[..., 0, 0] = T[..., 1, 1]
    cof[..., 0, 1] = -T[..., 1, 0]
    cof[..., 1, 0] = -T[..., 0, 1]
    cof[..., 1, 1] = T[..., 0, 0]
    return det, cof


def _bernstein(r, x):
    from scipy.special import comb
    k = np.arange(r + 1)
    return comb(r, k) * x[:, None] ** k * (1 - x[:, None]) ** (r - k)


def bezier_constraint(space: ThbSpace) -> ConstraintSet:
    """Positivity of the Bezier weights of ``det T`` projected onto discontinuous degree ``2p-1``.

    The element mass matrices are scaled copies of one reference matrix, so
    ``d = M^{-1} f`` is applied element by element through the reference
    operator ``R = M_ref^{-1} B^T W_ref``.
    """
    p = space.degree
    r = 2 * p - 1
    q = 2 * p
    x, w = gauss_legendre(q)
    b = _bernstein(r, x)
    B = np.einsum("ia,jb->ijab", b, b).reshape(q * q, (r + 1) ** 2)
    W = np.outer(w, w).ravel()
    M = B.T @ (B * W[:, None])
    R = np.linalg.solve(M, B.T * W[None, :])
    quad = quadrature(space.mesh, q)
    return ConstraintSet("bezier", space, {"R": R, "tab": tabulate(space, quad), "M_ref": M})


def coarse_slack_constraint(space: ThbSpace) -> ConstraintSet:
    """``f(s) - M e = 0`` with ``e > 0``: projection of ``det T`` onto degree ``2p-1``, regularity ``alpha-1``."""
    if space.regularity < 1:
        raise ValueError("the coarse-slack constraint needs regularity >= 1")
    coarse = ThbSpace(space.mesh, 2 * space.degree - 1, space.regularity - 1)
    quad = quadrature(space.mesh, 2 * space.degree)
    M = mass_matrix(coarse, 2 * space.degree).tocsc()
    return ConstraintSet("coarse-slack", space,
                         {"coarse": coarse, "M": M, "tab_c": tabulate(coarse, quad),
                          "tab_s": tabulate(space, quad)},
                         n_eq=coarse.ndof, n_slack=coarse.ndof)


def _element_samples(mesh, per_element):
    m = int(round(np.sqrt(per_element)))
    if m * m != per_element:
        raise ValueError("per_element must be a perfect square")
    t = (np.arange(m) + 0.5) / m
    b = mesh.element_bounds()
    u = b[:, 0][:, None] + (b[:, 1] - b[:, 0])[:, None] * np.repeat(t, m)[None, :]
    v = b[:, 2][:, None] + (b[:, 3] - b[:, 2])[:, None] * np.tile(t, m)[None, :]
    return np.column_stack([u.ravel(), v.ravel()])


def pointwise_constraint(space: ThbSpace, points=None, lower=None, upper=None, reference=None,
                         alpha_l: float = 0.05, alpha_u: float = 4.0, per_element: int = 36) -> ConstraintSet:
    """``lower <= det J(c) <= upper`` at sample points.

    Without explicit bounds they are ``alpha_l`` and ``alpha_u`` times the
    determinant of ``reference`` (the identity when ``reference`` is None).
    """
    pts = _element_samples(space.mesh, per_element) if points is None else np.atleast_2d(points)
    if lower is None or upper is None:
        if reference is None:
            d = np.ones(len(pts))
        else:
            r = reference.space.evaluate(reference.coeffs, pts[:, 0], pts[:, 1], 1)
            d = r[:, 1, 0] * r[:, 2, 1] - r[:, 2, 0] * r[:, 1, 1]
            if np.any(d <= 0):
                raise BijectivityError("reference map folds at a sample point")
        lower = alpha_l * d if lower is None else np.broadcast_to(lower, d.shape).astype(float)
        upper = alpha_u * d if upper is None else np.broadcast_to(upper, d.shape).astype(float)
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if np.any(lower < 0) or np.any(lower > upper):
        raise ValueError("bounds must satisfy 0 <= lower <= upper")
    idx, vals = space.tabulate_points(pts[:, 0], pts[:, 1], 1)
    return ConstraintSet("pointwise", space, {"points": pts, "lower": lower, "upper": upper,
                                              "idx": idx, "vals": vals})


def _tensor_level(space):
    """The single level carrying all active functions, or None."""
    lv = np.unique(space.dof_level)
    if len(lv) != 1 or space.ndof != space.n_fun[lv[0]] ** 2:
        return None
    return int(lv[0])


def cone_constraint(space: ThbSpace, margin: float = CONE_MARGIN) -> ConstraintSet:
    """Linear cone constraint on control-net differences of a tensor-product map.

    Row differences must stay in the sector ``|theta| < atan(1 - margin)``
    around ``(1, 0)`` and column differences in the sector around ``(0, 1)``.
    """
    lv = _tensor_level(space)
    if lv is None:
        raise ValueError("the cone constraint needs a tensor-product (single-level) space")
    n = space.n_fun[lv]
    dof = np.empty(n * n, dtype=np.int64)
    dof[space.dof_tensor] = np.arange(space.ndof)
    grid = dof.reshape(n, n)
    a1, b1 = grid[1:, :].ravel(), grid[:-1, :].ravel()
    a2, b2 = grid[:, 1:].ravel(), grid[:, :-1].ravel()
    m = len(a1)
    rows = np.arange(m)
    D1 = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)], (np.r_[rows, rows], np.r_[a1, b1])),
                       shape=(m, space.ndof))
    D2 = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)], (np.r_[rows, rows], np.r_[a2, b2])),
                       shape=(m, space.ndof))
    k = 1.0 - margin
    # acting on the stacked component vector [c_x; c_y]
    G = sp.bmat([[k * D1, -D1], [k * D1, D1], [-D2, k * D2], [D2, k * D2]]).tocsr()
    I = space.interior_dofs
    cols = np.r_[I, space.ndof + I]
    return ConstraintSet("cone", space, {"G": G, "G_int": G[:, cols].tocsr(), "margin": margin})


def make_constraint(kind: str, space: ThbSpace, **kwargs) -> ConstraintSet:
    if kind == "bezier":
        return bezier_constraint(space)
    if kind == "coarse-slack":
        return coarse_slack_constraint(space)
    if kind == "pointwise":
        return pointwise_constraint(space, **kwargs)
    if kind == "cone":
        return cone_constraint(space, **kwargs)
    raise ValueError("constraint kind must be one of %s" % (CONSTRAINT_KINDS,))


def _det_moments(gmap, tab_test, tab_map, gradient=True):
    """``f_i = int phi_i det J`` over the test tabulation and its interior-coefficient Jacobian."""
    space = tab_map.space
    _, T, _ = field_on(tab_map, gmap.coeffs)
    det, cof = _det_and_cof(T)
    w = tab_test.quad.weights
    f = np.bincount(tab_test.idx.ravel(), weights=np.einsum("eqi,eq->ei", tab_test.val, det * w).ravel(),
                    minlength=tab_test.space.ndof)
    if not gradient:
        return f, None
    m = _interior_map(space)
    nI = len(space.interior_dofs)
    blocks = []
    for c in range(2):
        E = np.einsum("eqi,eqkd,eqd,eq->eik", tab_test.val, tab_map.grad, cof[..., c, :], w, optimize=True)
        blocks.append(_scatter_matrix(tab_test, tab_map, E, (tab_test.space.ndof, 2 * nI),
                                      col_map=m, col_off=c * nI).tocsr())
    return f, (blocks[0] + blocks[1]).tocsr()


def constraint_value_and_gradient(c: ConstraintSet, s, slack=None):
    """Constraint values and their sparse Jacobian w.r.t. ``[packed interior coefficients, slack]``.

    ``s`` is a :class:`ControlMap` or a :class:`GeometryMap` on ``c.space``.
    """
    g = s.gmap if isinstance(s, ControlMap) else s
    space = c.space
    if not g.space.compatible(space):
        raise ValueError("map does not live on the constraint space")
    nI = len(space.interior_dofs)
    if c.kind == "bezier":
        tab = c.data["tab"]
        R = c.data["R"]
        _, T, _ = field_on(tab, g.coeffs)
        det, cof = _det_and_cof(T)
        ne = det.shape[0]
        nb = R.shape[0]
        vals = np.einsum("iq,eq->ei", R, det).ravel()
        m = _interior_map(space)
        r_all, c_all, v_all = [], [], []
        rows = np.arange(ne * nb).reshape(ne, nb)
        for comp in range(2):
            E = np.einsum("iq,eqkd,eqd->eik", R, tab.grad, cof[..., comp, :], optimize=True)
            cc = m[tab.idx]
            rr = np.broadcast_to(rows[:, :, None], E.shape)
            col = np.broadcast_to(cc[:, None, :], E.shape)
            keep = (col >= 0) & (E != 0)
            r_all.append(rr[keep])
            c_all.append(col[keep] + comp * nI)
            v_all.append(E[keep])
        jac = sp.coo_matrix((np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))),
                            shape=(ne * nb, 2 * nI)).tocsr()
        return vals, jac
    if c.kind == "coarse-slack":
        e = c.initial_slack(g) if slack is None else np.asarray(slack, dtype=float)
        f, df = _det_moments(g, c.data["tab_c"], c.data["tab_s"])
        M = c.data["M"]
        vals = np.concatenate([f - M @ e, e])
        n = len(e)
        jac = sp.bmat([[df, -M], [None, sp.identity(n)]]).tocsr()
        return vals, jac
    if c.kind == "pointwise":
        d = c.data
        vv = d["vals"]
        cc = np.asarray(g.coeffs)[d["idx"]]
        T = np.stack([np.einsum("mk,mkc->mc", vv[:, 1], cc), np.einsum("mk,mkc->mc", vv[:, 2], cc)], axis=-1)
        det, cof = _det_and_cof(T)
        vals = np.concatenate([det - d["lower"], d["upper"] - det])
        m = _interior_map(space)
        npt = len(det)
        col = m[d["idx"]]
        keep = col >= 0
        r_all, c_all, v_all = [], [], []
        for comp in range(2):
            dd = vv[:, 1] * cof[:, comp, 0:1] + vv[:, 2] * cof[:, comp, 1:2]
            rr = np.broadcast_to(np.arange(npt)[:, None], dd.shape)
            for sign, off in ((1.0, 0), (-1.0, npt)):
                r_all.append(rr[keep] + off)
                c_all.append(col[keep] + comp * nI)
                v_all.append(sign * dd[keep])
        jac = sp.coo_matrix((np.concatenate(v_all), (np.concatenate(r_all), np.concatenate(c_all))),
                            shape=(2 * npt, 2 * nI)).tocsr()
        return vals, jac
    if c.kind == "cone":
        cvec = np.concatenate([g.coeffs[:, 0], g.coeffs[:, 1]])
        return c.data["G"] @ cvec, c.data["G_int"]
    raise ValueError("unknown constraint kind %r" % c.kind)


# augmented-Lagrangian optimizer ------------------------------------------------------

@dataclass
class OptimizeReport:
    """Outcome of a constrained minimization; ``iterations`` holds one record per accepted step."""

    iterations: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    initial_cost: float = np.nan
    final_cost: float = np.nan
    kkt: float = np.nan
    all_feasible: bool = True
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged, "message": self.message,
                "initial_cost": self.initial_cost, "final_cost": self.final_cost, "kkt": self.kkt,
                "all_feasible": self.all_feasible, "warnings": list(self.warnings)}


def _al_terms(vals, jac, n_eq, lam, rho):
    """Augmented-Lagrangian penalty value and gradient for ``h = 0`` and ``c >= 0``."""
    h, cc = vals[:n_eq], vals[n_eq:]
    le, li = lam[:n_eq], lam[n_eq:]
    val = float(-(le * h).sum() + 0.5 * rho * (h ** 2).sum())
    coef = np.empty_like(vals)
    coef[:n_eq] = -le + rho * h
    act = cc <= li / rho
    val += float((-li[act] * cc[act] + 0.5 * rho * cc[act] ** 2).sum() - (li[~act] ** 2).sum() / (2 * rho))
    coef[n_eq:] = np.where(act, -li + rho * cc, 0.0)
    return val, jac.T @ coef


def _multiplier_estimate(grad_f, vals, jac, n_eq, act_tol):
    """Least-squares multipliers on equalities and nearly active inequalities (sign-constrained)."""
    act = np.r_[np.ones(n_eq, dtype=bool), vals[n_eq:] <= act_tol]
    lam = np.zeros(len(vals))
    idx = np.nonzero(act)[0]
    if len(idx) == 0:
        return lam
    A = jac[idx].T.toarray()
    lb = np.where(idx < n_eq, -np.inf, 0.0)
    res = lsq_linear(A, grad_f, bounds=(lb, np.full(len(idx), np.inf)), method="bvls")
    lam[idx] = res.x
    return lam


def _kkt_residual(grad_f, vals, jac, n_eq, lam):
    scale = max(1.0, float(np.abs(grad_f).max()))
    stat = float(np.abs(grad_f - jac.T @ lam).max()) / scale
    eq = float(np.abs(vals[:n_eq]).max(initial=0.0))
    infeas = max(0.0, -float(vals[n_eq:].min(initial=0.0)))
    comp = float(np.abs(lam[n_eq:] * vals[n_eq:]).max(initial=0.0)) / scale
    return max(stat, eq, infeas, comp)


def _lbfgs_direction(G, S, Y):
    if not S:
        return -G
    qv = G.copy()
    alph = []
    for s_, y_ in reversed(list(zip(S, Y))):
        a = (s_ @ qv) / (y_ @ s_)
        alph.append(a)
        qv -= a * y_
    qv *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s_, y_), a in zip(zip(S, Y), reversed(alph)):
        qv += (a - (y_ @ qv) / (y_ @ s_)) * s_
    return -qv


def _minimize(fun, cons, z0, n_eq, max_iters, tol, memory=10, max_outer=20, rho0=10.0,
              margin=0.01, callback=None):
    """Feasibility-preserving augmented-Lagrangian method with L-BFGS inner iterations.

    ``fun(z) -> (f, grad)`` and ``cons(z) -> (values, sparse Jacobian)``.
    Inside the Lagrangian each inequality is tightened by ``margin`` times its
    value at ``z0``, which keeps the subproblem minimizers off the true
    boundary.  Trial points violating an untightened inequality are rejected
    by the backtracking line search, so every accepted iterate is feasible.
    ``max_iters`` caps the total number of accepted steps.
    """
    z = z0.copy()
    f, g = fun(z)
    cv, cj = cons(z)
    if not np.all(cv[n_eq:] > 0):
        raise ValueError("the starting point is not strictly feasible")
    report = OptimizeReport(initial_cost=f)
    shift = np.zeros(len(cv))
    shift[n_eq:] = margin * cv[n_eq:]
    lam = np.zeros(len(cv))
    rho = rho0
    act_tol = 1e-3 * max(1.0, float(np.abs(cv[n_eq:]).max(initial=1.0)))
    it = 0
    prev_viol = np.inf
    omega = 1e-2
    for outer in range(max_outer):
        def phi(zz):
            ff, gg = fun(zz)
            if not np.isfinite(ff):
                return np.inf, None, None
            vv, jj = cons(zz)
            pv, pg = _al_terms(vv - shift, jj, n_eq, lam, rho)
            return ff + pv, gg + pg, vv
        P, G, vals = phi(z)
        S, Y = [], []
        history = [P]
        while it < max_iters:
            d = _lbfgs_direction(G, S, Y)
            slope = float(G @ d)
            if slope >= 0:
                d, slope, S, Y = -G, -float(G @ G), [], []
            if -slope <= 1e-30:
                break
            t = 1.0 if S else min(1.0, 1e-2 / max(1e-12, float(np.abs(d).max())))
            accepted = False
            for _ in range(50):
                zt = z + t * d
                Pt, Gt, vt = phi(zt)
                if Gt is not None and np.all(vt[n_eq:] > 0) and Pt <= P + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            s_, y_ = zt - z, Gt - G
            if s_ @ y_ > 1e-12 * np.linalg.norm(s_) * np.linalg.norm(y_):
                S.append(s_)
                Y.append(y_)
                if len(S) > memory:
                    S.pop(0)
                    Y.pop(0)
            dz = float(np.abs(zt - z).max())
            z, P, G, vals = zt, Pt, Gt, vt
            it += 1
            history.append(P)
            f, g = fun(z)
            report.iterations.append({"iteration": it, "outer": outer, "cost": f,
                                      "min_constraint": float(vals[n_eq:].min(initial=np.inf)),
                                      "step": t})
            if callback is not None:
                callback(z, vals)
            if not np.all(vals[n_eq:] > 0):
                report.all_feasible = False
            if dz <= 1e-14 * max(1.0, float(np.abs(z).max())):
                break
            if float(np.abs(G).max()) <= omega * max(1.0, float(np.abs(g).max())):
                break
            # stalled: negligible decrease of the subproblem over the last steps
            if len(history) > 5 and history[-6] - P <= 1e-14 * max(1.0, abs(P)):
                break
        f, g = fun(z)
        cv, cj = cons(z)
        ct = cv - shift
        lam_est = _multiplier_estimate(g, ct, cj, n_eq, act_tol)
        report.kkt = _kkt_residual(g, ct, cj, n_eq, lam_est)
        if report.kkt <= tol:
            report.converged = True
            report.message = "KKT residual %.2e below tolerance" % report.kkt
            break
        if it >= max_iters:
            report.message = "iteration cap reached; KKT residual %.2e" % report.kkt
            report.warnings.append(report.message)
            break
        # first-order multiplier update; raise the penalty when violations persist
        lam[:n_eq] -= rho * ct[:n_eq]
        lam[n_eq:] = np.maximum(lam_est[n_eq:], lam[n_eq:] - rho * ct[n_eq:])
        viol = max(float(np.abs(ct[:n_eq]).max(initial=0.0)),
                   float(np.maximum(0.0, -ct[n_eq:]).max(initial=0.0)))
        if viol > max(0.25 * prev_viol, 0.1 * tol) and rho < 1e8:
            rho *= 10.0
        prev_viol = viol
        omega = max(0.1 * omega, 0.1 * tol)
    else:
        report.message = "outer iteration cap reached; KKT residual %.2e" % report.kkt
        report.warnings.append(report.message)
    report.final_cost = float(fun(z)[0])
    return z, report


def _unpack_vars(space, z, base):
    nI = len(space.interior_dofs)
    return unpack(space, z[:2 * nI], base), z[2 * nI:]


def optimize_domain(x_star: GeometryMap, cost, constraint: ConstraintSet, space_s: ThbSpace | None = None,
                    max_iters: int = 2000, tol: float = 1e-6, max_outer: int = 20):
    """Minimize a (pulled-back) cost over control maps with identity trace.

    Starts from the identity and keeps every accepted iterate feasible.
    Returns ``(ControlMap, OptimizeReport)``.
    """
    space_s = constraint.space if space_s is None else space_s
    if not constraint.space.compatible(space_s):
        raise ValueError("constraint built for a different space")
    terms = parse_cost(cost) if isinstance(cost, str) else tuple(cost)
    if np.any([t.name in ("W", "ML") for t in terms]):
        _fold_check(x_star, "x_star", "a bijective reference map is required")
    elif bijectivity_scan(x_star)[0] <= 0:
        raise BijectivityError("x_star folds")
    ident = identity_map(space_s)
    base = ident.coeffs
    J = _Cost(terms, space_s, x_star)
    z0 = np.concatenate([pack(space_s, base), constraint.initial_slack(ident)])

    def fun(z):
        c, _ = _unpack_vars(space_s, z, base)
        v, gr = J(c)
        if gr is None:
            return np.inf, None
        return v, np.concatenate([pack(space_s, gr), np.zeros(constraint.n_slack)])

    def cons(z):
        c, e = _unpack_vars(space_s, z, base)
        return constraint_value_and_gradient(constraint, GeometryMap(space_s, c),
                                             e if constraint.n_slack else None)

    z, rep = _minimize(fun, cons, z0, constraint.n_eq, max_iters, tol, max_outer=max_outer)
    if not rep.converged:
        warnings.warn(rep.message or "optimization did not reach the KKT tolerance", RuntimeWarning)
    c, _ = _unpack_vars(space_s, z, base)
    s = GeometryMap(space_s, c)
    _fold_check(s, "optimized control map", "use a stricter constraint")
    return ControlMap(s), rep


def optimize_geometry_direct(x_star: GeometryMap, cost, constraint: ConstraintSet,
                             max_iters: int = 2000, tol: float = 1e-6, max_outer: int = 20):
    """Minimize a plain quality cost over the interior control points of ``x_star``.

    Only the Bezier and pointwise constraints apply; ``x_star`` must satisfy
    the chosen constraint.  Returns ``(GeometryMap, OptimizeReport)``.
    """
    if constraint.kind not in ("bezier", "pointwise"):
        raise ValueError("direct optimization supports the bezier and pointwise constraints only")
    if not constraint.space.compatible(x_star.space):
        raise ValueError("constraint built for a different space")
    terms = parse_cost(cost, composite_default=False) if isinstance(cost, str) else tuple(cost)
    if any(t.composite for t in terms):
        raise ValueError("direct optimization takes plain terms only")
    vals, _ = constraint_value_and_gradient(constraint, x_star)
    if not constraint.feasible(vals):
        hint = "; use the pointwise constraint" if constraint.kind == "bezier" else ""
        raise ValueError("x_star violates the %s constraint%s" % (constraint.kind, hint))
    space = x_star.space
    base = x_star.coeffs
    J = _Cost(terms, space)

    def fun(z):
        v, gr = J(unpack(space, z, base))
        if gr is None:
            return np.inf, None
        return v, pack(space, gr)

    def cons(z):
        return constraint_value_and_gradient(constraint, GeometryMap(space, unpack(space, z, base)))

    z, rep = _minimize(fun, cons, pack(space, base), 0, max_iters, tol, max_outer=max_outer)
    if not rep.converged:
        warnings.warn(rep.message or "optimization did not reach the KKT tolerance", RuntimeWarning)
    return GeometryMap(space, unpack(space, z, base)), rep


# boundary orthogonality ----------------------------------------------------------------

def hermite_blend(t):
    """Cubic Hermite blending functions ``(H0, H1)`` on [0, 1]."""
    t = np.asarray(t, dtype=float)
    return (1 + 2 * t) * (1 - t) ** 2, (3 - 2 * t) * t ** 2


def _side_dofs(space, axis, end):
    """DOFs whose functions do not vanish on ``xi_axis = end``."""
    out = []
    for lv in range(space.mesh.n_levels):
        sel = np.arange(space.level_offsets[lv], space.level_offsets[lv + 1])
        ix, iy = np.divmod(space.dof_tensor[sel], space.n_fun[lv])
        k = ix if axis == 0 else iy
        target = 0 if end == 0 else space.n_fun[lv] - 1
        out.append(sel[k == target])
    return np.concatenate(out)


def _laplace_beltrami(x_star, space, axis, q=None):
    """Harmonic ``f`` on ``x_star`` with ``f = 0 / 1`` at ``xi_axis = 0 / 1`` and natural conditions elsewhere."""
    quad = quadrature(space.mesh, default_order(space) + 1 if q is None else q)
    _, J, _ = map_on(x_star, quad)
    g11 = J[..., 0, 0] ** 2 + J[..., 1, 0] ** 2
    g22 = J[..., 0, 1] ** 2 + J[..., 1, 1] ** 2
    g12 = J[..., 0, 0] * J[..., 0, 1] + J[..., 1, 0] * J[..., 1, 1]
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0):
        raise BijectivityError("x_star folds; the surface Laplace problem needs det J > 0")
    K = np.empty(det.shape + (2, 2))
    K[..., 0, 0] = g22 / det
    K[..., 0, 1] = K[..., 1, 0] = -g12 / det
    K[..., 1, 1] = g11 / det
    K *= quad.weights[..., None, None]
    tab = tabulate(space, quad)
    E = np.einsum("eqad,eqdf,eqbf->eab", tab.grad, K, tab.grad, optimize=True)
    A = _scatter_matrix(tab, tab, E, (space.ndof, space.ndof)).tocsr()
    lo, hi = _side_dofs(space, axis, 0), _side_dofs(space, axis, 1)
    fixed = np.union1d(lo, hi)
    free = np.setdiff1d(np.arange(space.ndof), fixed)
    f = np.zeros(space.ndof)
    f[hi] = 1.0
    try:
        f[free] = _solve(A[free][:, free], -(A[free][:, fixed] @ f[fixed]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular surface Laplace system") from exc
    return f


def boundary_orth_pipeline(x_star: GeometryMap, sides: str = "north-south", space: ThbSpace | None = None,
                           n_check: int = 200) -> ControlMap:
    """Control map whose recomputed map meets the chosen pair of sides orthogonally.

    A harmonic function ``f`` on ``x_star`` is computed with ``f = 0`` and
    ``f = 1`` on the two transversal sides and natural conditions on the
    chosen sides; its traces are blended across with cubic Hermite functions.
    The resulting control map slides along the chosen sides, so it does not
    have an identity trace there.
    """
    if sides not in ("north-south", "east-west"):
        raise ValueError("sides must be 'north-south' or 'east-west'")
    space = x_star.space if space is None else space
    if space.degree < 3:
        raise ValueError("the Hermite blend needs degree >= 3")
    axis = 0 if sides == "north-south" else 1
    f = _laplace_beltrami(x_star, space, axis)
    t = np.linspace(0.0, 1.0, n_check)
    for end in (0.0, 1.0):
        pts = np.column_stack([t, np.full_like(t, end)]) if axis == 0 else np.column_stack([np.full_like(t, end), t])
        tr = space.evaluate(f, pts[:, 0], pts[:, 1])[:, 0]
        if np.any(np.diff(tr) <= 0):
            raise ValueError("discrete harmonic trace is not monotone along the %s side; "
                             "refine the space" % ({0: {0.0: "south", 1.0: "north"},
                                                   1: {0.0: "west", 1.0: "east"}}[axis][end]))

    def smap(pts):
        pts = np.atleast_2d(pts)
        a, b = (pts[:, 0], pts[:, 1]) if axis == 0 else (pts[:, 1], pts[:, 0])
        if axis == 0:
            f0 = space.evaluate(f, a, np.zeros_like(a))[:, 0]
            f1 = space.evaluate(f, a, np.ones_like(a))[:, 0]
        else:
            f0 = space.evaluate(f, np.zeros_like(a), a)[:, 0]
            f1 = space.evaluate(f, np.ones_like(a), a)[:, 0]
        h0, h1 = hermite_blend(b)
        first = f0 * h0 + f1 * h1
        return np.column_stack([first, b]) if axis == 0 else np.column_stack([b, first])

    cB = trace_projection(space, smap)
    s = l2_project(smap, space, "interior", boundary_coeffs=cB, q=space.degree + 3)
    _fold_check(s, "boundary-orthogonal control map", "refine the space")
    return ControlMap(s, identity_trace=False)


def sprime_postprocess(s: ControlMap, x_h: GeometryMap, k: float = 0.75, beta: float = 300.0,
                       q: int | None = None) -> ControlMap:
    """Redistribute a control map by anisotropic diffusion in its own coordinates.

    Solves ``div_s(D grad_s s'_i) = 0`` with ``D = (det d x_h / d s)^k diag(1, beta)``
    and ``s' = s`` on the boundary.  Large ``beta`` freezes ``s'`` along the
    first control coordinate.
    """
    if beta < 1:
        raise ValueError("beta must be at least 1")
    space = s.space
    quad = quadrature(space.mesh, default_order(space) + 1 if q is None else q)
    _, T, _ = map_on(s.gmap, quad)
    _, Jx, _ = map_on(x_h, quad)
    detT, _ = _det_and_cof(T)
    detX = Jx[..., 0, 0] * Jx[..., 1, 1] - Jx[..., 0, 1] * Jx[..., 1, 0]
    if np.any(detT <= 0) or np.any(detX <= 0):
        raise BijectivityError("s and x_h must be bijective at all quadrature points")
    Tinv = np.empty_like(T)
    Tinv[..., 0, 0] = T[..., 1, 1]
    Tinv[..., 0, 1] = -T[..., 0, 1]
    Tinv[..., 1, 0] = -T[..., 1, 0]
    Tinv[..., 1, 1] = T[..., 0, 0]
    Tinv /= detT[..., None, None]
    D = (detX / detT) ** k
    Ds = np.zeros(D.shape + (2, 2))
    Ds[..., 0, 0] = D
    Ds[..., 1, 1] = beta * D
    # grad_s = T^{-T} grad_xi and dS_s = det T dS_xi
    K = np.einsum("eqij,eqjk,eqlk->eqil", Tinv, Ds, Tinv) * (detT * quad.weights)[..., None, None]
    c = _diffusion_solve(space, quad, K, s.coeffs[space.boundary_dofs])
    out = GeometryMap(space, c)
    _fold_check(out, "post-processed control map", "reduce k or beta")
    return ControlMap(out, identity_trace=s.identity_trace, check=False)


def recompute(x_star: GeometryMap, s: ControlMap | None, cfg: SolverConfig = SolverConfig(),
              space: ThbSpace | None = None, adapt: bool = False, boundary=None, max_rounds: int = 6):
    """Solve the controlled grid equations with the Dirichlet data of ``x_star``.

    For control maps with identity trace the composition ``x* o s`` is
    projected as initial guess; otherwise ``x_star`` itself is used.  With
    ``adapt=True`` a folded result is repaired by the bijectivity-driven
    adaptive loop.  Returns ``(GeometryMap, SolveReport)``; after adaptation
    the report of the last round is returned.
    """
    space = x_star.space if space is None else space
    if space.compatible(x_star.space):
        start = x_star.copy()
    elif space.degree == x_star.space.degree and space.regularity == x_star.space.regularity \
            and space.mesh.contains(x_star.space.mesh):
        start = prolong(x_star, space)
    else:
        raise ValueError("space must refine the space of x_star")
    if s is not None and s.identity_trace:
        comp = l2_project(lambda p: x_star(s(p)), space, "interior",
                          boundary_coeffs=start.coeffs[space.boundary_dofs])
        if bijectivity_scan(comp)[0] > 0:
            start = comp
    x, rep = solve(start, cfg, s)
    if adapt and bijectivity_scan(x)[0] <= 0:
        from .dwr import adapt_loop
        x, reps = adapt_loop(start, "bijectivity", cfg, boundary=boundary, max_rounds=max_rounds, s=s)
        rep = reps[-1]
    return x, rep
