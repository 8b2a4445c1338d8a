"""Quadrature, metric data and the weak forms of the elliptic grid equations.

All integrals are element-wise Gauss-Legendre sums over the active elements
of a hierarchical mesh.  Global accumulation goes through ``np.bincount`` and
COO-to-CSR conversion, both of which sum in a fixed order, so results are
bit-reproducible.

Vectors over the unknowns of a map are packed as ``[x_I, y_I]``: first the
interior coefficients of the first component, then those of the second.
Symmetric 2x2 fields are stored as ``(m11, m12, m22)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .thb import GeometryMap, HierarchicalMesh, ThbSpace

__all__ = [
    "EPS_DEFAULT",
    "TAUS",
    "BijectivityError",
    "Quadrature",
    "Tabulation",
    "MetricData",
    "quadrature",
    "tabulate",
    "field_on",
    "map_on",
    "metric_data",
    "a_matrix",
    "pack",
    "unpack",
    "residual_F",
    "jacobian_F",
    "gateaux_exact",
    "gateaux_fd",
    "test_functional_values",
    "picard_system",
    "winslow_value_and_gradient",
    "winslow_hessian",
    "mass_matrix",
    "l2_project",
    "trace_projection",
    "trace_fit_errors",
    "boundary_points",
]

EPS_DEFAULT = 1e-4
TAUS = ("Id", "div", "ls")


class BijectivityError(ValueError):
    """Raised when a quantity needs ``det J > 0`` and a quadrature point violates it."""


# quadrature -------------------------------------------------------------

def gauss_legendre(q: int):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Tensor Gauss rule with ``order`` points per direction on every active element."""

    mesh: HierarchicalMesh
    order: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.size

    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, 2)


def quadrature(mesh: HierarchicalMesh, q: int) -> Quadrature:
    cache = mesh.__dict__.setdefault("_quad_cache", {})
    if q not in cache:
        x, w = gauss_legendre(q)
        b = mesh.element_bounds()
        hx = (b[:, 1] - b[:, 0])[:, None]
        hy = (b[:, 3] - b[:, 2])[:, None]
        u = (b[:, 0][:, None] + hx * np.repeat(x, q)[None, :])
        v = (b[:, 2][:, None] + hy * np.tile(x, q)[None, :])
        ww = hx * hy * np.outer(w, w).ravel()[None, :]
        pts = np.stack([u, v], axis=-1)
        pts.setflags(write=False)
        ww.setflags(write=False)
        cache[q] = Quadrature(mesh, q, pts, ww)
    return cache[q]


@dataclass(frozen=True, eq=False)
class Tabulation:
    """Basis of a space at the points of a quadrature rule.

    ``val (ne, nq, K)``, ``grad (ne, nq, K, 2)`` and ``hess (ne, nq, K, 3)``
    with local-to-global map ``idx (ne, K)``; padded slots carry zeros.
    """

    space: ThbSpace
    quad: Quadrature
    idx: np.ndarray
    val: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def tabulate(space: ThbSpace, quad: Quadrature) -> Tabulation:
    if not space.mesh.same_as(quad.mesh):
        raise ValueError("quadrature built on a different mesh")
    cache = space.__dict__.setdefault("_tab_cache", {})
    key = quad.order
    if key not in cache:
        idx, vals = space.tabulate_elements(quad.points[..., 0], quad.points[..., 1], 2)
        val = vals[:, :, 0, :]
        grad = np.moveaxis(vals[:, :, 1:3, :], 2, 3)
        hess = np.moveaxis(vals[:, :, 3:6, :], 2, 3)
        cache[key] = Tabulation(space, quad, idx, val, grad, hess)
    return cache[key]


def default_order(space: ThbSpace) -> int:
    return space.degree + 1


def _tab(space, q=None):
    quad = quadrature(space.mesh, default_order(space) if q is None else q)
    return tabulate(space, quad)


def field_on(tab: Tabulation, coeffs):
    """Values ``(ne,nq,2)``, Jacobians ``[..,c,d] = dx_c/dxi_d`` and Hessians ``(ne,nq,2,3)``."""
    c = np.asarray(coeffs)[tab.idx]
    val = np.einsum("eqk,ekc->eqc", tab.val, c)
    jac = np.einsum("eqkd,ekc->eqcd", tab.grad, c)
    hess = np.einsum("eqkm,ekc->eqcm", tab.hess, c)
    return val, jac, hess


def map_on(x: GeometryMap, quad: Quadrature):
    """:func:`field_on` for a map whose mesh may differ from the quadrature mesh."""
    if x.space.mesh.same_as(quad.mesh):
        return field_on(tabulate(x.space, quad), x.coeffs)
    ne, nq = quad.weights.shape
    p = quad.flat_points()
    r = x.space.evaluate(x.coeffs, p[:, 0], p[:, 1], 2)
    val = r[:, 0].reshape(ne, nq, 2)
    jac = np.stack([r[:, 1], r[:, 2]], axis=-1).reshape(ne, nq, 2, 2)
    hess = np.moveaxis(r[:, 3:6], 1, 2).reshape(ne, nq, 2, 3)
    return val, jac, hess


def _scatter_vector(tab, contrib, n):
    return np.bincount(tab.idx.ravel(), weights=contrib.ravel(), minlength=n)


def _scatter_matrix(row_tab, col_tab, elem, shape, row_map=None, col_map=None, row_off=0, col_off=0):
    ne, ka, kb = elem.shape
    r = np.broadcast_to(row_tab.idx[:, :, None], elem.shape)
    c = np.broadcast_to(col_tab.idx[:, None, :], elem.shape)
    if row_map is not None:
        r = row_map[r]
    if col_map is not None:
        c = col_map[c]
    keep = (r >= 0) & (c >= 0) & (elem != 0.0)
    return sp.coo_matrix((elem[keep], (r[keep] + row_off, c[keep] + col_off)), shape=shape)


def _interior_map(space):
    m = np.full(space.ndof, -1, dtype=np.int64)
    m[space.interior_dofs] = np.arange(len(space.interior_dofs))
    return m


def pack(space: ThbSpace, coeffs) -> np.ndarray:
    """Interior coefficients of a ``(ndof, 2)`` array as ``[x_I, y_I]``."""
    c = np.asarray(coeffs)[space.interior_dofs]
    return np.concatenate([c[:, 0], c[:, 1]])


def unpack(space: ThbSpace, vec, base=None) -> np.ndarray:
    """Inverse of :func:`pack`; boundary rows copied from ``base`` (zeros if None)."""
    out = np.zeros((space.ndof, 2)) if base is None else np.array(base, dtype=float)
    nI = len(space.interior_dofs)
    out[space.interior_dofs, 0] = vec[:nI]
    out[space.interior_dofs, 1] = vec[nI:]
    return out


# metric -----------------------------------------------------------------

def _sym_dot(a, b):
    """Frobenius product of symmetric fields stored as (m11, m12, m22)."""
    return a[..., 0] * b[..., 0] + 2.0 * a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _sym_trace(a):
    return a[..., 0] + a[..., 2]


@dataclass(frozen=True, eq=False)
class MetricData:
    """Pointwise metric quantities of a map on a quadrature rule."""

    jac: np.ndarray
    hess: np.ndarray
    det: np.ndarray
    g11: np.ndarray
    g12: np.ndarray
    g22: np.ndarray
    eps: float = EPS_DEFAULT


def _metric_from(jac, hess, eps):
    g11 = jac[..., 0, 0] ** 2 + jac[..., 1, 0] ** 2
    g22 = jac[..., 0, 1] ** 2 + jac[..., 1, 1] ** 2
    g12 = jac[..., 0, 0] * jac[..., 0, 1] + jac[..., 1, 0] * jac[..., 1, 1]
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return MetricData(jac, hess, det, g11, g12, g22, eps)


def metric_data(x: GeometryMap, q: int | None = None, eps: float = EPS_DEFAULT) -> MetricData:
    tab = _tab(x.space, q)
    _, jac, hess = field_on(tab, x.coeffs)
    return _metric_from(jac, hess, eps)


def a_matrix(md: MetricData) -> np.ndarray:
    """Scaled inverse metric ``adj(g) / (g11 + g22 + eps)`` as a ``(..., 2, 2)`` array."""
    s = md.g11 + md.g22 + md.eps
    out = np.empty(md.g11.shape + (2, 2))
    out[..., 0, 0] = md.g22 / s
    out[..., 0, 1] = out[..., 1, 0] = -md.g12 / s
    out[..., 1, 1] = md.g11 / s
    return out


# the elliptic grid form ---------------------------------------------------

class _EggState:
    """Pointwise data of ``F(x, .)`` for a map ``x`` on a fixed quadrature."""

    def __init__(self, tab, coeffs, tau, mu, eps, sdata):
        if tau not in TAUS:
            raise ValueError("tau must be one of %s" % (TAUS,))
        self.tau, self.mu, self.eps = tau, float(mu), float(eps)
        _, J, H = field_on(tab, coeffs)
        self.J, self.H = J, H
        md = _metric_from(J, H, eps)
        self.S = md.g11 + md.g22 + eps
        self.adj = np.stack([md.g22, -md.g12, md.g11], axis=-1)
        self.A = self.adj / self.S[..., None]
        if sdata is None:
            self.P1 = self.P2 = None
            self.detT = None
        else:
            self.P1, self.P2, self.detT = sdata
        self.Ht = self.htilde(H, J)
        self.R = _sym_dot(self.A[..., None, :], self.Ht)
        Amu = self.A.copy()
        Amu[..., 0] += self.mu
        Amu[..., 2] += self.mu
        self.Amu = Amu
        if tau == "div":
            self.Q = _sym_dot(Amu, Amu)
            self.gamma = _sym_trace(Amu) / self.Q

    def htilde(self, H, J):
        """Apply the control-map correction to Hessians ``H (...,c,3)`` with Jacobians ``J (...,c,2)``."""
        if self.P1 is None:
            return H
        P1 = self.P1[..., None, :] if H.ndim == self.P1.ndim + 1 else self.P1
        P2 = self.P2[..., None, :] if H.ndim == self.P2.ndim + 1 else self.P2
        dT = self.detT[..., None, None] if H.ndim == self.detT.ndim + 2 else self.detT[..., None]
        return (H + P1 * J[..., 0:1] + P2 * J[..., 1:2]) * dT

    def test_coeffs(self):
        """``(c0, Mt)`` such that the test functional is ``c0 phi + Mt : H(phi)``."""
        if self.tau == "Id":
            return 1.0, None
        if self.tau == "ls":
            return 0.0, self.Amu
        g = self.gamma
        return 0.0, np.stack([g, np.zeros_like(g), g], axis=-1)

    def dA(self, dJ):
        """Directional derivative of A for Jacobian perturbation ``dJ``."""
        J = self.J
        dg11 = 2.0 * (J[..., 0, 0] * dJ[..., 0, 0] + J[..., 1, 0] * dJ[..., 1, 0])
        dg22 = 2.0 * (J[..., 0, 1] * dJ[..., 0, 1] + J[..., 1, 1] * dJ[..., 1, 1])
        dg12 = (J[..., 0, 0] * dJ[..., 0, 1] + J[..., 0, 1] * dJ[..., 0, 0]
                + J[..., 1, 0] * dJ[..., 1, 1] + J[..., 1, 1] * dJ[..., 1, 0])
        dadj = np.stack([dg22, -dg12, dg11], axis=-1)
        return dadj / self.S[..., None] - self.adj * ((dg11 + dg22) / self.S ** 2)[..., None]

    def dMt(self, dA):
        if self.tau == "Id":
            return None
        if self.tau == "ls":
            return dA
        dg = _sym_trace(dA) / self.Q - 2.0 * _sym_trace(self.Amu) * _sym_dot(self.Amu, dA) / self.Q ** 2
        return np.stack([dg, np.zeros_like(dg), dg], axis=-1)

    def unit_dA(self, c):
        """``(D1, D2)``: dA for x_c += N equals ``D1 N_xi + D2 N_eta``."""
        J = self.J
        a, b = J[..., c, 0], J[..., c, 1]
        z = np.zeros_like(a)
        S, S2 = self.S[..., None], (self.S ** 2)[..., None]
        D1 = np.stack([z, -b, 2 * a], axis=-1) / S - self.adj * (2 * a)[..., None] / S2
        D2 = np.stack([2 * b, -a, z], axis=-1) / S - self.adj * (2 * b)[..., None] / S2
        return D1, D2


def _control_data(s, quad):
    if s is None:
        return None
    return s.quadrature_data(quad)


def _test_values(state, tab):
    """Test functional applied to each basis function: ``(ne, nq, K)``."""
    c0, Mt = state.test_coeffs()
    T = c0 * tab.val if c0 else np.zeros_like(tab.val)
    if Mt is not None:
        T = T + _sym_dot(Mt[:, :, None, :], tab.hess)
    return T


def _check_tau(space, tau):
    if tau in ("div", "ls") and space.regularity < 1:
        raise ValueError("tau=%s needs C1 test functions (regularity >= 1)" % tau)


def _setup(x, tau, mu, s, eps, q, test_space=None):
    test_space = x.space if test_space is None else test_space
    _check_tau(test_space, tau)
    if q is None:
        q = max(default_order(x.space), default_order(test_space))
    quad = quadrature(x.space.mesh, q)
    xtab = tabulate(x.space, quad)
    ttab = tabulate(test_space, quad)
    state = _EggState(xtab, x.coeffs, tau, mu, eps, _control_data(s, quad))
    return quad, xtab, ttab, state


def residual_F(x: GeometryMap, tau: str = "Id", mu: float = 0.0, s=None,
               eps: float = EPS_DEFAULT, q: int | None = None, test_space: ThbSpace | None = None):
    """``F(x, sigma)`` for every interior test function of ``test_space`` (default ``x.space``)."""
    quad, xtab, ttab, st = _setup(x, tau, mu, s, eps, q, test_space)
    T = _test_values(st, ttab) * quad.weights[:, :, None]
    sp_ = ttab.space
    out = []
    for i in range(2):
        contrib = np.einsum("eqk,eq->ek", T, st.R[..., i])
        out.append(_scatter_vector(ttab, contrib, sp_.ndof)[sp_.interior_dofs])
    return np.concatenate(out)


def test_functional_values(x: GeometryMap, phi_val, phi_grad, phi_hess, tau="Id", mu=0.0, s=None,
                           eps=EPS_DEFAULT, q=None, sum_points=True):
    """Per-element integrals ``F(x, phi)`` for a pointwise test field.

    ``phi_val (ne,nq,...,2)``, ``phi_hess (ne,nq,...,2,3)``; leading axes
    after ``nq`` are kept, so several test fields can be handled at once.
    Returns the integrals summed over quadrature points and components,
    shape ``(ne, ...)``; with ``sum_points=False`` the weighted integrand
    is returned per quadrature point, shape ``(ne, nq, ...)``.
    """
    quad, _, _, st = _setup(x, tau, mu, s, eps, q)
    extra = phi_val.ndim - 3
    def ex(a):
        return a.reshape(a.shape[:2] + (1,) * extra + a.shape[2:])
    c0, Mt = st.test_coeffs()
    T = c0 * phi_val if c0 else np.zeros_like(phi_val)
    if Mt is not None:
        T = T + _sym_dot(ex(Mt)[..., None, :], phi_hess)
    integrand = (T * ex(st.R)).sum(axis=-1) * ex(quad.weights)
    return integrand.sum(axis=1) if sum_points else integrand


def gateaux_exact(x: GeometryMap, tau="Id", mu=0.0, s=None, v=None, eps=EPS_DEFAULT, q=None,
                  test_space=None):
    """Directional derivative of :func:`residual_F` along the coefficient field ``v``.

    Computed matrix-free from the linearized integrand; ``v`` is either a
    ``(ndof, 2)`` array or a packed interior vector.
    """
    v = _as_field(x.space, v)
    quad, xtab, ttab, st = _setup(x, tau, mu, s, eps, q, test_space)
    _, dJ, dH = field_on(xtab, v)
    dA = st.dA(dJ)
    dR = _sym_dot(dA[..., None, :], st.Ht) + _sym_dot(st.A[..., None, :], st.htilde(dH, dJ))
    T = _test_values(st, ttab)
    dMt = st.dMt(dA)
    dT = _sym_dot(dMt[:, :, None, :], ttab.hess) if dMt is not None else None
    w = quad.weights[:, :, None]
    sp_ = ttab.space
    out = []
    for i in range(2):
        integrand = T * dR[..., i][..., None]
        if dT is not None:
            integrand = integrand + dT * st.R[..., i][..., None]
        contrib = (integrand * w).sum(axis=1)
        out.append(_scatter_vector(ttab, contrib, sp_.ndof)[sp_.interior_dofs])
    return np.concatenate(out)


def gateaux_fd(x: GeometryMap, tau="Id", mu=0.0, s=None, v=None, eps_fd=1e-7, eps=EPS_DEFAULT, q=None):
    """One-sided difference ``(F(x + eps_fd v) - F(x)) / eps_fd``."""
    if eps_fd <= 0:
        raise ValueError("eps_fd must be positive")
    v = _as_field(x.space, v)
    f0 = residual_F(x, tau, mu, s, eps, q)
    f1 = residual_F(x.with_coeffs(x.coeffs + eps_fd * v), tau, mu, s, eps, q)
    return (f1 - f0) / eps_fd


def _as_field(space, v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return unpack(space, v)
    if v.shape != (space.ndof, 2):
        raise ValueError("direction has wrong shape %s" % (v.shape,))
    return v


def jacobian_F(x: GeometryMap, tau="Id", mu=0.0, s=None, eps=EPS_DEFAULT, q=None,
               test_space=None, dir_space=None):
    """Assembled derivative of :func:`residual_F` w.r.t. interior coefficients.

    Rows follow the interior tests of ``test_space``, columns the interior
    coefficients of ``dir_space`` (both default to ``x.space``), packed per
    component.
    """
    test_space = x.space if test_space is None else test_space
    dir_space = x.space if dir_space is None else dir_space
    if q is None:
        q = max(default_order(x.space), default_order(test_space), default_order(dir_space))
    quad, xtab, ttab, st = _setup(x, tau, mu, s, eps, q, test_space)
    dtab = tabulate(dir_space, quad)
    w = quad.weights[:, :, None]
    T = _test_values(st, ttab) * w
    Nx, Ny = dtab.grad[..., 0], dtab.grad[..., 1]
    AH = _sym_dot(st.A[:, :, None, :], dtab.hess)
    if st.P1 is None:
        AHt = AH
    else:
        AHt = (AH + _sym_dot(st.A, st.P1)[..., None] * Nx
               + _sym_dot(st.A, st.P2)[..., None] * Ny) * st.detT[..., None]
    diag_block = np.einsum("eqa,eqb->eab", T, AHt)
    rmap, cmap = _interior_map(test_space), _interior_map(dir_space)
    nr, nc = len(test_space.interior_dofs), len(dir_space.interior_dofs)
    shape = (2 * nr, 2 * nc)
    blocks = []
    for c in range(2):
        D1, D2 = st.unit_dA(c)
        dT1, dT2 = st.dMt(D1), st.dMt(D2)
        for i in range(2):
            L1 = T * _sym_dot(D1, st.Ht[..., i, :])[..., None]
            L2 = T * _sym_dot(D2, st.Ht[..., i, :])[..., None]
            if dT1 is not None:
                Ri = (st.R[..., i] * quad.weights)[..., None]
                L1 = L1 + _sym_dot(dT1[:, :, None, :], ttab.hess) * Ri
                L2 = L2 + _sym_dot(dT2[:, :, None, :], ttab.hess) * Ri
            E = np.einsum("eqa,eqb->eab", L1, Nx) + np.einsum("eqa,eqb->eab", L2, Ny)
            if i == c:
                E = E + diag_block
            blocks.append(_scatter_matrix(ttab, dtab, E, shape, rmap, cmap, i * nr, c * nc))
    return sp.coo_matrix(sum(b.tocsr() for b in blocks)).tocsr()


def picard_system(xk: GeometryMap, tau="Id", mu=1e-2, s=None, eps=EPS_DEFAULT, q=None):
    """Linear system ``K u = b`` for the interior coefficients of the next Picard iterate.

    The operator freezes ``A_mu`` and the test weighting at ``xk``; the
    stabilization ``mu`` is balanced by ``mu trace(H~(xk))`` on the right,
    so fixed points solve ``F = 0``.  Returns a block-diagonal matrix of two
    identical scalar blocks and the packed right-hand side.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    space = xk.space
    quad, xtab, _, st = _setup(xk, tau, mu, s, eps, q)
    w = quad.weights[:, :, None]
    T = _test_values(st, xtab) * w
    Nx, Ny = xtab.grad[..., 0], xtab.grad[..., 1]
    AH = _sym_dot(st.Amu[:, :, None, :], xtab.hess)
    if st.P1 is not None:
        AH = (AH + _sym_dot(st.Amu, st.P1)[..., None] * Nx
              + _sym_dot(st.Amu, st.P2)[..., None] * Ny) * st.detT[..., None]
    E = np.einsum("eqa,eqb->eab", T, AH)
    m = _interior_map(space)
    nI = len(space.interior_dofs)
    K = _scatter_matrix(xtab, xtab, E, (nI, nI), m, m).tocsr()
    lift = xk.coeffs.copy()
    lift[space.interior_dofs] = 0.0
    _, Jl, Hl = field_on(xtab, lift)
    Htl = st.htilde(Hl, Jl)
    rhs = []
    for i in range(2):
        r = st.mu * _sym_trace(st.Ht[..., i, :]) - _sym_dot(st.Amu, Htl[..., i, :])
        contrib = np.einsum("eqk,eq->ek", T, r)
        rhs.append(_scatter_vector(xtab, contrib, space.ndof)[space.interior_dofs])
    return sp.block_diag([K, K], format="csr"), np.concatenate(rhs)


# Winslow functional -----------------------------------------------------------

def _winslow_point(J):
    n = (J ** 2).sum(axis=(-1, -2))
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    cof = np.stack([np.stack([J[..., 1, 1], -J[..., 1, 0]], -1),
                    np.stack([-J[..., 0, 1], J[..., 0, 0]], -1)], -2)
    return n, det, cof


def _require_positive(det, quad):
    if np.any(det <= 0):
        e, k = np.unravel_index(np.argmin(det), det.shape)
        p = quad.points[e, k]
        raise BijectivityError("det J = %.3e <= 0 at quadrature point (%.6f, %.6f)"
                               % (det[e, k], p[0], p[1]))


def winslow_value_and_gradient(x: GeometryMap, q=None, dir_space=None):
    """``L_W(x)`` and its first variation over the interior functions of ``dir_space``."""
    dir_space = x.space if dir_space is None else dir_space
    if q is None:
        q = max(default_order(x.space), default_order(dir_space))
    quad = quadrature(x.space.mesh, q)
    xtab, dtab = tabulate(x.space, quad), tabulate(dir_space, quad)
    _, J, _ = field_on(xtab, x.coeffs)
    n, det, cof = _winslow_point(J)
    _require_positive(det, quad)
    w = quad.weights
    value = float((n / det * w).sum())
    out = []
    for c in range(2):
        coef = (2.0 * J[..., c, :] / det[..., None] - (n / det ** 2)[..., None] * cof[..., c, :]) * w[..., None]
        contrib = np.einsum("eqkd,eqd->ek", dtab.grad, coef)
        out.append(_scatter_vector(dtab, contrib, dir_space.ndof)[dir_space.interior_dofs])
    return value, np.concatenate(out)


def winslow_hessian(x: GeometryMap, q=None):
    """Second variation of ``L_W`` over interior coefficients (packed)."""
    space = x.space
    quad = quadrature(space.mesh, default_order(space) if q is None else q)
    tab = tabulate(space, quad)
    _, J, _ = field_on(tab, x.coeffs)
    n, det, cof = _winslow_point(J)
    _require_positive(det, quad)
    w = quad.weights
    m = _interior_map(space)
    nI = len(space.interior_dofs)
    eye = np.eye(2)
    rot = np.array([[[0.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [-1.0, 0.0]],
                    [[0.0, -1.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]).reshape(2, 2, 2, 2)
    blocks = []
    for c in range(2):
        for cc in range(2):
            Jc, Jcc = J[..., c, :], J[..., cc, :]
            Cc, Ccc = cof[..., c, :], cof[..., cc, :]
            W = (2.0 * eye[c, cc] / det)[..., None, None] * eye
            W = W - 2.0 * (Jc[..., :, None] * Ccc[..., None, :] + Cc[..., :, None] * Jcc[..., None, :]) / (det ** 2)[..., None, None]
            W = W - (n / det ** 2)[..., None, None] * rot[c, cc]
            W = W + 2.0 * (n / det ** 3)[..., None, None] * Cc[..., :, None] * Ccc[..., None, :]
            W = W * w[..., None, None]
            E = np.einsum("eqad,eqdf,eqbf->eab", tab.grad, W, tab.grad, optimize=True)
            blocks.append(_scatter_matrix(tab, tab, E, (2 * nI, 2 * nI), m, m, c * nI, cc * nI))
    return sp.coo_matrix(sum(b.tocsr() for b in blocks)).tocsr()


# mass matrices and projections ------------------------------------------------

def mass_matrix(space: ThbSpace, q: int | None = None) -> sp.csr_matrix:
    tab = _tab(space, q)
    E = np.einsum("eqa,eqb,eq->eab", tab.val, tab.val, tab.quad.weights)
    return _scatter_matrix(tab, tab, E, (space.ndof, space.ndof)).tocsr()


def _eval_callable(f, pts):
    vals = np.asarray(f(pts), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return vals


def l2_project(f, space: ThbSpace, subspace: str = "all", boundary_coeffs=None, q: int | None = None):
    """Galerkin L2 projection of ``f`` (callable on ``(n, 2)`` points) onto ``space``.

    ``subspace='interior'`` projects onto the functions vanishing on the
    boundary, with boundary coefficients fixed to ``boundary_coeffs`` (zero
    by default); ``'trace'`` projects the boundary trace of ``f`` onto the
    trace space and leaves interior coefficients at zero.
    """
    if subspace == "trace":
        cB = trace_projection(space, f, q)
        out = np.zeros((space.ndof, cB.shape[1]))
        out[space.boundary_dofs] = cB
        return GeometryMap(space, out) if out.shape[1] == 2 else out
    tab = _tab(space, q if q is not None else space.degree + 2)
    pts = tab.quad.flat_points()
    vals = _eval_callable(f, pts).reshape(tab.val.shape[:2] + (-1,))
    m = vals.shape[-1]
    rhs = np.stack([_scatter_vector(tab, np.einsum("eqk,eq,eq->ek", tab.val, vals[..., c], tab.quad.weights),
                                    space.ndof) for c in range(m)], axis=-1)
    E = np.einsum("eqa,eqb,eq->eab", tab.val, tab.val, tab.quad.weights)
    M = _scatter_matrix(tab, tab, E, (space.ndof, space.ndof)).tocsc()
    out = np.zeros((space.ndof, m))
    if subspace == "all":
        out[:] = _solve(M, rhs)
    elif subspace == "interior":
        I, B = space.interior_dofs, space.boundary_dofs
        if boundary_coeffs is not None:
            out[B] = np.asarray(boundary_coeffs).reshape(len(B), m)
        rhsI = rhs[I] - M[I][:, B] @ out[B]
        out[I] = _solve(M[I][:, I].tocsc(), rhsI)
    else:
        raise ValueError("subspace must be 'all', 'interior' or 'trace'")
    return GeometryMap(space, out) if m == 2 else out


def _solve(M, rhs):
    lu = spla.splu(sp.csc_matrix(M))
    x = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("singular mass matrix")
    return x


SIDES = ("south", "east", "north", "west")


def boundary_points(mesh: HierarchicalMesh, q: int):
    """Gauss points on the edges of boundary elements of ``(0,1)^2``.

    Returns ``(pts (n,2), weights (n,), elem (n,), side (n,))``; each side
    is traversed in increasing parameter.
    """
    x, w = gauss_legendre(q)
    el = mesh.active_elements()
    b = mesh.element_bounds()
    nl = mesh.n0 * (2 ** el[:, 0])
    pts, ws, es, ss = [], [], [], []
    for k, side in enumerate(SIDES):
        if side == "south":
            sel = np.nonzero(el[:, 2] == 0)[0]
        elif side == "north":
            sel = np.nonzero(el[:, 2] == nl - 1)[0]
        elif side == "west":
            sel = np.nonzero(el[:, 1] == 0)[0]
        else:
            sel = np.nonzero(el[:, 1] == nl - 1)[0]
        if side in ("south", "north"):
            lo, hi = b[sel, 0], b[sel, 1]
        else:
            lo, hi = b[sel, 2], b[sel, 3]
        t = (lo[:, None] + (hi - lo)[:, None] * x[None, :]).ravel()
        fixed = {"south": 0.0, "north": 1.0, "west": 0.0, "east": 1.0}[side]
        if side in ("south", "north"):
            p = np.column_stack([t, np.full_like(t, fixed)])
        else:
            p = np.column_stack([np.full_like(t, fixed), t])
        pts.append(p)
        ws.append(((hi - lo)[:, None] * w[None, :]).ravel())
        es.append(np.repeat(sel, q))
        ss.append(np.full(len(t), k))
    return np.concatenate(pts), np.concatenate(ws), np.concatenate(es), np.concatenate(ss)


def trace_projection(space: ThbSpace, f, q: int | None = None) -> np.ndarray:
    """Boundary coefficients of the L2 projection of ``f`` onto the trace space.

    The boundary of the unit square is measured by parametric arc length.
    """
    q = space.degree + 3 if q is None else q
    pts, w, _, _ = boundary_points(space.mesh, q)
    idx, vals = space.tabulate_points(pts[:, 0], pts[:, 1], 0)
    N = vals[:, 0, :]
    fv = _eval_callable(f, pts)
    bmap = np.full(space.ndof, -1, dtype=np.int64)
    bmap[space.boundary_dofs] = np.arange(len(space.boundary_dofs))
    r = bmap[idx]
    nB = len(space.boundary_dofs)
    rows = np.broadcast_to(r[:, :, None], r.shape + (r.shape[1],))
    cols = np.broadcast_to(r[:, None, :], rows.shape)
    ent = N[:, :, None] * N[:, None, :] * w[:, None, None]
    keep = (rows >= 0) & (cols >= 0) & (ent != 0)
    M = sp.coo_matrix((ent[keep], (rows[keep], cols[keep])), shape=(nB, nB)).tocsc()
    rhs = np.zeros((nB, fv.shape[1]))
    for c in range(fv.shape[1]):
        contrib = N * (fv[:, c] * w)[:, None]
        ok = r >= 0
        rhs[:, c] = np.bincount(r[ok], weights=contrib[ok], minlength=nB)
    return _solve(M, rhs)


def trace_fit_errors(space: ThbSpace, boundary, q: int | None = None):
    """Per boundary element L2 error of the trace projection of ``boundary``.

    ``boundary`` is any object with a ``trace(pts)`` method (or a callable)
    giving physical points for points on the boundary of the unit square.
    Returns ``(errors, element_ids)``.
    """
    f = boundary.trace if hasattr(boundary, "trace") else boundary
    cB = trace_projection(space, f)
    full = np.zeros((space.ndof, cB.shape[1]))
    full[space.boundary_dofs] = cB
    q = space.degree + 4 if q is None else q
    pts, w, el, _ = boundary_points(space.mesh, q)
    approx = space.evaluate(full, pts[:, 0], pts[:, 1])[:, 0]
    d2 = ((_eval_callable(f, pts) - approx) ** 2).sum(axis=1) * w
    elems = np.unique(el)
    err = np.sqrt(np.bincount(el, weights=d2, minlength=space.mesh.n_elements)[elems])
    return err, elems
