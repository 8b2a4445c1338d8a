"""Goal-oriented error estimation and adaptive refinement.

By default the adjoint problem is posed on the degree-and-regularity-raised
space over the same element hierarchy; h-refined adjoint spaces are also
supported, in which case the primal map is prolonged onto the finer mesh.  The resulting estimate ``-F(x_h, z_h - psi_h)``
is split into contributions of the primal basis functions by inserting the
partition of unity, and the largest weighted contributions drive
function-wise refinement.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import (EPS_DEFAULT, default_order, field_on, jacobian_F, l2_project, quadrature,
                       tabulate, test_functional_values, unpack, winslow_value_and_gradient)
from .quality import bijectivity_scan
from .solvers import SolverConfig, SolveReport, solve
from .thb import GeometryMap, ThbSpace, adjoint_space, prolong, refine_functions

__all__ = [
    "GOALS",
    "GoalFunctional",
    "ResidualDecomposition",
    "AdjointSolution",
    "make_goal",
    "solve_adjoint",
    "decompose_residual",
    "mark",
    "adapt_loop",
]

GOALS = ("bijectivity", "winslow")


@dataclass(frozen=True, eq=False)
class GoalFunctional:
    """Goal ``L`` with its linearization.

    ``kind='bijectivity'``: ``L(x) = sum of det J(x)`` over the frozen point
    set ``points`` (the quadrature points where ``det J(x_h) < 0``).
    ``kind='winslow'``: ``L(x) = -L_W(x)``, so that ``L(x) - L(x_h)`` is the
    Winslow gap ``L_W(x_h) - L_W(x)``.
    """

    kind: str
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def value(self, x: GeometryMap) -> float:
        if self.kind == "winslow":
            return -winslow_value_and_gradient(x)[0]
        if len(self.points) == 0:
            return 0.0
        r = x.space.evaluate(x.coeffs, self.points[:, 0], self.points[:, 1], 1)
        det = r[:, 1, 0] * r[:, 2, 1] - r[:, 2, 0] * r[:, 1, 1]
        return float(det.sum())

    def derivative(self, x: GeometryMap, space: ThbSpace, q: int | None = None) -> np.ndarray:
        """``L'(x; phi)`` for every interior function of ``space`` (packed)."""
        nI = len(space.interior_dofs)
        if self.kind == "winslow":
            return -winslow_value_and_gradient(x, q=q, dir_space=space)[1]
        if len(self.points) == 0:
            return np.zeros(2 * nI)
        p = self.points
        r = x.space.evaluate(x.coeffs, p[:, 0], p[:, 1], 1)
        Jx, Jy = r[:, 1, :], r[:, 2, :]
        idx, vals = space.tabulate_points(p[:, 0], p[:, 1], 1)
        Nx, Ny = vals[:, 1, :], vals[:, 2, :]
        # det J = x_xi y_eta - x_eta y_xi
        d0 = Nx * Jy[:, 1:2] - Ny * Jx[:, 1:2]
        d1 = Jx[:, 0:1] * Ny - Jy[:, 0:1] * Nx
        imap = np.full(space.ndof, -1, dtype=np.int64)
        imap[space.interior_dofs] = np.arange(nI)
        out = np.zeros(2 * nI)
        ii = imap[idx]
        ok = ii >= 0
        out[:nI] = np.bincount(ii[ok], weights=d0[ok], minlength=nI)
        out[nI:] = np.bincount(ii[ok], weights=d1[ok], minlength=nI)
        return out


def make_goal(kind: str, x: GeometryMap | None = None, q: int | None = None) -> GoalFunctional:
    """Build a goal; the bijectivity goal freezes the current set of negative-Jacobian points."""
    if kind not in GOALS:
        raise ValueError("goal must be one of %s" % (GOALS,))
    if kind == "winslow":
        return GoalFunctional("winslow")
    if x is None:
        raise ValueError("the bijectivity goal needs the current map")
    _, pts = bijectivity_scan(x, q)
    return GoalFunctional("bijectivity", np.array(pts))


def _primal_on(x_h, mesh):
    """``x_h`` represented on ``mesh`` (which must refine the primal mesh)."""
    if x_h.space.mesh.same_as(mesh):
        return x_h
    if not mesh.contains(x_h.space.mesh):
        raise ValueError("adjoint mesh must refine the primal mesh")
    return prolong(x_h, ThbSpace(mesh, x_h.space.degree, x_h.space.regularity))


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    z: GeometryMap
    rhs_norm: float
    singular: bool = False


def solve_adjoint(x_h: GeometryMap, goal: GoalFunctional, adjoint: ThbSpace | None = None,
                  tau: str = "Id", mu: float = 0.0, s=None, eps: float = EPS_DEFAULT) -> AdjointSolution:
    """Discrete adjoint: ``F'(x_h; phi, z) = L'(x_h; phi)`` for all interior ``phi`` of the adjoint space."""
    Z = adjoint_space(x_h.space) if adjoint is None else adjoint
    x_h = _primal_on(x_h, Z.mesh)
    q = default_order(Z)
    rhs = goal.derivative(x_h, Z, q=q)
    nrm = float(np.linalg.norm(rhs))
    if nrm == 0.0:
        return AdjointSolution(GeometryMap(Z, np.zeros((Z.ndof, 2))), 0.0)
    J = jacobian_F(x_h, tau, mu, s, eps, q=q, test_space=Z, dir_space=Z)
    try:
        lu = spla.splu(J.T.tocsc())
        zvec = lu.solve(rhs)
        singular = not np.all(np.isfinite(zvec))
    except RuntimeError:
        zvec, singular = np.zeros_like(rhs), True
    if singular:
        zvec = np.zeros_like(rhs)
    return AdjointSolution(GeometryMap(Z, unpack(Z, zvec)), nrm, singular)


@dataclass(eq=False)
class ResidualDecomposition:
    """Basis-function-wise split of the estimate ``-F(x_h, z_h - psi_h)``."""

    r: np.ndarray
    w: np.ndarray
    estimate: float

    @property
    def r_weighted(self) -> np.ndarray:
        return self.r / self.w


@dataclass(frozen=True, eq=False)
class _PointBasis:
    idx: np.ndarray
    val: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def _basis_at(space, quad):
    """Basis of ``space`` at the points of ``quad`` with a per-point index map ``(ne, nq, K)``."""
    if space.mesh.same_as(quad.mesh):
        t = tabulate(space, quad)
        idx = np.broadcast_to(t.idx[:, None, :], t.val.shape)
        return _PointBasis(idx, t.val, t.grad, t.hess)
    ne, nq = quad.weights.shape
    p = quad.flat_points()
    idx, vals = space.tabulate_points(p[:, 0], p[:, 1], 2)
    K = idx.shape[1]
    vals = vals.reshape(ne, nq, 6, K)
    return _PointBasis(idx.reshape(ne, nq, K), vals[:, :, 0],
                       np.moveaxis(vals[:, :, 1:3], 2, 3), np.moveaxis(vals[:, :, 3:6], 2, 3))


def _product_fields(tab_w, e_val, e_grad, e_hess):
    """Values and Hessians of ``w_k * e`` for every local basis function ``w_k``.

    Returns ``(ne, nq, K, 2)`` values and ``(ne, nq, K, 2, 3)`` Hessians.
    """
    w, gw, hw = tab_w.val, tab_w.grad, tab_w.hess
    val = w[..., None] * e_val[:, :, None, :]
    ev = e_val[:, :, None, :, None]
    eg = e_grad[:, :, None, :, :]
    gwx = gw[..., 0][..., None]
    gwy = gw[..., 1][..., None]
    cross = np.stack([2 * gwx * eg[..., 0],
                      gwx * eg[..., 1] + gwy * eg[..., 0],
                      2 * gwy * eg[..., 1]], axis=-1)
    hess = hw[:, :, :, None, :] * ev + cross + w[..., None, None] * e_hess[:, :, None, :, :]
    return val, hess


def decompose_residual(x_h: GeometryMap, z: GeometryMap, psi_choice: str = "l2-projection",
                       tau: str = "Id", mu: float = 0.0, s=None, eps: float = EPS_DEFAULT,
                       q: int | None = None) -> ResidualDecomposition:
    """``r_i = -F(x_h, w_i (z - psi))`` for every primal basis function ``w_i``."""
    V = x_h.space
    if psi_choice == "l2-projection":
        psi = l2_project(z, V, "interior", q=default_order(z.space) + 1).coeffs
    elif psi_choice == "zero":
        psi = np.zeros((V.ndof, 2))
    else:
        raise ValueError("psi_choice must be 'l2-projection' or 'zero'")
    q = default_order(z.space) + 1 if q is None else q
    xq = _primal_on(x_h, z.space.mesh)
    quad = quadrature(xq.space.mesh, q)
    tz = tabulate(z.space, quad)
    zv, zJ, zH = field_on(tz, z.coeffs)
    tv = _basis_at(V, quad)
    pv = np.einsum("eqk,eqkc->eqc", tv.val, psi[tv.idx])
    pJ = np.einsum("eqkd,eqkc->eqcd", tv.grad, psi[tv.idx])
    pH = np.einsum("eqkm,eqkc->eqcm", tv.hess, psi[tv.idx])
    e_val, e_grad, e_hess = zv - pv, zJ - pJ, zH - pH
    val, hess = _product_fields(tv, e_val, e_grad, e_hess)
    per = test_functional_values(xq, val, None, hess, tau, mu, s, eps, q=q, sum_points=False)
    r = -np.bincount(tv.idx.ravel(), weights=per.ravel(), minlength=V.ndof)
    w = np.bincount(tv.idx.ravel(), weights=(tv.val * quad.weights[:, :, None]).ravel(),
                    minlength=V.ndof)
    return ResidualDecomposition(r, w, float(r.sum()))


def mark(dec: ResidualDecomposition, beta: float = 0.2, positive_only: bool = False) -> list:
    """Indices with ``|r~_i| >= beta max |r~|`` (negative contributions dropped if ``positive_only``)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    rt = dec.r_weighted
    if positive_only:
        rt = np.where(rt > 0, rt, 0.0)
    a = np.abs(rt)
    top = a.max(initial=0.0)
    if top == 0.0:
        return []
    return [int(i) for i in np.nonzero((a >= beta * top) & (a > 0))[0]]


def adapt_loop(x0: GeometryMap, goal_kind: str = "bijectivity", cfg: SolverConfig = SolverConfig(),
               beta: float = 0.2, max_rounds: int = 6, boundary=None, positive_only: bool = False,
               winslow_tol: float | None = None, psi_choice: str = "l2-projection",
               adjoint_mode: str = "k", s=None):
    """Solve, estimate, mark and refine until the goal is met.

    Returns the last map and one :class:`SolveReport` per round; each report
    carries the round record (DOFs, ``|Xi_-|``, estimate, marked count) in
    ``report.extra``.  With ``boundary`` given, Dirichlet data are re-projected
    onto every refined space; otherwise the prolonged data are kept.
    ``adjoint_mode`` selects the adjoint space (see :func:`adjoint_space`);
    ``s`` is an optional control map passed to every solve.
    """
    from .boundary import dirichlet_coefficients

    if goal_kind not in GOALS:
        raise ValueError("goal must be one of %s" % (GOALS,))
    x = x0
    reports = []
    prev_est = None
    for rnd in range(max_rounds + 1):
        xs, rep = solve(x, cfg, s)
        mn, neg = bijectivity_scan(xs)
        rec = {"round": rnd, "ndof": xs.space.ndof, "n_negative": int(len(neg)),
               "min_det": mn, "estimate": None, "n_marked": 0, "goal_met": False}
        rep.extra = rec
        reports.append(rep)
        x = xs
        if goal_kind == "bijectivity":
            if len(neg) == 0:
                rec["goal_met"] = True
                break
            goal = GoalFunctional("bijectivity", np.array(neg))
        else:
            goal = GoalFunctional("winslow")
        if goal_kind == "winslow" and mn <= 0:
            rec["warning"] = "map folded; Winslow goal undefined"
            break
        adj = solve_adjoint(x, goal, adjoint_space(x.space, adjoint_mode), tau=rep.tau, mu=rep.mu, s=s,
                            eps=cfg.eps)
        if adj.singular:
            rec["warning"] = "singular adjoint linearization; refine uniformly and restart"
            break
        dec = decompose_residual(x, adj.z, psi_choice, rep.tau, rep.mu, s=s, eps=cfg.eps)
        rec["estimate"] = dec.estimate
        if goal_kind == "winslow":
            tol = winslow_tol if winslow_tol is not None else 1e-3 * winslow_value_and_gradient(x)[0]
            if abs(dec.estimate) <= tol:
                rec["goal_met"] = True
                break
        if prev_est is not None and abs(dec.estimate) > 0.95 * abs(prev_est):
            rec["warning"] = "estimate reduced by less than 5% in this round"
        prev_est = dec.estimate
        if rnd == max_rounds:
            rec["warning"] = "round cap of %d reached before the goal was met" % max_rounds
            break
        marked = mark(dec, beta, positive_only)
        rec["n_marked"] = len(marked)
        if not marked:
            rec["warning"] = "no functions marked"
            break
        fine = refine_functions(x.space, marked)
        x = prolong(x, fine)
        if boundary is not None:
            c = x.coeffs.copy()
            c[fine.boundary_dofs] = dirichlet_coefficients(fine, boundary)
            x = x.with_coeffs(c)
    return x, reports
