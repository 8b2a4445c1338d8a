"""Truncated hierarchical B-splines on the unit square.

A :class:`HierarchicalMesh` stores, for every level ``l``, the boolean mask of
level-``l`` elements that belong to the nested domain ``Omega^l``; level
``l+1`` is the dyadic refinement of level ``l``.  A :class:`ThbSpace` builds
the truncated basis on such a mesh by pushing every active function through
the two-scale relations level by level and dropping the contributions of
finer functions whose support lies in the next nested domain.

Tensor functions of a level are numbered ``ix * n + iy`` with ``ix`` the
index in the xi-direction.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .splinecore import KnotVector, basis_derivatives, subdivision_matrix, uniform_knot_vector

__all__ = [
    "HierarchicalMesh",
    "ThbSpace",
    "GeometryMap",
    "MapEval",
    "RefinementError",
    "uniform_space",
    "refine_functions",
    "refine_uniformly",
    "prolong",
    "adjoint_space",
    "ADJOINT_MODES",
    "identity_map",
    "eval_map",
    "build_initial_space",
]

MAX_LEVELS = 8
DEFAULT_N0 = 7
DEFAULT_FIT_TOL = 1e-2

# (d/dxi order, d/deta order) of the rows returned by tabulation
DERIV_PAIRS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


class RefinementError(RuntimeError):
    """Raised when refinement would exceed the hierarchy depth cap."""


def _coarsen(mask):
    n = mask.shape[0] // 2
    return mask.reshape(n, 2, n, 2).any(axis=(1, 3))


def _upsample(mask):
    return np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)


class HierarchicalMesh:
    """Nested dyadic element hierarchy over (0, 1)^2."""

    def __init__(self, n0: int, omega=None, max_levels: int = MAX_LEVELS):
        self.n0 = int(n0)
        if self.n0 < 1:
            raise ValueError("n0 must be positive")
        self.max_levels = int(max_levels)
        if omega is None:
            omega = [np.ones((self.n0, self.n0), dtype=bool)]
        omega = [np.array(m, dtype=bool) for m in omega]
        while len(omega) > 1 and not omega[-1].any():
            omega.pop()
        for level, m in enumerate(omega):
            if m.shape != (self.n(level), self.n(level)):
                raise ValueError("bad mask shape at level %d" % level)
            m.setflags(write=False)
        if not omega[0].all():
            raise ValueError("level 0 must cover the unit square")
        for level in range(1, len(omega)):
            if np.any(omega[level] & ~_upsample(omega[level - 1])):
                raise ValueError("domains are not nested at level %d" % level)
            if np.any(_upsample(_coarsen(omega[level])) != omega[level]):
                raise ValueError("level %d domain is not a union of parent elements" % level)
        self.omega = tuple(omega)
        self._active = None
        self._elem_index = None

    @property
    def n_levels(self) -> int:
        return len(self.omega)

    def n(self, level: int) -> int:
        return self.n0 << level

    def active_mask(self, level: int) -> np.ndarray:
        m = self.omega[level]
        if level + 1 < self.n_levels:
            m = m & ~_coarsen(self.omega[level + 1])
        return m

    def active_elements(self) -> np.ndarray:
        """Active elements as rows ``(level, i, j)``, sorted by level then index."""
        if self._active is None:
            rows = []
            for level in range(self.n_levels):
                i, j = np.nonzero(self.active_mask(level))
                rows.append(np.column_stack([np.full(len(i), level), i, j]))
            self._active = np.concatenate(rows).astype(np.int64)
            self._active.setflags(write=False)
        return self._active

    @property
    def n_elements(self) -> int:
        return len(self.active_elements())

    def element_index(self, level: int) -> np.ndarray:
        """Map level-``level`` element ``(i, j)`` to its active-element number or -1."""
        if self._elem_index is None:
            idx = [np.full((self.n(lv), self.n(lv)), -1, dtype=np.int64)
                   for lv in range(self.n_levels)]
            for e, (lv, i, j) in enumerate(self.active_elements()):
                idx[lv][i, j] = e
            self._elem_index = idx
        return self._elem_index[level]

    def element_bounds(self) -> np.ndarray:
        """``(ne, 4)`` array of ``(xi0, xi1, eta0, eta1)`` per active element."""
        el = self.active_elements()
        h = 1.0 / (self.n0 * (2.0 ** el[:, 0]))
        return np.column_stack([el[:, 1] * h, (el[:, 1] + 1) * h,
                                el[:, 2] * h, (el[:, 2] + 1) * h])

    def locate(self, u, v) -> np.ndarray:
        """Active element containing each point (right-continuous, closed at 1)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
            raise ValueError("point outside the unit square")
        out = np.full(u.shape, -1, dtype=np.int64)
        for level in range(self.n_levels - 1, -1, -1):
            todo = out < 0
            if not todo.any():
                break
            n = self.n(level)
            i = np.minimum((u[todo] * n).astype(np.int64), n - 1)
            j = np.minimum((v[todo] * n).astype(np.int64), n - 1)
            out[todo] = self.element_index(level)[i, j]
        return out

    def refine(self, elements) -> "HierarchicalMesh":
        """New mesh with the given active elements ``(level, i, j)`` bisected."""
        omega = [m.copy() for m in self.omega]
        for level, i, j in elements:
            level, i, j = int(level), int(i), int(j)
            if not self.active_mask(level)[i, j]:
                continue
            if level + 1 >= self.max_levels:
                raise RefinementError("hierarchy depth cap of %d levels reached" % self.max_levels)
            if level + 1 == len(omega):
                omega.append(np.zeros((self.n(level + 1),) * 2, dtype=bool))
            omega[level + 1][2 * i:2 * i + 2, 2 * j:2 * j + 2] = True
        return HierarchicalMesh(self.n0, omega, self.max_levels)

    def refine_all(self) -> "HierarchicalMesh":
        return self.refine(self.active_elements())

    def contains(self, other: "HierarchicalMesh") -> bool:
        """True if ``self`` is a refinement of ``other`` (or equal)."""
        if self.n0 != other.n0 or self.n_levels < other.n_levels:
            return False
        return all(not np.any(other.omega[lv] & ~self.omega[lv]) for lv in range(other.n_levels))

    def same_as(self, other: "HierarchicalMesh") -> bool:
        return self.contains(other) and other.contains(self)

    def to_dict(self) -> dict:
        levels = []
        for level in range(1, self.n_levels):
            parents = _coarsen(self.omega[level])
            i, j = np.nonzero(parents)
            levels.append([[int(a), int(b)] for a, b in zip(i, j)])
        return {"n0": self.n0, "max_levels": self.max_levels, "refined": levels}

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchicalMesh":
        mesh = cls(int(d["n0"]), max_levels=int(d.get("max_levels", MAX_LEVELS)))
        omega = [np.ones((mesh.n0, mesh.n0), dtype=bool)]
        for level, parents in enumerate(d.get("refined", []), start=1):
            m = np.zeros((mesh.n(level - 1),) * 2, dtype=bool)
            for i, j in parents:
                m[i, j] = True
            omega.append(_upsample(m))
        return cls(mesh.n0, omega, mesh.max_levels)


@lru_cache(maxsize=None)
def _level_knots(n: int, p: int, reg: int) -> KnotVector:
    return uniform_knot_vector(n, p, reg)


@lru_cache(maxsize=None)
def _level_subdivision(n: int, p: int, reg: int):
    """Padded per-row (cols, vals) of the 1D two-scale matrix from n to 2n elements."""
    S = subdivision_matrix(_level_knots(n, p, reg), _level_knots(2 * n, p, reg)).tocsr()
    nnz = np.diff(S.indptr)
    w = int(nnz.max())
    cols = np.zeros((S.shape[0], w), dtype=np.int64)
    vals = np.zeros((S.shape[0], w))
    for r in range(S.shape[0]):
        a, b = S.indptr[r], S.indptr[r + 1]
        cols[r, : b - a] = S.indices[a:b]
        vals[r, : b - a] = S.data[a:b]
    return cols, vals


@lru_cache(maxsize=None)
def _between_levels(n_coarse: int, n_fine: int, p: int, reg: int) -> np.ndarray:
    """Dense 1D two-scale matrix between two uniform levels."""
    return subdivision_matrix(_level_knots(n_coarse, p, reg), _level_knots(n_fine, p, reg)).toarray()


def _support_ranges(kv: KnotVector, n_el: int):
    p = kv.degree
    t = kv.knots
    lo = np.rint(t[: -p - 1] * n_el).astype(np.int64)
    hi = np.rint(t[p + 1:] * n_el).astype(np.int64)
    return lo, hi


def _box_counts(mask, lox, hix, loy, hiy):
    """Number of True cells of ``mask`` in the boxes ``[lox,hix) x [loy,hiy)`` (outer product)."""
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    return (sat[np.ix_(hix, hiy)] - sat[np.ix_(lox, hiy)]
            - sat[np.ix_(hix, loy)] + sat[np.ix_(lox, loy)])


class ThbSpace:
    """THB-spline space of degree ``degree`` and regularity ``regularity``.

    DOFs are numbered level by level, and within a level by tensor index.
    """

    def __init__(self, mesh: HierarchicalMesh, degree: int = 3, regularity: int | None = None):
        p = int(degree)
        reg = p - 1 if regularity is None else int(regularity)
        if not 0 <= reg <= p - 1:
            raise ValueError("regularity must lie in [0, p-1]")
        self.mesh = mesh
        self.degree = p
        self.regularity = reg
        self._build()

    # construction -----------------------------------------------------
    def _build(self):
        mesh, p, reg = self.mesh, self.degree, self.regularity
        L = mesh.n_levels
        self.kvs = [_level_knots(mesh.n(lv), p, reg) for lv in range(L)]
        nf = [kv.n_basis for kv in self.kvs]
        self.n_fun = nf

        touch, inside, active = [], [], []
        for lv in range(L):
            lo, hi = _support_ranges(self.kvs[lv], mesh.n(lv))
            area = np.outer(hi - lo, hi - lo)
            cnt = _box_counts(mesh.omega[lv], lo, hi, lo, hi)
            ins = cnt == area
            if lv + 1 < L:
                nxt = _box_counts(_coarsen(mesh.omega[lv + 1]), lo, hi, lo, hi) == area
            else:
                nxt = np.zeros_like(ins)
            touch.append((cnt > 0).ravel())
            inside.append(ins.ravel())
            active.append(np.nonzero((ins & ~nxt).ravel())[0])

        self.active_funcs = active
        counts = [len(a) for a in active]
        self.level_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.ndof = int(self.level_offsets[-1])
        self.dof_level = np.concatenate([np.full(c, lv) for lv, c in enumerate(counts)]).astype(np.int64)
        self.dof_tensor = np.concatenate(active).astype(np.int64)

        # C[l]: rows = level-l tensor functions touching Omega^l, cols = dofs
        self.rowpos = []
        self.C = []
        for lv in range(L):
            rows = np.nonzero(touch[lv])[0]
            pos = np.full(nf[lv] ** 2, -1, dtype=np.int64)
            pos[rows] = np.arange(len(rows))
            self.rowpos.append(pos)
            ident = sp.csr_matrix(
                (np.ones(counts[lv]), (pos[active[lv]], self.level_offsets[lv] + np.arange(counts[lv]))),
                shape=(len(rows), self.ndof))
            if lv == 0:
                self.C.append(ident)
                continue
            S = self._restricted_two_scale(lv - 1, rows)
            Cn = (S @ self.C[lv - 1]).tocsr()
            keep = (~inside[lv][rows]).astype(float)
            Cn = (sp.diags(keep) @ Cn).tocsr()
            Cn = (Cn + ident).tocsr()
            Cn.eliminate_zeros()
            self.C.append(Cn)

        self._build_extraction()
        self._build_boundary_mask()

    def _restricted_two_scale(self, lv, fine_rows):
        """Rows ``fine_rows`` of the level lv -> lv+1 tensor two-scale matrix."""
        mesh, p, reg = self.mesh, self.degree, self.regularity
        cols1, vals1 = _level_subdivision(mesh.n(lv), p, reg)
        nf1 = self.n_fun[lv + 1]
        nc = self.n_fun[lv]
        ix, iy = np.divmod(fine_rows, nf1)
        cols = cols1[ix][:, :, None] * nc + cols1[iy][:, None, :]
        vals = vals1[ix][:, :, None] * vals1[iy][:, None, :]
        r = np.broadcast_to(np.arange(len(fine_rows))[:, None, None], cols.shape)
        nz = vals != 0.0
        cpos = self.rowpos[lv][cols[nz]]
        if np.any(cpos < 0):
            raise AssertionError("two-scale relation reaches outside the coarse domain")
        return sp.csr_matrix((vals[nz], (r[nz], cpos)), shape=(len(fine_rows), self.C[lv].shape[0]))

    def _build_extraction(self):
        mesh, p = self.mesh, self.degree
        nloc = (p + 1) ** 2
        el = mesh.active_elements()
        ne = len(el)
        a = np.arange(p + 1)
        e_parts, l_parts, d_parts, v_parts = [], [], [], []
        for lv in range(mesh.n_levels):
            sel = np.nonzero(el[:, 0] == lv)[0]
            if len(sel) == 0:
                continue
            spans = self.kvs[lv].element_spans()
            sx = spans[el[sel, 1]] - p
            sy = spans[el[sel, 2]] - p
            nf = self.n_fun[lv]
            tens = ((sx[:, None] + a)[:, :, None] * nf + (sy[:, None] + a)[:, None, :]).reshape(len(sel), nloc)
            rows = self.rowpos[lv][tens]
            C = self.C[lv]
            start = C.indptr[rows]
            length = C.indptr[rows + 1] - start
            tot = int(length.sum())
            rep_e = np.repeat(np.broadcast_to(sel[:, None], rows.shape).ravel(), length.ravel())
            rep_l = np.repeat(np.broadcast_to(np.arange(nloc)[None, :], rows.shape).ravel(), length.ravel())
            offs = np.repeat(np.cumsum(length.ravel()) - length.ravel(), length.ravel())
            ptr = np.repeat(start.ravel(), length.ravel()) + (np.arange(tot) - offs)
            e_parts.append(rep_e); l_parts.append(rep_l)
            d_parts.append(C.indices[ptr]); v_parts.append(C.data[ptr])
        ee = np.concatenate(e_parts); ll = np.concatenate(l_parts)
        dd = np.concatenate(d_parts); vv = np.concatenate(v_parts)
        key = ee * self.ndof + dd
        ukey, inv = np.unique(key, return_inverse=True)
        uel = ukey // self.ndof
        first = np.searchsorted(uel, np.arange(ne))
        col = np.arange(len(ukey)) - first[uel]
        K = int(np.bincount(uel, minlength=ne).max())
        self.ext_idx = np.zeros((ne, K), dtype=np.int64)
        self.ext_mask = np.zeros((ne, K), dtype=bool)
        self.ext = np.zeros((ne, K, nloc))
        self.ext_idx[uel, col] = ukey % self.ndof
        self.ext_mask[uel, col] = True
        self.ext[ee, col[inv], ll] = vv

    def _build_boundary_mask(self):
        p = self.degree
        el = self.mesh.active_elements()
        E = np.abs(self.ext).reshape(len(el), -1, p + 1, p + 1)
        mask = np.zeros(self.ndof, dtype=bool)
        n_l = self.mesh.n0 * (2 ** el[:, 0])
        tests = [(el[:, 2] == 0, (slice(None), 0)),
                 (el[:, 2] == n_l - 1, (slice(None), p)),
                 (el[:, 1] == 0, (0, slice(None))),
                 (el[:, 1] == n_l - 1, (p, slice(None)))]
        for sel, (sa, sb) in tests:
            if not sel.any():
                continue
            hit = (E[sel][:, :, sa, sb] > 1e-13).reshape(sel.sum(), E.shape[1], -1).any(axis=2)
            mask[self.ext_idx[sel][hit & self.ext_mask[sel]]] = True
        mask.setflags(write=False)
        self.boundary_mask = mask
        self.interior_dofs = np.nonzero(~mask)[0]
        self.boundary_dofs = np.nonzero(mask)[0]

    # evaluation -------------------------------------------------------
    def local_tensor_values(self, elem_ids, u, v, nderiv):
        """Values of the (p+1)^2 local tensor functions; shape ``(..., nd, (p+1)^2)``."""
        p = self.degree
        shape = np.shape(u)
        el = self.mesh.active_elements()[np.broadcast_to(elem_ids, shape)].reshape(-1, 3)
        u = np.ravel(u); v = np.ravel(v)
        lvl, ei, ej = el[:, 0], el[:, 1], el[:, 2]
        pairs = DERIV_PAIRS[: {0: 1, 1: 3, 2: 6}[nderiv]]
        out = np.empty((len(u), len(pairs), (p + 1) ** 2))
        for lv in np.unique(lvl):
            s = lvl == lv
            kv = self.kvs[lv]
            spans = kv.element_spans()
            _, bx = basis_derivatives(kv, u[s], nderiv, spans[ei[s]])
            _, by = basis_derivatives(kv, v[s], nderiv, spans[ej[s]])
            for k, (dx, dy) in enumerate(pairs):
                out[s, k] = (bx[:, dx, :, None] * by[:, dy, None, :]).reshape(s.sum(), -1)
        return out.reshape(shape + (len(pairs), (p + 1) ** 2))

    def tabulate_elements(self, u, v, nderiv=2):
        """Basis on per-element point sets ``u, v`` of shape ``(ne, nq)``.

        Returns ``(idx, vals)`` with ``idx (ne, K)`` and ``vals (ne, nq, nd, K)``.
        """
        ne = self.mesh.n_elements
        elem = np.broadcast_to(np.arange(ne)[:, None], np.shape(u))
        loc = self.local_tensor_values(elem, u, v, nderiv)
        vals = np.einsum("eqdl,ekl->eqdk", loc, self.ext, optimize=True)
        return self.ext_idx, vals

    def tabulate_points(self, u, v, nderiv=0, chunk=4096):
        """Basis at arbitrary points: ``idx (npts, K)``, ``vals (npts, nd, K)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        elem = self.mesh.locate(u, v)
        nd = {0: 1, 1: 3, 2: 6}[nderiv]
        vals = np.empty((len(u), nd, self.ext.shape[1]))
        for a in range(0, len(u), chunk):
            s = slice(a, a + chunk)
            loc = self.local_tensor_values(elem[s], u[s], v[s], nderiv)
            vals[s] = np.matmul(loc, self.ext[elem[s]].transpose(0, 2, 1))
        return self.ext_idx[elem], vals

    def element_coefficients(self, coeffs):
        """Coefficients of a field in each element's local tensor basis, ``(ne, (p+1)^2, ...)``."""
        c = np.asarray(coeffs, dtype=float)[self.ext_idx]
        return np.einsum("ekl,ek...->el...", self.ext, c)

    def evaluate(self, coeffs, u, v, nderiv=0, local=None):
        """Evaluate a field with coefficient array ``coeffs`` (ndof or ndof x m).

        ``local`` may carry a precomputed :meth:`element_coefficients` array
        when the same field is evaluated repeatedly.
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        cl = self.element_coefficients(coeffs) if local is None else local
        elem = self.mesh.locate(u, v)
        loc = self.local_tensor_values(elem, u, v, nderiv)
        if cl.ndim == 2:
            return np.einsum("mdl,ml->md", loc, cl[elem])
        return np.matmul(loc, cl[elem])

    # bookkeeping ------------------------------------------------------
    def support_elements(self, dof: int):
        """Level and element index box ``[lox, hix) x [loy, hiy)`` of a DOF's tensor function."""
        lv = int(self.dof_level[dof])
        ix, iy = divmod(int(self.dof_tensor[dof]), self.n_fun[lv])
        lo, hi = _support_ranges(self.kvs[lv], self.mesh.n(lv))
        return lv, lo[ix], hi[ix], lo[iy], hi[iy]

    def compatible(self, other: "ThbSpace") -> bool:
        return (self.degree == other.degree and self.regularity == other.regularity
                and self.mesh.same_as(other.mesh))

    def to_dict(self) -> dict:
        return {"degree": self.degree, "regularity": self.regularity, "mesh": self.mesh.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ThbSpace":
        return cls(HierarchicalMesh.from_dict(d["mesh"]), int(d["degree"]), int(d["regularity"]))

    def __repr__(self):
        return "ThbSpace(p=%d, reg=%d, levels=%d, ndof=%d)" % (
            self.degree, self.regularity, self.mesh.n_levels, self.ndof)


def uniform_space(n: int, degree: int = 3, regularity: int | None = None) -> ThbSpace:
    """Single-level tensor space on an ``n x n`` grid."""
    return ThbSpace(HierarchicalMesh(n), degree, regularity)


@dataclass(eq=False)
class GeometryMap:
    """Spline map ``(0,1)^2 -> R^2`` with one 2-vector coefficient per DOF."""

    space: ThbSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.space.ndof, 2):
            raise ValueError("expected %d x 2 coefficients, got %s" % (self.space.ndof, c.shape))
        self.coeffs = c

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        return self.space.evaluate(self.coeffs, pts[:, 0], pts[:, 1])[:, 0]

    def copy(self) -> "GeometryMap":
        return GeometryMap(self.space, self.coeffs.copy())

    def with_coeffs(self, coeffs) -> "GeometryMap":
        return GeometryMap(self.space, coeffs)


@dataclass(frozen=True, eq=False)
class MapEval:
    """Pointwise map data; ``jacobian[m, i, j] = d x_i / d xi_j``."""

    values: np.ndarray
    jacobian: np.ndarray | None = None
    hessian: np.ndarray | None = None


def eval_map(gmap: GeometryMap, pts, max_deriv: int = 0) -> MapEval:
    """Values, Jacobians and per-component Hessians of ``gmap`` at ``pts``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if max_deriv not in (0, 1, 2):
        raise ValueError("max_deriv must be 0, 1 or 2")
    r = gmap.space.evaluate(gmap.coeffs, pts[:, 0], pts[:, 1], max_deriv)
    jac = hess = None
    if max_deriv >= 1:
        jac = np.stack([r[:, 1], r[:, 2]], axis=-1)
    if max_deriv == 2:
        hess = np.empty((len(pts), 2, 2, 2))
        hess[:, :, 0, 0] = r[:, 3]
        hess[:, :, 0, 1] = hess[:, :, 1, 0] = r[:, 4]
        hess[:, :, 1, 1] = r[:, 5]
    return MapEval(r[:, 0], jac, hess)


def refine_functions(space: ThbSpace, marked) -> ThbSpace:
    """Refine the coarsest active elements supporting each marked function."""
    marked = sorted(set(int(i) for i in marked))
    if not marked:
        return space
    if marked[0] < 0 or marked[-1] >= space.ndof:
        raise IndexError("marked DOF out of range")
    mesh = space.mesh
    elems = []
    for dof in marked:
        lv, lox, hix, loy, hiy = space.support_elements(dof)
        act = mesh.active_mask(lv)[lox:hix, loy:hiy]
        i, j = np.nonzero(act)
        elems.extend((lv, lox + a, loy + b) for a, b in zip(i, j))
    return ThbSpace(mesh.refine(elems), space.degree, space.regularity)


def refine_uniformly(space: ThbSpace) -> ThbSpace:
    return ThbSpace(space.mesh.refine_all(), space.degree, space.regularity)


def prolong(gmap: GeometryMap, fine: ThbSpace) -> GeometryMap:
    """Represent ``gmap`` exactly in the nested space ``fine``.

    Each fine coefficient is read off from the local level representation of
    the coarse map on an active element where the fine function is not
    truncated.
    """
    coarse = gmap.space
    if coarse.degree != fine.degree or coarse.regularity != fine.regularity:
        raise ValueError("spaces differ in degree or regularity")
    if not fine.mesh.contains(coarse.mesh):
        raise ValueError("target space is not nested above the source space")
    p, reg = fine.degree, fine.regularity
    out = np.empty((fine.ndof, 2))
    fmesh = fine.mesh
    for dof in range(fine.ndof):
        lv, lox, hix, loy, hiy = fine.support_elements(dof)
        act = fmesh.active_mask(lv)[lox:hix, loy:hiy]
        i, j = np.argwhere(act)[0]
        ei, ej = lox + i, loy + j
        h = 1.0 / fmesh.n(lv)
        ce = int(coarse.mesh.locate(np.array([(ei + 0.5) * h]), np.array([(ej + 0.5) * h]))[0])
        clv, ci, cj = coarse.mesh.active_elements()[ce]
        spans = coarse.kvs[clv].element_spans()
        sx, sy = spans[ci] - p, spans[cj] - p
        loc = np.einsum("kl,kc->lc", coarse.ext[ce], gmap.coeffs[coarse.ext_idx[ce]])
        loc = loc.reshape(p + 1, p + 1, 2)
        ix, iy = divmod(int(fine.dof_tensor[dof]), fine.n_fun[lv])
        S = _between_levels(coarse.mesh.n(clv), fmesh.n(lv), p, reg)
        wx = S[ix, sx:sx + p + 1]
        wy = S[iy, sy:sy + p + 1]
        out[dof] = np.einsum("a,b,abc->c", wx, wy, loc)
    return GeometryMap(fine, out)


def greville_points(space: ThbSpace) -> np.ndarray:
    """Greville abscissae ``(ndof, 2)`` of every active function at its own level."""
    p = space.degree
    out = np.empty((space.ndof, 2))
    for lv, kv in enumerate(space.kvs):
        t = kv.knots
        g = np.array([t[i + 1:i + p + 1].mean() for i in range(kv.n_basis)])
        sel = slice(space.level_offsets[lv], space.level_offsets[lv + 1])
        ix, iy = np.divmod(space.dof_tensor[sel], space.n_fun[lv])
        out[sel, 0] = g[ix]
        out[sel, 1] = g[iy]
    return out


def identity_map(space: ThbSpace) -> GeometryMap:
    """The identity of the unit square; truncation preserves the Greville coefficients."""
    return GeometryMap(space, greville_points(space))


ADJOINT_MODES = ("k", "h", "hk")


def adjoint_space(space: ThbSpace, mode: str = "k") -> ThbSpace:
    """Enriched space for adjoint problems.

    ``'k'``: degree ``p+1`` and regularity ``reg+1`` on the same element
    hierarchy.  ``'h'``: same degree on the uniformly refined hierarchy.
    ``'hk'``: both enrichments.
    """
    if mode == "k":
        return ThbSpace(space.mesh, space.degree + 1, space.regularity + 1)
    if mode == "h":
        return ThbSpace(space.mesh.refine_all(), space.degree, space.regularity)
    if mode == "hk":
        return ThbSpace(space.mesh.refine_all(), space.degree + 1, space.regularity + 1)
    raise ValueError("mode must be one of %s" % (ADJOINT_MODES,))


def build_initial_space(n0=DEFAULT_N0, boundary=None, fit_tol=DEFAULT_FIT_TOL, degree=3, regularity=None,
                        max_levels=MAX_LEVELS, max_rounds=50):
    """Refine an ``n0 x n0`` grid near the boundary until the boundary fit is good.

    Boundary elements whose L2 trace-fit error exceeds ``fit_tol`` mark the
    boundary functions supported on them; those are refined function-wise so
    that every round adds new trace functions.
    """
    from .assembly import trace_fit_errors

    if boundary is None:
        raise ValueError("build_initial_space needs boundary data")
    space = ThbSpace(HierarchicalMesh(n0, max_levels=max_levels), degree, regularity)
    for _ in range(max_rounds):
        errs, elems = trace_fit_errors(space, boundary)
        bad = elems[errs > fit_tol]
        if len(bad) == 0:
            return space
        marked = set()
        for e in bad:
            marked.update(int(d) for d, m in zip(space.ext_idx[e], space.ext_mask[e])
                          if m and space.boundary_mask[d])
        try:
            space = refine_functions(space, marked)
        except RefinementError:
            raise RefinementError("boundary fit tolerance %.3e not reached; achieved %.3e"
                                  % (fit_tol, errs.max())) from None
    errs, _ = trace_fit_errors(space, boundary)
    raise RefinementError("boundary fit tolerance %.3e not reached; achieved %.3e" % (fit_tol, errs.max()))
