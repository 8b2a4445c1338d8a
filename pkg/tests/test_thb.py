import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import qmc

from thbgrid import assembly as asm
from thbgrid.boundary import BoundaryData, fit_curve
from thbgrid.geometries import horseshoe, square
from thbgrid.thb import (DEFAULT_N0, GeometryMap, HierarchicalMesh, RefinementError, ThbSpace, adjoint_space,
                         build_initial_space, eval_map, greville_points, identity_map, prolong, refine_functions,
                         refine_uniformly, uniform_space)


def halton(n, seed=0):
    return qmc.Halton(2, seed=seed).random(n)


def basis_matrix(space, pts, nderiv=0, row=0):
    """Dense (npts, ndof) matrix of basis values (or derivative row)."""
    idx, vals = space.tabulate_points(pts[:, 0], pts[:, 1], nderiv)
    B = np.zeros((len(pts), space.ndof))
    np.add.at(B, (np.repeat(np.arange(len(pts)), idx.shape[1]), idx.ravel()), vals[:, row].ravel())
    return B


def random_space(seed, rounds=3, p=3, reg=2, n0=3):
    rng = np.random.default_rng(seed)
    S = uniform_space(n0, p, reg)
    for _ in range(rounds):
        k = max(1, S.ndof // 6)
        S = refine_functions(S, rng.choice(S.ndof, size=k, replace=False))
    return S


def element_area(mesh):
    b = mesh.element_bounds()
    return (b[:, 1] - b[:, 0]) * (b[:, 3] - b[:, 2])


class TestHierarchicalMesh:
    def test_uniform(self):
        m = HierarchicalMesh(4)
        assert m.n_levels == 1 and m.n_elements == 16

    def test_covers_unit_square_once(self):
        m = HierarchicalMesh(3).refine([(0, 1, 1), (0, 0, 2)])
        m = m.refine([(1, 2, 2), (1, 3, 3)])
        assert abs(element_area(m).sum() - 1) < 1e-14
        pts = halton(500)
        el = m.locate(pts[:, 0], pts[:, 1])
        b = m.element_bounds()[el]
        assert np.all((b[:, 0] <= pts[:, 0]) & (pts[:, 0] <= b[:, 1]))
        assert np.all((b[:, 2] <= pts[:, 1]) & (pts[:, 1] <= b[:, 3]))

    def test_refining_inactive_is_ignored(self):
        m = HierarchicalMesh(2).refine([(0, 0, 0)])
        assert m.refine([(0, 0, 0)]).same_as(m)

    def test_depth_cap(self):
        m = HierarchicalMesh(2, max_levels=2).refine([(0, 0, 0)])
        with pytest.raises(RefinementError):
            m.refine([(1, 0, 0)])

    def test_rejects_non_nested_masks(self):
        with pytest.raises(ValueError):
            HierarchicalMesh(2, [np.ones((2, 2)), np.eye(4)])

    def test_outside_point(self):
        with pytest.raises(ValueError):
            HierarchicalMesh(2).locate(np.array([1.2]), np.array([0.5]))

    def test_dict_round_trip(self):
        m = HierarchicalMesh(3).refine([(0, 2, 1)]).refine([(1, 4, 2)])
        assert HierarchicalMesh.from_dict(m.to_dict()).same_as(m)


class TestThbSpace:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("p,reg", [(3, 2), (2, 1), (3, 1), (4, 3), (2, 0)])
    def test_partition_of_unity_and_nonnegativity(self, seed, p, reg):
        S = random_space(seed, p=p, reg=reg)
        pts = halton(1000, seed)
        _, vals = S.tabulate_points(pts[:, 0], pts[:, 1], 1)
        assert np.abs(vals[:, 0].sum(-1) - 1).max() <= 1e-12
        assert np.abs(vals[:, 1:].sum(-1)).max() <= 1e-10
        assert vals[:, 0].min() >= -1e-13

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), rounds=st.integers(1, 3))
    def test_partition_of_unity_random_marks(self, seed, rounds):
        S = random_space(seed, rounds)
        pts = halton(200, seed)
        _, vals = S.tabulate_points(pts[:, 0], pts[:, 1])
        assert np.abs(vals[:, 0].sum(-1) - 1).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_independence(self, seed):
        S = random_space(seed)
        B = basis_matrix(S, halton(4 * S.ndof, seed))
        assert np.linalg.matrix_rank(B) == S.ndof

    @pytest.mark.parametrize("seed", range(3))
    def test_boundary_mask(self, seed):
        S = random_space(seed)
        assert np.array_equal(np.sort(np.concatenate([S.boundary_dofs, S.interior_dofs])), np.arange(S.ndof))
        t = np.linspace(0, 1, 101)
        z, o = np.zeros_like(t), np.ones_like(t)
        edge = np.vstack([np.c_[t, z], np.c_[t, o], np.c_[z, t], np.c_[o, t]])
        on_boundary = np.abs(basis_matrix(S, edge)).max(axis=0) > 1e-12
        np.testing.assert_array_equal(on_boundary, S.boundary_mask)

    def test_regularity_range(self):
        with pytest.raises(ValueError):
            ThbSpace(HierarchicalMesh(2), 3, 3)

    def test_dict_round_trip(self):
        S = random_space(1)
        T = ThbSpace.from_dict(S.to_dict())
        assert T.compatible(S) and T.ndof == S.ndof


class TestRefineFunctions:
    def test_single_interior_function(self):
        S = uniform_space(6, 3, 2)
        dof = int(S.interior_dofs[len(S.interior_dofs) // 2])
        lv, lox, hix, loy, hiy = S.support_elements(dof)
        R = refine_functions(S, [dof])
        expected = np.zeros((12, 12), dtype=bool)
        expected[2 * lox:2 * hix, 2 * loy:2 * hiy] = True
        np.testing.assert_array_equal(R.mesh.omega[1], expected)
        assert dof not in R.active_funcs[0]
        assert R.ndof > S.ndof

    def test_mark_all_is_uniform_refinement(self):
        S = uniform_space(4, 3, 2)
        R = refine_functions(S, range(S.ndof))
        assert R.ndof == (8 + 3) ** 2 == refine_uniformly(S).ndof

    def test_empty_mark_is_noop(self):
        S = uniform_space(3)
        assert refine_functions(S, []) is S

    def test_out_of_range(self):
        S = uniform_space(3)
        with pytest.raises(IndexError):
            refine_functions(S, [S.ndof])

    @pytest.mark.parametrize("seed", range(4))
    def test_nested(self, seed):
        rng = np.random.default_rng(seed)
        S = random_space(seed, rounds=1)
        R = refine_functions(S, rng.choice(S.ndof, 5, replace=False))
        g = GeometryMap(S, rng.standard_normal((S.ndof, 2)))
        pts = rng.random((200, 2))
        assert np.abs(prolong(g, R)(pts) - g(pts)).max() <= 1e-12


class TestProlong:
    def test_identity(self):
        S = random_space(2, rounds=1)
        F = random_space(2, rounds=2)
        x = prolong(identity_map(S), F)
        pts = halton(100)
        assert np.abs(x(pts) - pts).max() <= 1e-12
        assert np.abs(x.coeffs - greville_points(F)).max() <= 1e-12

    def test_constant(self):
        S = uniform_space(3)
        F = refine_functions(S, [0, 7, 12])
        x = prolong(GeometryMap(S, np.tile([2.5, -1.0], (S.ndof, 1))), F)
        np.testing.assert_allclose(x.coeffs, np.tile([2.5, -1.0], (F.ndof, 1)), atol=1e-14)

    def test_not_nested(self):
        with pytest.raises(ValueError, match="nested"):
            prolong(identity_map(uniform_space(4)), uniform_space(3))

    def test_degree_mismatch(self):
        with pytest.raises(ValueError):
            prolong(identity_map(uniform_space(2, 2)), uniform_space(4, 3))


class TestAdjointSpace:
    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_dimension(self, n):
        V = uniform_space(n, 3, 2)
        Z = adjoint_space(V)
        assert (Z.degree, Z.regularity) == (4, 3)
        assert Z.ndof == (n + 4) ** 2 and V.ndof == (n + 3) ** 2
        assert Z.ndof / V.ndof <= 2

    def test_partition_of_unity(self):
        Z = adjoint_space(random_space(3))
        pts = halton(300)
        _, vals = Z.tabulate_points(pts[:, 0], pts[:, 1])
        assert np.abs(vals[:, 0].sum(-1) - 1).max() <= 1e-12

    def test_not_contained_in_primal(self):
        V = uniform_space(4, 3, 2)
        Z = adjoint_space(V)
        pts = halton(2000)
        BV, BZ = basis_matrix(V, pts), basis_matrix(Z, pts)
        coef, *_ = np.linalg.lstsq(BV, BZ, rcond=None)
        assert np.linalg.norm(BV @ coef - BZ, axis=0).max() > 1e-8

    @pytest.mark.parametrize("mode,deg,levels", [("h", 3, 2), ("hk", 4, 2)])
    def test_other_modes(self, mode, deg, levels):
        Z = adjoint_space(uniform_space(3, 3, 2), mode)
        assert Z.degree == deg and Z.mesh.n_levels == levels

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            adjoint_space(uniform_space(2), "p")


class TestEvalMap:
    def test_identity(self):
        x = identity_map(random_space(0))
        r = eval_map(x, halton(50), 2)
        np.testing.assert_allclose(r.values, halton(50), atol=1e-13)
        np.testing.assert_allclose(r.jacobian, np.broadcast_to(np.eye(2), r.jacobian.shape), atol=1e-12)
        assert np.abs(r.hessian).max() <= 1e-11

    def test_affine(self):
        S = uniform_space(3)
        M, b = np.array([[2.0, 0.5], [-0.3, 1.5]]), np.array([1.0, -2.0])
        x = GeometryMap(S, greville_points(S) @ M.T + b)
        r = eval_map(x, halton(40), 2)
        np.testing.assert_allclose(r.jacobian, np.broadcast_to(M, r.jacobian.shape), atol=1e-12)
        assert np.abs(r.hessian).max() <= 1e-10

    def test_biquadratic_hessian(self):
        # x = (u^2 v + 3 u v^2, 2 u^2 v^2 - v^2), exact in any biquadratic space
        def f(p):
            u, v = p[:, 0], p[:, 1]
            return np.column_stack([u * u * v + 3 * u * v * v, 2 * u * u * v * v - v * v])
        x = asm.l2_project(f, uniform_space(3, 2, 1))
        pts = halton(30)
        u, v = pts[:, 0], pts[:, 1]
        r = eval_map(x, pts, 2)
        H = np.zeros((30, 2, 2, 2))
        H[:, 0] = np.stack([np.stack([2 * v, 2 * u + 6 * v], -1), np.stack([2 * u + 6 * v, 6 * u], -1)], 1)
        H[:, 1] = np.stack([np.stack([4 * v * v, 8 * u * v], -1), np.stack([8 * u * v, 4 * u * u - 2], -1)], 1)
        assert np.abs(r.hessian - H).max() <= 1e-12

    def test_outside(self):
        with pytest.raises(ValueError):
            eval_map(identity_map(uniform_space(2)), [[0.5, 1.5]])


def bumped_square():
    """Unit square whose south side carries a narrow bump near xi = 0.8."""
    sq = square()
    south = fit_curve(lambda t: np.column_stack([t, 0.08 * np.exp(-((t - 0.8) / 0.04) ** 2)]), 128)
    return BoundaryData(south, sq["east"], sq["north"], sq["west"])


class TestBuildInitialSpace:
    def test_square_needs_no_refinement(self):
        S = build_initial_space(DEFAULT_N0, square())
        assert S.mesh.n_levels == 1 and S.ndof == (DEFAULT_N0 + 3) ** 2

    def test_refinement_follows_local_feature(self):
        b = bumped_square()
        S = build_initial_space(7, b, 1e-3)
        assert S.mesh.n_levels > 1
        bnds = S.mesh.element_bounds()
        fine = S.mesh.active_elements()[:, 0] > 0
        # refinement stays within the supports of south-side functions near the
        # bump (the corner element also pulls in east-side functions)
        h = 1.0 / 7
        assert np.all(bnds[fine, 3] <= 4 * h + 1e-12)
        assert np.all(bnds[fine, 0] >= h - 1e-12)
        assert np.all(bnds[fine & (bnds[:, 1] < 1 - 4 * h), 2] <= h)
        # the fit error is measured independently by projecting onto the trace space
        errs, _ = asm.trace_fit_errors(S, b)
        assert errs.max() <= 1e-3

    def test_horseshoe(self):
        S = build_initial_space(7, horseshoe(), 1e-2)
        assert S.mesh.n_levels > 1
        assert asm.trace_fit_errors(S, horseshoe())[0].max() <= 1e-2

    def test_unreachable(self):
        with pytest.raises(RefinementError, match="achieved"):
            build_initial_space(3, bumped_square(), 1e-12, max_levels=2)

    def test_needs_boundary(self):
        with pytest.raises(ValueError):
            build_initial_space(7)
