import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thbgrid import assembly as asm
from thbgrid.boundary import coons_patch
from thbgrid.dwr import (ResidualDecomposition, adapt_loop, decompose_residual, make_goal,
                         mark, solve_adjoint)
from thbgrid.geometries import horseshoe, quarter_annulus, square
from thbgrid.solvers import SolverConfig, newton_solve, solve
from thbgrid.thb import GeometryMap, adjoint_space, prolong, uniform_space

TIGHT = SolverConfig(tol_residual=1e-13)


@pytest.fixture(scope="module")
def annulus4():
    x, _ = newton_solve(coons_patch(quarter_annulus(), uniform_space(4)), TIGHT)
    return x


@pytest.fixture(scope="module")
def horseshoe_folded(horseshoe_coarse_space):
    x, rep = solve(coons_patch(horseshoe(), horseshoe_coarse_space), SolverConfig())
    assert rep.n_negative > 0
    return x


def decomposition(rt):
    rt = np.asarray(rt, dtype=float)
    return ResidualDecomposition(rt.copy(), np.ones_like(rt), float(rt.sum()))


class TestGoal:
    def test_bijectivity_goal_is_nonpositive(self, horseshoe_folded):
        goal = make_goal("bijectivity", horseshoe_folded)
        assert len(goal.points) > 0
        assert goal.value(horseshoe_folded) < 0

    def test_bijectivity_derivative_vs_fd(self, horseshoe_folded, rng):
        goal = make_goal("bijectivity", horseshoe_folded)
        V = horseshoe_folded.space
        d = goal.derivative(horseshoe_folded, V)
        v = rng.standard_normal(len(d))
        h = 1e-6
        step = asm.unpack(V, h * v, np.zeros_like(horseshoe_folded.coeffs))
        fd = (goal.value(horseshoe_folded.with_coeffs(horseshoe_folded.coeffs + step))
              - goal.value(horseshoe_folded.with_coeffs(horseshoe_folded.coeffs - step))) / (2 * h)
        assert abs(fd - d @ v) <= 1e-6 * max(1.0, abs(fd))

    def test_winslow_goal_sign(self, annulus4):
        assert make_goal("winslow").value(annulus4) == -asm.winslow_value_and_gradient(annulus4)[0]

    def test_errors(self):
        with pytest.raises(ValueError):
            make_goal("area")
        with pytest.raises(ValueError):
            make_goal("bijectivity")


class TestAdjoint:
    def test_no_negative_points_gives_zero(self, annulus4):
        sol = solve_adjoint(annulus4, make_goal("bijectivity", annulus4))
        assert sol.rhs_norm == 0 and not sol.z.coeffs.any()

    @pytest.mark.parametrize("mode", ["k", "h"])
    def test_consistency(self, annulus4, mode, rng):
        Z = adjoint_space(annulus4.space, mode)
        goal = make_goal("winslow")
        sol = solve_adjoint(annulus4, goal, Z)
        xz = annulus4 if mode == "k" else prolong(annulus4, Z)
        q = asm.default_order(Z)
        J = asm.jacobian_F(xz, q=q, test_space=Z, dir_space=Z)
        L = goal.derivative(xz, Z, q=q)
        z = asm.pack(Z, sol.z.coeffs)
        for _ in range(10):
            phi = rng.standard_normal(J.shape[1])
            assert abs(z @ (J @ phi) - L @ phi) <= 1e-9 * max(1.0, abs(L @ phi))

    def test_vanishes_on_boundary(self, annulus4):
        sol = solve_adjoint(annulus4, make_goal("winslow"))
        assert not sol.z.coeffs[sol.z.space.boundary_dofs].any()

    def test_winslow_adjoint_shrinks_under_refinement(self, annulus):
        norms = []
        for n in (4, 8):
            x, _ = newton_solve(coons_patch(annulus, uniform_space(n)), TIGHT)
            norms.append(np.abs(solve_adjoint(x, make_goal("winslow")).z.coeffs).max())
        assert norms[1] < norms[0]


class TestDecomposition:
    def test_zero_adjoint(self, annulus4):
        Z = adjoint_space(annulus4.space)
        dec = decompose_residual(annulus4, GeometryMap(Z, np.zeros((Z.ndof, 2))))
        assert not dec.r.any() and dec.estimate == 0

    def test_weights_are_positive_and_sum_to_one(self, annulus4):
        dec = decompose_residual(annulus4, solve_adjoint(annulus4, make_goal("winslow")).z)
        assert dec.w.min() > 0 and abs(dec.w.sum() - 1) <= 1e-13

    def test_reassembles_unsplit_estimate(self, annulus4):
        # with an h-refined adjoint, z - psi lives in the adjoint space and the
        # unsplit form is a plain residual evaluation
        V = annulus4.space
        Z = adjoint_space(V, "h")
        z = solve_adjoint(annulus4, make_goal("winslow"), Z).z
        dec = decompose_residual(annulus4, z)
        psi = asm.l2_project(z, V, "interior", q=asm.default_order(Z) + 1)
        e = z.coeffs - prolong(psi, Z).coeffs
        xz = prolong(annulus4, Z)
        F = asm.residual_F(xz, q=asm.default_order(Z) + 1, test_space=Z)
        unsplit = -F @ asm.pack(Z, e)
        assert abs(dec.estimate - unsplit) <= 1e-12 * abs(unsplit)
        assert abs(dec.r.sum() - dec.estimate) <= 1e-14

    def test_psi_choice_keeps_total(self, annulus4):
        z = solve_adjoint(annulus4, make_goal("winslow")).z
        a = decompose_residual(annulus4, z, "l2-projection")
        b = decompose_residual(annulus4, z, "zero")
        assert abs(a.estimate - b.estimate) <= 1e-10
        assert np.abs(a.r - b.r).max() > 1e-3 * np.abs(a.r).max()

    def test_bad_psi(self, annulus4):
        with pytest.raises(ValueError):
            decompose_residual(annulus4, solve_adjoint(annulus4, make_goal("winslow")).z, "mean")


class TestMark:
    def test_threshold(self):
        assert mark(decomposition([1.0, 0.15, 0.5]), 0.2) == [0, 2]

    def test_beta_zero(self):
        assert mark(decomposition([0.0, -0.1, 2.0, 0.0]), 0.0) == [1, 2]

    def test_beta_one(self):
        assert mark(decomposition([0.3, -0.7, 0.7, 0.1]), 1.0) == [1, 2]

    def test_positive_only(self):
        assert mark(decomposition([0.3, -0.7, 0.2]), 0.5, positive_only=True) == [0, 2]

    def test_all_zero(self):
        assert mark(decomposition(np.zeros(4))) == []

    def test_uses_weighted_contributions(self):
        dec = ResidualDecomposition(np.array([1.0, 0.5]), np.array([1.0, 0.1]), 1.5)
        assert mark(dec, 0.5) == [1]

    @pytest.mark.parametrize("beta", [-0.1, 1.5])
    def test_bad_beta(self, beta):
        with pytest.raises(ValueError):
            mark(decomposition([1.0]), beta)

    @settings(max_examples=50, deadline=None)
    @given(r=st.lists(st.floats(-10, 10), min_size=1, max_size=30),
           b1=st.floats(0, 1), b2=st.floats(0, 1))
    def test_monotone_in_beta(self, r, b1, b2):
        lo, hi = min(b1, b2), max(b1, b2)
        dec = decomposition(r)
        assert set(mark(dec, hi)) <= set(mark(dec, lo))


class TestAdaptLoop:
    def test_already_bijective(self):
        x, reports = adapt_loop(coons_patch(square(), uniform_space(3)), "bijectivity")
        assert len(reports) == 1 and reports[0].extra["goal_met"]
        assert x.space.ndof == uniform_space(3).ndof

    def test_horseshoe(self, horseshoe_boundary, horseshoe_coarse_space):
        x0 = coons_patch(horseshoe_boundary, horseshoe_coarse_space)
        x, reports = adapt_loop(x0, "bijectivity", SolverConfig(), beta=0.2, boundary=horseshoe_boundary)
        recs = [r.extra for r in reports]
        assert recs[0]["n_negative"] > 0 and recs[-1]["goal_met"]
        assert len(reports) - 1 <= 6
        assert all(r["estimate"] >= -1e-8 for r in recs if r["estimate"] is not None)
        assert [r["round"] for r in recs] == list(range(len(recs)))

    def test_positive_only_needs_no_fewer_rounds(self, horseshoe_boundary, horseshoe_coarse_space):
        x0 = coons_patch(horseshoe_boundary, horseshoe_coarse_space)
        _, absolute = adapt_loop(x0, "bijectivity", beta=0.2, boundary=horseshoe_boundary)
        _, positive = adapt_loop(x0, "bijectivity", beta=0.2, boundary=horseshoe_boundary, positive_only=True)
        assert positive[-1].extra["goal_met"]
        assert len(positive) >= len(absolute)

    def test_round_cap(self, horseshoe_boundary, horseshoe_coarse_space):
        x0 = coons_patch(horseshoe_boundary, horseshoe_coarse_space)
        x, reports = adapt_loop(x0, "bijectivity", max_rounds=0, boundary=horseshoe_boundary)
        assert len(reports) == 1 and not reports[0].extra["goal_met"]
        assert "round cap" in reports[0].extra["warning"]
        assert reports[0].n_negative > 0

    def test_winslow_goal(self, annulus):
        x0 = coons_patch(annulus, uniform_space(3))
        x, reports = adapt_loop(x0, "winslow", TIGHT, winslow_tol=1e-7, max_rounds=3, boundary=annulus)
        est = [abs(r.extra["estimate"]) for r in reports]
        assert x.space.ndof > x0.space.ndof
        assert est[-1] < est[0]

    def test_bad_goal(self):
        with pytest.raises(ValueError):
            adapt_loop(coons_patch(square(), uniform_space(2)), "area")
