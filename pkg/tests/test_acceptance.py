"""End-to-end acceptance checks.

Each test prints a single ``[criterion N] PASS|FAIL`` line with the measured
quantities and its runtime, then asserts.  Run on its own with::

    pytest tests/test_acceptance.py -s -q
"""
import sys
import time

import numpy as np
import pytest

from thbgrid import io, quality
from thbgrid import assembly as asm
from thbgrid.boundary import coons_patch
from thbgrid.domopt import (CONE_MARGIN, ControlMap, boundary_orth_pipeline, cone_constraint,
                            constraint_value_and_gradient, make_constraint, maxprinciple_reparam,
                            optimize_domain, recompute, sprime_postprocess)
from thbgrid.dwr import adapt_loop, decompose_residual, make_goal, solve_adjoint
from thbgrid.geometries import annulus_exact, horseshoe, quarter_annulus, skewed_quad, tube
from thbgrid.solvers import SolverConfig, direct_winslow, solve
from thbgrid.thb import (GeometryMap, HierarchicalMesh, ThbSpace, adjoint_space, build_initial_space,
                         identity_map, prolong, refine_uniformly, uniform_space)

NEWTON = SolverConfig(method="newton", tol_residual=1e-12)


@pytest.fixture
def report(capsys):
    """Print one verdict line straight to the terminal, bypassing capture."""
    def emit(number, ok, detail, seconds):
        with capsys.disabled():
            sys.stdout.write("\n[criterion %2d] %s  %s  (%.1f s)\n"
                             % (number, "PASS" if ok else "FAIL", detail, seconds))
        return ok
    return emit


def l2_error(x, exact, q=6):
    quad = asm.quadrature(x.space.mesh, q)
    val, _, _ = asm.field_on(asm.tabulate(x.space, quad), x.coeffs)
    ref = exact(quad.flat_points()).reshape(val.shape)
    return float(np.sqrt((((val - ref) ** 2).sum(-1) * quad.weights).sum()))


def det_field(x):
    quad = asm.quadrature(x.space.mesh, asm.default_order(x.space))
    _, jac, _ = asm.map_on(x, quad)
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


def winslow(x):
    return asm.winslow_value_and_gradient(x)[0]


def horseshoe_pipeline():
    """Coarse solve plus DWR bijectivity loop; returns everything criterion 4 inspects."""
    b = horseshoe()
    V0 = build_initial_space(5, b, 1e-2)
    x0 = coons_patch(b, V0)
    coarse, coarse_rep = solve(x0, SolverConfig(method="newton"))
    x, reports = adapt_loop(x0, "bijectivity", SolverConfig(method="newton"), beta=0.2, boundary=b)
    return b, V0, coarse, coarse_rep, x, reports


def test_criterion_1_exact_solution_recovery(report):
    t0 = time.perf_counter()
    b = quarter_annulus()
    errors, min_dets = [], []
    for n in (4, 8, 16):
        x, rep = solve(coons_patch(b, uniform_space(n, 3, 2)), NEWTON)
        assert rep.converged
        errors.append(l2_error(x, annulus_exact))
        min_dets.append(quality.bijectivity_scan(x)[0])
    factors = [errors[i] / errors[i + 1] for i in range(2)]
    dt = time.perf_counter() - t0
    ok = min(factors) >= 8 and min(min_dets) > 0 and dt <= 60
    report(1, ok, "L2 errors %s, reduction factors %s, min det J %.3g"
           % (["%.3e" % e for e in errors], ["%.1f" % f for f in factors], min(min_dets)), dt)
    assert ok


def test_criterion_2_solver_cross_agreement(report):
    t0 = time.perf_counter()
    x0 = coons_patch(quarter_annulus(), uniform_space(8, 3, 2))
    configs = {
        "newton": SolverConfig(method="newton", tol_residual=1e-12),
        "newton-krylov": SolverConfig(method="newton-krylov", tol_residual=1e-12),
        "ptc": SolverConfig(method="ptc", tol_increment=1e-12),
        "picard": SolverConfig(method="picard", mu=1e-2, tau="Id", tol_increment=1e-12),
    }
    coeffs, iters = {}, {}
    for name, cfg in configs.items():
        x, rep = solve(x0, cfg)
        assert rep.converged, (name, rep.message)
        coeffs[name], iters[name] = x.coeffs, rep.n_iterations
    names = list(coeffs)
    dist = max(np.abs(coeffs[a] - coeffs[c]).max() for a in names for c in names)
    dt = time.perf_counter() - t0
    ok = dist <= 1e-7 and max(iters.values()) <= 25 and dt <= 120
    report(2, ok, "max pairwise distance %.2e, iterations %s" % (dist, iters), dt)
    assert ok


def test_criterion_3_direct_minimizer_dominance(report, horseshoe_star):
    t0 = time.perf_counter()
    b = horseshoe()
    V = horseshoe_star.space
    rows = []
    for level in range(2):
        x0 = coons_patch(b, V)
        vals = {}
        for tau in ("Id", "ls", "div"):
            x, rep = solve(x0, SolverConfig(tau=tau, tol_residual=1e-12))
            assert rep.converged and rep.n_negative == 0
            vals[tau] = winslow(x)
            if tau == "Id":
                x_id = x
        xd, rep = direct_winslow(x_id, SolverConfig(method="direct-winslow", tol_residual=1e-12))
        assert rep.converged
        vals["direct"] = winslow(xd)
        rows.append(vals)
        V = refine_uniformly(V)
    order = all(r["direct"] <= r["Id"] <= r["div"] + 1e-9 for r in rows)
    spreads = [max(r.values()) - min(r.values()) for r in rows]
    dt = time.perf_counter() - t0
    ok = order and spreads[0] >= 2 * spreads[1] and dt <= 300
    report(3, ok, "ordering direct<=Id<=div %s, spread h %.3e -> h/2 %.3e"
           % (order, spreads[0], spreads[1]), dt)
    assert ok


def test_criterion_4_dwr_bijectivity_loop(report):
    t0 = time.perf_counter()
    b, V0, coarse, coarse_rep, x, reports = horseshoe_pipeline()
    n_coarse = coarse_rep.n_negative
    rounds = len(reports) - 1
    final_neg = reports[-1].n_negative
    # smallest uniform refinement of the starting space that is bijective
    S, uniform_ndof = V0, None
    for _ in range(4):
        S = refine_uniformly(S)
        xs, rep = solve(coons_patch(b, S), SolverConfig(method="newton"))
        if rep.n_negative == 0:
            uniform_ndof = S.ndof
            break
    dt = time.perf_counter() - t0
    ok = (n_coarse > 0 and final_neg == 0 and rounds <= 6 and uniform_ndof is not None
          and x.space.ndof < uniform_ndof and dt <= 300)
    report(4, ok, "coarse |Xi_-| %d at %d DOFs, adapted %d DOFs after %d round(s), uniform %s DOFs"
           % (n_coarse, V0.ndof, x.space.ndof, rounds, uniform_ndof), dt)
    assert ok


def test_criterion_5_dwr_effectivity(report):
    t0 = time.perf_counter()
    V = uniform_space(4, 3, 2)
    x, _ = solve(coons_patch(quarter_annulus(), V), NEWTON)
    xf, _ = solve(prolong(x, refine_uniformly(V)), NEWTON)
    true_gap = winslow(x) - winslow(xf)
    goal = make_goal("winslow")
    est = decompose_residual(x, solve_adjoint(x, goal, adjoint_space(V, "h")).z).estimate
    est_k = decompose_residual(x, solve_adjoint(x, goal, adjoint_space(V, "k")).z).estimate
    ratio = abs(est) / abs(true_gap)
    dt = time.perf_counter() - t0
    ok = 0.2 <= ratio <= 5 and dt <= 60
    report(5, ok, "h-refined adjoint: estimate %.3e vs L_W gap %.3e, ratio %.2f "
           "(k-refined adjoint ratio %.3g)" % (est, true_gap, ratio, abs(est_k) / abs(true_gap)), dt)
    assert ok


def _perturbed(x, rng, scale=0.02):
    c = x.coeffs.copy()
    c[x.space.interior_dofs] += scale * rng.standard_normal((len(x.space.interior_dofs), 2))
    return x.with_coeffs(c)


def test_criterion_6_gradient_correctness(report, horseshoe_star):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    maps = {
        "annulus": coons_patch(quarter_annulus(), uniform_space(4, 3, 2)),
        "skewed_quad": coons_patch(skewed_quad(), uniform_space(4, 3, 2)),
        "horseshoe": horseshoe_star,
    }
    worst_gateaux = 0.0
    for x in maps.values():
        x = _perturbed(x, rng, 0.005)
        n = 2 * len(x.space.interior_dofs)
        for _ in range(10):
            v = rng.standard_normal(n)
            ge = asm.gateaux_exact(x, "Id", 0.0, v=v)
            gf = asm.gateaux_fd(x, "Id", 0.0, v=v, eps_fd=1e-7)
            worst_gateaux = max(worst_gateaux, np.linalg.norm(ge - gf) / np.linalg.norm(ge))

    h = 1e-6
    worst_con = 0.0
    V = uniform_space(4, 3, 2)
    s = _perturbed(identity_map(V), rng)
    z = asm.pack(V, s.coeffs)
    for kind in ("bezier", "coarse-slack", "pointwise", "cone"):
        con = make_constraint(kind, V)
        e = con.initial_slack(s) * 1.1 if con.n_slack else np.zeros(0)

        def values(zz):
            c = asm.unpack(V, zz[:len(z)], s.coeffs)
            return constraint_value_and_gradient(con, GeometryMap(V, c),
                                                 zz[len(z):] if con.n_slack else None)[0]
        zz = np.concatenate([z, e])
        _, jac = constraint_value_and_gradient(con, s, e if con.n_slack else None)
        d = rng.standard_normal(len(zz))
        fd = (values(zz + h * d) - values(zz - h * d)) / (2 * h)
        worst_con = max(worst_con, np.abs(jac @ d - fd).max() / np.abs(fd).max())

    x = _perturbed(maps["annulus"], rng, 0.005)
    _, g = asm.winslow_value_and_gradient(x)
    d = rng.standard_normal(len(g))
    step = asm.unpack(x.space, d, np.zeros_like(x.coeffs))
    fp = winslow(x.with_coeffs(x.coeffs + h * step))
    fm = winslow(x.with_coeffs(x.coeffs - h * step))
    winslow_err = abs((fp - fm) / (2 * h) - g @ d) / abs(g @ d)
    dt = time.perf_counter() - t0
    ok = worst_gateaux <= 1e-5 and worst_con <= 1e-6 and winslow_err <= 1e-6 and dt <= 60
    report(6, ok, "Gateaux rel. error %.2e, constraint gradients %.2e, Winslow gradient %.2e"
           % (worst_gateaux, worst_con, winslow_err), dt)
    assert ok


def _random_mesh(rng, n0=4, rounds=3):
    mesh = HierarchicalMesh(n0)
    for _ in range(rounds):
        act = mesh.active_elements()
        pick = act[rng.random(len(act)) < 0.3]
        mesh = mesh.refine([tuple(e) for e in pick])
    return mesh


def test_criterion_7_thb_substrate(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_pou, worst_prolong = 0.0, 0.0
    for _ in range(20):
        S = ThbSpace(_random_mesh(rng), 3, 2)
        u, v = rng.random(1000), rng.random(1000)
        _, vals = S.tabulate_points(u, v, 0)
        worst_pou = max(worst_pou, np.abs(vals[:, 0].sum(-1) - 1).max())
        coarse = uniform_space(4, 3, 2)
        g = GeometryMap(coarse, rng.standard_normal((coarse.ndof, 2)))
        pts = np.column_stack([u, v])
        worst_prolong = max(worst_prolong, np.abs(prolong(g, S)(pts) - g(pts)).max())
    ratios = {n: adjoint_space(uniform_space(n, 3, 2)).ndof / uniform_space(n, 3, 2).ndof
              for n in (2, 4, 8, 16)}
    dt = time.perf_counter() - t0
    ok = worst_pou <= 1e-12 and worst_prolong <= 1e-12 and max(ratios.values()) <= 2 and dt <= 30
    report(7, ok, "partition of unity %.1e, prolongation %.1e, adjoint DOF ratios %s"
           % (worst_pou, worst_prolong, {n: round(r, 3) for n, r in ratios.items()}), dt)
    assert ok


def test_criterion_8_maxprinciple_trend(report, horseshoe_star):
    t0 = time.perf_counter()
    b = horseshoe()
    areas, identity_dev = [], None
    pts = np.random.default_rng(8).random((500, 2))
    for k in (0.0, 0.5, 1.0, 1.5):
        s = maxprinciple_reparam(horseshoe_star, k)
        if k == 0.0:
            identity_dev = np.abs(s(pts) - pts).max()
        x, rep = recompute(horseshoe_star, s, SolverConfig(method="newton"), adapt=True, boundary=b)
        r = quality.evaluate(x, ["Area"])
        assert r.n_negative == 0
        areas.append(r.values["Area"])
    decreasing = all(a > c for a, c in zip(areas, areas[1:]))
    dt = time.perf_counter() - t0
    ok = decreasing and identity_dev <= 1e-12 and dt <= 300
    report(8, ok, "L_Area for k=0,0.5,1,1.5: %s, k=0 deviation from identity %.1e"
           % (["%.6f" % a for a in areas], identity_dev), dt)
    assert ok


def test_criterion_9_constrained_optimization(report, horseshoe_star):
    t0 = time.perf_counter()
    S = uniform_space(8, 3, 2)
    con = cone_constraint(S)
    c_ident, _ = constraint_value_and_gradient(con, identity_map(S))
    s, rep = optimize_domain(horseshoe_star, "Area^s", con, S)
    x, _ = recompute(horseshoe_star, s, SolverConfig(method="newton"))
    before = quality.evaluate(horseshoe_star, ["Area"]).values["Area"]
    after = quality.evaluate(x, ["Area"])
    dt = time.perf_counter() - t0
    ok = (after.values["Area"] < before and after.n_negative == 0 and rep.all_feasible
          and c_ident.min() > 0 and dt <= 300)
    report(9, ok, "L_Area %.6f -> %.6f, all iterates feasible %s, identity min constraint %.3e "
           "(margin %.0e), %d steps, KKT %.1e" % (before, after.values["Area"], rep.all_feasible,
                                                  c_ident.min(), CONE_MARGIN, len(rep.iterations), rep.kkt), dt)
    assert ok


def mean_boundary_cosine(x, n=100):
    """Mean |cos| between the eta-derivative and the side tangent on south and north."""
    t = (np.arange(n) + 0.5) / n
    out = []
    for eta in (0.0, 1.0):
        r = x.space.evaluate(x.coeffs, t, np.full(n, eta), 1)
        tangent, across = r[:, 1], r[:, 2]
        out.append(np.abs((tangent * across).sum(1))
                   / np.linalg.norm(tangent, axis=1) / np.linalg.norm(across, axis=1))
    return float(np.concatenate(out).mean())


def det_spread(x):
    d = det_field(x)
    return float(d.max() / d.min())


def test_criterion_10_boundary_orthogonality(report, tube_star):
    t0 = time.perf_counter()
    s = boundary_orth_pipeline(tube_star, "north-south")
    x, rep = recompute(tube_star, s, SolverConfig(method="newton"))
    assert rep.converged
    cos_ref, cos_new = mean_boundary_cosine(tube_star), mean_boundary_cosine(x)
    sp = sprime_postprocess(s, x, 0.75, 300)
    x2, rep2 = recompute(tube_star, sp, SolverConfig(method="newton"))
    assert rep2.converged
    spread1, spread2 = det_spread(x), det_spread(x2)
    dt = time.perf_counter() - t0
    ok = cos_new <= 0.5 * cos_ref and spread2 < spread1 and dt <= 300
    report(10, ok, "mean |cos| %.3e -> %.3e, det J spread %.3f -> %.3f"
           % (cos_ref, cos_new, spread1, spread2), dt)
    assert ok


def test_criterion_11_determinism(report):
    t0 = time.perf_counter()
    texts = []
    for _ in range(2):
        _, _, coarse, coarse_rep, x, reports = horseshoe_pipeline()
        doc = {"coarse": io.result_to_dict(coarse_rep),
               "rounds": [io.result_to_dict(r) for r in reports],
               "map": io.result_to_dict(x),
               "quality": io.result_to_dict(quality.evaluate(x, ["Area", "W", "Length"]))}
        texts.append(io.dumps(doc))
    same = texts[0] == texts[1]
    dt = time.perf_counter() - t0
    report(11, same, "two runs byte-identical: %s (%d bytes)" % (same, len(texts[0])), dt)
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
