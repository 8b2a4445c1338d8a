"""Grid equations on the quarter annulus, compared with the exact polar map.

The quarter annulus between radii 1 and 2 has the closed-form harmonic-inverse
map ``x = 2**eta (sin(pi xi / 2), cos(pi xi / 2))``.  We solve the grid
equations on uniform cubic spaces of increasing size and watch the L2 error
drop at the rate of the spline degree.
"""
import argparse
from pathlib import Path

import numpy as np

from thbgrid import assembly as asm
from thbgrid.boundary import coons_patch
from thbgrid.geometries import annulus_exact, quarter_annulus
from thbgrid.io import export_svg
from thbgrid.solvers import SolverConfig, solve
from thbgrid.thb import uniform_space

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="demo_out", help="directory for the SVG drawings")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)

boundary = quarter_annulus()
cfg = SolverConfig(method="newton", tol_residual=1e-12)

# Gauss points of a fine uniform mesh are good enough to measure the error.
quad = asm.quadrature(uniform_space(32).mesh, 6)
pts = quad.flat_points()
w = quad.weights.ravel()
exact = annulus_exact(pts)

prev = None
print("%5s %6s %6s %12s %8s" % ("n", "DOFs", "iters", "L2 error", "factor"))
for n in (4, 8, 16, 32):
    x, rep = solve(coons_patch(boundary, uniform_space(n)), cfg)
    err = np.sqrt((((x(pts) - exact) ** 2).sum(axis=1) * w).sum())
    factor = "" if prev is None else "%.1f" % (prev / err)
    print("%5d %6d %6d %12.3e %8s" % (n, x.space.ndof, rep.n_iterations, err, factor))
    prev = err
    if n == 8:
        export_svg(x, (9, 9), out / "annulus_n8.svg", title="quarter annulus, 8 x 8 elements")

# A factor near 16 per halving is fourth-order convergence, as expected for cubics.
print("wrote", out / "annulus_n8.svg")
