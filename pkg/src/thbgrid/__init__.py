"""Adaptive elliptic grid generation on truncated hierarchical B-spline spaces.

Typical pipeline::

    from thbgrid import *
    b = get_geometry("horseshoe")
    V = build_initial_space(7, b, 1e-2)
    x, reports = adapt_loop(coons_patch(b, V), "bijectivity", SolverConfig(), beta=0.2, boundary=b)
    print(quality.evaluate(x).table())
"""
from . import assembly, domopt, dwr, io, quality, solvers, splinecore, thb
from .assembly import BijectivityError
from .boundary import BoundaryData, SideCurve, coons_patch, fit_curve
from .domopt import (ControlMap, boundary_orth_pipeline, make_constraint, maxprinciple_reparam,
                     optimize_domain, optimize_geometry_direct, recompute, sprime_postprocess)
from .dwr import adapt_loop, decompose_residual, make_goal, mark, solve_adjoint
from .geometries import get_geometry
from .io import export_svg, load_geometry, load_result, save_geometry, save_result
from .solvers import SolveReport, SolverConfig, solve
from .thb import (GeometryMap, HierarchicalMesh, ThbSpace, adjoint_space, build_initial_space,
                  identity_map, refine_functions, refine_uniformly, uniform_space)

__version__ = "0.1.0"

__all__ = [
    "assembly", "domopt", "dwr", "io", "quality", "solvers", "splinecore", "thb",
    "BijectivityError", "BoundaryData", "SideCurve", "coons_patch", "fit_curve",
    "ControlMap", "boundary_orth_pipeline", "make_constraint", "maxprinciple_reparam",
    "optimize_domain", "optimize_geometry_direct", "recompute", "sprime_postprocess",
    "adapt_loop", "decompose_residual", "make_goal", "mark", "solve_adjoint",
    "get_geometry", "export_svg", "load_geometry", "load_result", "save_geometry", "save_result",
    "SolveReport", "SolverConfig", "solve",
    "GeometryMap", "HierarchicalMesh", "ThbSpace", "adjoint_space", "build_initial_space",
    "identity_map", "refine_functions", "refine_uniformly", "uniform_space",
]
