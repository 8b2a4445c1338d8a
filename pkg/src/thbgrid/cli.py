"""Command-line interface.

Every command reads and rewrites a JSON state file (``thbgrid_state.json``
by default) holding the boundary, the current map, the reference map of the
last reparameterization and a history of reports::

    thbgrid init horseshoe
    thbgrid solve --method newton
    thbgrid adapt --goal bijectivity --beta 0.2
    thbgrid reparam maxprinciple --k 1
    thbgrid quality
    thbgrid export svg --out grid.svg

Exit codes: 0 on success, 2 when a solve or optimization does not converge
(the best iterate is still stored), 1 on usage, schema or input errors.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import quality as qmod
from .assembly import BijectivityError
from .boundary import coons_patch
from .domopt import (CONSTRAINT_KINDS, boundary_orth_pipeline, make_constraint,
                     maxprinciple_reparam, optimize_domain, recompute, sprime_postprocess)
from .dwr import adapt_loop
from .io import (SchemaError, _read_json, _validate, _write, dumps, export_svg, geometry_from_dict,
                 geometry_to_dict, load_geometry, result_from_dict, result_to_dict, save_result)
from .solvers import METHODS, TAUS, SolverConfig, solve
from .thb import (ADJOINT_MODES, DEFAULT_FIT_TOL, DEFAULT_N0, RefinementError, build_initial_space,
                  uniform_space)

__all__ = ["ProjectConfig", "CONFIG_SCHEMA", "load_config", "main"]

STATE_VERSION = 1
DEFAULT_STATE = "thbgrid_state.json"

_SOLVER_KEYS = ("method", "tau", "mu", "tol_residual", "tol_increment", "max_iters", "linesearch",
                "directional", "fallback", "fallback_mu")

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "project configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "degree": {"type": "integer", "minimum": 1},
        "regularity": {"type": ["integer", "null"], "minimum": 0},
        "n0": {"type": "integer", "minimum": 1},
        "fit_tol": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": list(METHODS)},
                "tau": {"enum": list(TAUS)},
                "mu": {"type": "number", "minimum": 0},
                "tol_residual": {"type": "number", "exclusiveMinimum": 0},
                "tol_increment": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "linesearch": {"enum": ["none", "backtracking"]},
                "directional": {"enum": ["fd", "exact"]},
                "fallback": {"type": "boolean"},
                "fallback_mu": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "dwr": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "goal": {"enum": ["bijectivity", "winslow"]},
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "rounds": {"type": "integer", "minimum": 1},
                "adjoint": {"enum": list(ADJOINT_MODES)},
                "positive_only": {"type": "boolean"},
            },
        },
        "domopt": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "k": {"type": "number", "minimum": 0},
                "cost": {"type": "string"},
                "constraint": {"enum": list(CONSTRAINT_KINDS)},
                "control_n": {"type": "integer", "minimum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "sides": {"enum": ["north-south", "east-west"]},
                "sprime": {"type": ["array", "null"], "items": {"type": "number"},
                           "minItems": 2, "maxItems": 2},
                "adapt": {"type": "boolean"},
            },
        },
        "export": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "isolines": {"type": "array", "items": {"type": "integer", "minimum": 1},
                             "minItems": 2, "maxItems": 2},
                "samples": {"type": "integer", "minimum": 64},
                "mesh": {"type": "boolean"},
            },
        },
    },
}


@dataclass
class ProjectConfig:
    """Defaults for every command; each field has a command-line twin that overrides it."""

    degree: int = 3
    regularity: int | None = None
    n0: int = DEFAULT_N0
    fit_tol: float = DEFAULT_FIT_TOL
    seed: int = 0
    solver: dict = field(default_factory=dict)
    dwr: dict = field(default_factory=lambda: {"goal": "bijectivity", "beta": 0.2, "rounds": 6,
                                               "adjoint": "k", "positive_only": False})
    domopt: dict = field(default_factory=lambda: {"cost": "Area^s", "constraint": "cone", "control_n": 8,
                                                  "max_iters": 2000, "tol": 1e-6, "sides": "north-south",
                                                  "sprime": None, "adapt": False})
    export: dict = field(default_factory=lambda: {"isolines": [10, 10], "samples": 64, "mesh": False})

    def solver_config(self, **overrides) -> SolverConfig:
        kw = {k: v for k, v in self.solver.items() if k in _SOLVER_KEYS}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SolverConfig(**kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path=None, doc: dict | None = None) -> ProjectConfig:
    """Project configuration from a JSON file (unknown keys are rejected)."""
    if doc is None:
        doc = {} if path is None else _read_json(path, "config")
    _validate(doc, CONFIG_SCHEMA, str(path or "config"))
    cfg = ProjectConfig()
    for key in ("solver", "dwr", "domopt", "export"):
        merged = dict(getattr(cfg, key))
        merged.update(doc.get(key, {}))
        setattr(cfg, key, merged)
    return replace(cfg, **{k: v for k, v in doc.items() if k not in ("solver", "dwr", "domopt", "export")})


# state file --------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError("%s: %s" % (self.prog, message))


def _load_state(path):
    if not Path(path).exists():
        raise _UsageError("no state file %s; run 'init' first" % path)
    doc = _read_json(path, "state")
    if doc.get("version") != STATE_VERSION:
        raise SchemaError("%s: version: unsupported state version %r" % (path, doc.get("version")))
    state = {"config": load_config(doc=doc.get("config", {})),
             "boundary": geometry_from_dict(doc["boundary"], "%s: boundary" % path),
             "map": result_from_dict(doc["map"], "%s: map" % path),
             "reference": None, "control": None, "history": doc.get("history", [])}
    for key in ("reference", "control"):
        if doc.get(key) is not None:
            state[key] = result_from_dict(doc[key], "%s: %s" % (path, key))
    return state


def _save_state(path, state):
    doc = {"version": STATE_VERSION,
           "config": state["config"].to_dict(),
           "boundary": geometry_to_dict(state["boundary"]),
           "map": result_to_dict(state["map"]),
           "reference": None if state["reference"] is None else result_to_dict(state["reference"]),
           "control": None if state["control"] is None else result_to_dict(state["control"]),
           "history": state["history"]}
    _write(path, dumps(doc))


def _pick(flag, default):
    return default if flag is None else flag


def _record(state, command, report: dict):
    state["history"].append({"command": command, "report": report})


def _write_report(path, obj):
    if path:
        save_result(path, obj)


# commands ----------------------------------------------------------------------

def _cmd_init(args, cfg):
    b = load_geometry(args.geometry)
    degree = _pick(args.degree, cfg.degree)
    reg = _pick(args.regularity, cfg.regularity)
    n0 = _pick(args.n0, cfg.n0)
    fit_tol = _pick(args.fit_tol, cfg.fit_tol)
    space = build_initial_space(n0, b, fit_tol, degree, reg)
    cfg = replace(cfg, degree=degree, regularity=reg, n0=n0, fit_tol=fit_tol)
    x = coons_patch(b, space)
    state = {"config": cfg, "boundary": b, "map": x, "reference": None, "control": None, "history": []}
    min_det, neg = qmod.bijectivity_scan(x)
    _record(state, "init", {"geometry": b.name, "ndof": space.ndof, "levels": space.mesh.n_levels,
                            "min_det": min_det, "n_negative": len(neg)})
    print("initial space: %d DOFs on %d level(s); Coons patch min det J = %.6g"
          % (space.ndof, space.mesh.n_levels, min_det))
    return state, 0


def _solver_from(args, cfg):
    return cfg.solver_config(method=args.method, tau=args.tau, mu=args.mu, tol_residual=args.tol,
                             max_iters=args.max_iters, fallback=True if args.fallback else None)


def _cmd_solve(args, state):
    cfg = state["config"]
    scfg = _solver_from(args, cfg)
    x, rep = solve(state["map"], scfg)
    state["map"] = x
    _record(state, "solve", rep.to_dict())
    _write_report(args.report, rep)
    if args.residuals:
        _write(args.residuals, rep.residual_csv())
    for w in rep.warnings:
        print("warning: %s" % w)
    print("%s: %s after %d iterations, residual %.3e, min det J = %.6g"
          % (scfg.method, "converged" if rep.converged else "NOT converged", rep.n_iterations,
             rep.final_residual, rep.min_det))
    return 0 if rep.converged else 2


def _cmd_adapt(args, state):
    cfg = state["config"]
    d = cfg.dwr
    goal = _pick(args.goal, d["goal"])
    x, reps = adapt_loop(state["map"], goal, _solver_from(args, cfg), beta=_pick(args.beta, d["beta"]),
                         max_rounds=_pick(args.rounds, d["rounds"]), boundary=state["boundary"],
                         positive_only=args.positive_only or d["positive_only"],
                         adjoint_mode=_pick(args.adjoint, d["adjoint"]))
    state["map"] = x
    rounds = [r.extra for r in reps]
    last = reps[-1]
    _record(state, "adapt", {"goal": goal, "rounds": rounds, "final": last.to_dict()})
    _write_report(args.report, {"goal": goal, "rounds": rounds})
    for r in rounds:
        print("round %s" % ", ".join("%s=%s" % (k, _fmt(v)) for k, v in r.items()))
    ok = last.converged and (goal != "bijectivity" or last.n_negative == 0)
    print("final: %d DOFs, |Xi_-| = %d, min det J = %.6g" % (x.space.ndof, last.n_negative, last.min_det))
    return 0 if ok else 2


def _fmt(v):
    return "%.6g" % v if isinstance(v, float) else str(v)


def _cmd_reparam(args, state):
    cfg = state["config"]
    dcfg = cfg.domopt
    x_star = state["map"] if state["reference"] is None else state["reference"]
    b = state["boundary"]
    scfg = _solver_from(args, cfg)
    adapt = args.adapt or dcfg.get("adapt", False)
    status = 0
    report = {"kind": args.kind}
    if args.kind == "maxprinciple":
        k = _pick(args.k, dcfg.get("k"))
        if k is None:
            raise _UsageError("reparam maxprinciple: --k is required")
        s = maxprinciple_reparam(x_star, k)
        report["k"] = k
    elif args.kind == "constrained":
        n = _pick(args.control_n, dcfg["control_n"])
        space_s = uniform_space(n, x_star.space.degree, x_star.space.regularity)
        kind = _pick(args.constraint, dcfg["constraint"])
        con = make_constraint(kind, space_s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            s, orep = optimize_domain(x_star, _pick(args.cost, dcfg["cost"]), con, space_s,
                                      max_iters=_pick(args.opt_iters, dcfg["max_iters"]),
                                      tol=_pick(args.opt_tol, dcfg["tol"]))
        report["optimization"] = orep.to_dict()
        print("optimization: cost %.10g -> %.10g, KKT %.3e, %d steps, all iterates feasible: %s"
              % (orep.initial_cost, orep.final_cost, orep.kkt, len(orep.iterations), orep.all_feasible))
        if not orep.converged:
            print("warning: %s" % orep.message)
            status = 2
    else:
        s = boundary_orth_pipeline(x_star, _pick(args.sides, dcfg["sides"]))
        sprime = args.sprime if args.sprime is not None else dcfg.get("sprime")
        if sprime is not None:
            x_h, rep0 = recompute(x_star, s, scfg, adapt=adapt, boundary=b)
            if not rep0.converged:
                print("warning: intermediate solve did not converge")
                status = 2
            s = sprime_postprocess(s, x_h, float(sprime[0]), float(sprime[1]))
            report["sprime"] = [float(sprime[0]), float(sprime[1])]
    x, rep = recompute(x_star, s, scfg, adapt=adapt, boundary=b)
    state["reference"], state["control"], state["map"] = x_star, s, x
    report["solve"] = rep.to_dict()
    _record(state, "reparam", report)
    _write_report(args.report, report)
    print("recomputed map: %s, %d DOFs, min det J = %.6g"
          % ("converged" if rep.converged else "NOT converged", x.space.ndof, rep.min_det))
    if not rep.converged:
        status = 2
    return status


def _cmd_quality(args, state):
    x = state["map"]
    which = args.functionals or list(qmod.FUNCTIONALS)
    if x.space.regularity < 1:
        which = [w for w in which if w not in ("Uniformity", "Eccentricity")]
    notes = []
    try:
        rep = qmod.evaluate(x, which, restrict=args.restrict)
    except BijectivityError:
        which = [w for w in which if w not in ("W", "ML")]
        notes.append("map folds: L_W and L_ML are undefined")
        rep = qmod.evaluate(x, which, restrict=args.restrict)
    doc = rep.to_dict()
    if args.scan_points:
        seed = state["config"].seed if args.seed is None else args.seed
        pts = np.random.default_rng(seed).random((args.scan_points, 2))
        r = x.space.evaluate(x.coeffs, pts[:, 0], pts[:, 1], 1)
        det = r[:, 1, 0] * r[:, 2, 1] - r[:, 2, 0] * r[:, 1, 1]
        doc["scan"] = {"seed": seed, "points": args.scan_points, "min_det": float(det.min()),
                       "n_negative": int((det < 0).sum())}
        notes.append("random scan (%d points, seed %d): min det J = %.6g"
                     % (args.scan_points, seed, det.min()))
    doc["notes"] = notes
    _record(state, "quality", doc)
    _write_report(args.out, doc)
    print(rep.table())
    for n in notes:
        print(n)
    return 0


def _cmd_export(args, state):
    e = state["config"].export
    if args.format == "svg":
        iso = args.isolines or e["isolines"]
        export_svg(state["map"], tuple(iso), args.out, samples=_pick(args.samples, e["samples"]),
                   mesh=args.mesh or e["mesh"], title=state["boundary"].name or None)
    else:
        obj = {"map": state["map"], "control": state["control"], "reference": state["reference"]}[args.what]
        if obj is None:
            raise _UsageError("export json: no %s map in the state" % args.what)
        save_result(args.out, obj)
    print("wrote %s" % args.out)
    return 0


# parser ------------------------------------------------------------------------

def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--tau", choices=TAUS)
    g.add_argument("--mu", type=float)
    g.add_argument("--tol", type=float, help="relative residual tolerance")
    g.add_argument("--max-iters", type=int)
    g.add_argument("--fallback", action="store_true", help="Picard restart on failure")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thbgrid", description="Adaptive elliptic grid generation on THB-spline spaces.")
    p.add_argument("--state", default=DEFAULT_STATE, help="state file (default %(default)s)")
    p.add_argument("--config", help="JSON project configuration")
    p.add_argument("--seed", type=int, help="seed for any random sampling")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("init", help="boundary -> initial space and Coons patch")
    q.add_argument("geometry", help="geometry file or packaged name")
    q.add_argument("--n0", type=int)
    q.add_argument("--degree", type=int)
    q.add_argument("--regularity", type=int)
    q.add_argument("--fit-tol", type=float)

    q = sub.add_parser("solve", help="solve the grid equations on the current space")
    _solver_flags(q)
    q.add_argument("--report", help="write the solve report (JSON)")
    q.add_argument("--residuals", help="write the residual history (CSV)")

    q = sub.add_parser("adapt", help="goal-oriented adaptive refinement")
    _solver_flags(q)
    q.add_argument("--goal", choices=("bijectivity", "winslow"))
    q.add_argument("--beta", type=float)
    q.add_argument("--rounds", type=int)
    q.add_argument("--adjoint", choices=ADJOINT_MODES)
    q.add_argument("--positive-only", action="store_true")
    q.add_argument("--report")

    q = sub.add_parser("reparam", help="reparameterize through a control map")
    q.add_argument("kind", choices=("maxprinciple", "constrained", "boundary-orth"))
    _solver_flags(q)
    q.add_argument("--k", type=float, help="diffusivity exponent (maxprinciple)")
    q.add_argument("--cost", help="cost terms, e.g. 'Area^s:1,Uniformity:0.1' (constrained)")
    q.add_argument("--constraint", choices=CONSTRAINT_KINDS)
    q.add_argument("--control-n", type=int, help="elements per direction of the control space")
    q.add_argument("--opt-iters", type=int)
    q.add_argument("--opt-tol", type=float)
    q.add_argument("--sides", choices=("north-south", "east-west"))
    q.add_argument("--sprime", nargs=2, type=float, metavar=("K", "BETA"))
    q.add_argument("--adapt", action="store_true", help="adapt the recomputed map until bijective")
    q.add_argument("--report")

    q = sub.add_parser("quality", help="quality functionals of the current map")
    q.add_argument("--functionals", nargs="+", choices=qmod.FUNCTIONALS)
    q.add_argument("--restrict", nargs=4, type=float, metavar=("XI0", "XI1", "ETA0", "ETA1"))
    q.add_argument("--scan-points", type=int, default=0, help="extra random det J samples")
    q.add_argument("--out")

    q = sub.add_parser("export", help="write the current map as SVG or JSON")
    q.add_argument("format", choices=("svg", "json"))
    q.add_argument("--out", required=True)
    q.add_argument("--isolines", nargs=2, type=int, metavar=("NXI", "NETA"))
    q.add_argument("--samples", type=int)
    q.add_argument("--mesh", action="store_true")
    q.add_argument("--what", choices=("map", "control", "reference"), default="map")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.command == "init":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            state, code = _cmd_init(args, cfg)
        else:
            state = _load_state(args.state)
            if args.config:
                state["config"] = load_config(args.config)
            handler = {"solve": _cmd_solve, "adapt": _cmd_adapt, "reparam": _cmd_reparam,
                       "quality": _cmd_quality, "export": _cmd_export}[args.command]
            code = handler(args, state)
        _save_state(args.state, state)
        return code
    except (_UsageError, SchemaError, FileNotFoundError, KeyError, ValueError, BijectivityError,
            RefinementError) as exc:
        print("error: %s" % (exc.args[0] if exc.args else exc), file=sys.stderr)
        return 1


def console() -> None:
    sys.exit(main())
