"""JSON and SVG input/output.

Geometry files hold four boundary splines::

    {"name": "...", "sides": {"south": {"degree": 3, "knots": [...], "cps": [[x, y], ...]},
                              "east": ..., "north": ..., "west": ...}}

Results (maps, control maps, reports) are written with every float at 17
significant digits, which makes ``save -> load`` bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import fields
from importlib import resources
from pathlib import Path
from xml.sax.saxutils import escape

import jsonschema
import numpy as np

from .boundary import SIDES, BoundaryData, SideCurve, coons_patch
from .splinecore import KnotVector
from .thb import GeometryMap, ThbSpace

__all__ = [
    "SchemaError",
    "GEOMETRY_SCHEMA",
    "RESULT_SCHEMA",
    "dumps",
    "packaged_geometries",
    "geometry_to_dict",
    "geometry_from_dict",
    "load_geometry",
    "save_geometry",
    "result_to_dict",
    "result_from_dict",
    "save_result",
    "load_result",
    "export_svg",
    "coons_patch",
]


class SchemaError(ValueError):
    """A JSON document does not match its schema; the message names the field path."""


_SIDE_SCHEMA = {
    "type": "object",
    "required": ["degree", "knots", "cps"],
    "additionalProperties": False,
    "properties": {
        "degree": {"type": "integer", "minimum": 1},
        "knots": {"type": "array", "items": {"type": "number"}, "minItems": 4},
        "cps": {"type": "array", "minItems": 2,
                "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    },
}

GEOMETRY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "boundary geometry",
    "type": "object",
    "required": ["sides"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "sides": {
            "type": "object",
            "required": list(SIDES),
            "additionalProperties": False,
            "properties": {s: _SIDE_SCHEMA for s in SIDES},
        },
    },
}

_MESH_SCHEMA = {
    "type": "object",
    "required": ["n0"],
    "additionalProperties": False,
    "properties": {
        "n0": {"type": "integer", "minimum": 1},
        "max_levels": {"type": "integer", "minimum": 1},
        "refined": {"type": "array", "items": {"type": "array", "items": {
            "type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}}},
    },
}

_SPACE_SCHEMA = {
    "type": "object",
    "required": ["degree", "regularity", "mesh"],
    "additionalProperties": False,
    "properties": {"degree": {"type": "integer", "minimum": 1},
                   "regularity": {"type": "integer", "minimum": 0},
                   "mesh": _MESH_SCHEMA},
}

_MAP_SCHEMA = {
    "type": "object",
    "required": ["type", "space", "coeffs"],
    "properties": {
        "type": {"enum": ["geometry_map", "control_map"]},
        "space": _SPACE_SCHEMA,
        "coeffs": {"type": "array",
                   "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
        "identity_trace": {"type": "boolean"},
    },
}

RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "saved result",
    "type": "object",
    "required": ["type"],
    "properties": {"type": {"enum": ["geometry_map", "control_map", "solve_report", "quality_report",
                                     "optimize_report", "document"]}},
    "allOf": [{"if": {"properties": {"type": {"enum": ["geometry_map", "control_map"]}}},
               "then": _MAP_SCHEMA}],
}


def _validate(doc, schema, what):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError("%s: %s: %s" % (what, path, e.message))


# serialization ---------------------------------------------------------------------

def _float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = "%.17g" % x
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _encode(obj, indent, level):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = ", " if indent is None else ","
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ["%s: %s" % (json.dumps(str(k)), _encode(v, indent, level + 1)) for k, v in obj.items()]
        return "{" + pad + (sep + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric rows stay on one line
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, None, 0) for v in obj) + "]"
        return "[" + pad + (sep + pad).join(_encode(v, indent, level + 1) for v in obj) + end + "]"
    raise TypeError("cannot serialize %r" % type(obj).__name__)


def dumps(obj, indent: int | None = 1) -> str:
    """JSON text with floats at 17 significant digits and insertion-ordered keys."""
    return _encode(obj, indent, 0) + "\n"


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _read_json(path, what):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError("cannot read %s file %s: %s" % (what, path, exc.strerror)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("%s: invalid JSON at line %d column %d: %s"
                          % (what, exc.lineno, exc.colno, exc.msg)) from exc


# geometry --------------------------------------------------------------------------

def packaged_geometries() -> list:
    """Names of the geometry files shipped with the package."""
    root = resources.files("thbgrid") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def geometry_to_dict(b: BoundaryData) -> dict:
    return {"name": b.name,
            "sides": {s: {"degree": b[s].degree, "knots": b[s].kv.knots.tolist(), "cps": b[s].cps.tolist()}
                      for s in SIDES}}


def geometry_from_dict(doc: dict, what: str = "geometry") -> BoundaryData:
    _validate(doc, GEOMETRY_SCHEMA, what)
    sides = {}
    for s in SIDES:
        d = doc["sides"][s]
        try:
            kv = KnotVector(d["degree"], np.asarray(d["knots"], dtype=float))
            sides[s] = SideCurve(kv, np.asarray(d["cps"], dtype=float))
        except ValueError as exc:
            raise SchemaError("%s: sides/%s: %s" % (what, s, exc)) from exc
    return BoundaryData(name=doc.get("name", ""), **sides)


def load_geometry(path) -> BoundaryData:
    """Boundary from a geometry file, or from a packaged geometry name such as ``"square"``."""
    p = Path(path)
    if not p.exists():
        name = p.name[:-5] if p.name.endswith(".json") else p.name
        if p.parent == Path(".") and name in packaged_geometries():
            text = (resources.files("thbgrid") / "data" / (name + ".json")).read_text(encoding="utf-8")
            return geometry_from_dict(json.loads(text), name + ".json")
    return geometry_from_dict(_read_json(p, "geometry"), str(path))


def save_geometry(path, b: BoundaryData) -> None:
    _write(path, dumps(geometry_to_dict(b)))


# results ---------------------------------------------------------------------------

def result_to_dict(obj) -> dict:
    """Tagged dictionary for a map, control map, report or plain dictionary."""
    from .domopt import ControlMap, OptimizeReport
    from .quality import QualityReport
    from .solvers import SolveReport

    if isinstance(obj, GeometryMap):
        return {"type": "geometry_map", "space": obj.space.to_dict(), "coeffs": obj.coeffs}
    if isinstance(obj, ControlMap):
        return {"type": "control_map", "identity_trace": obj.identity_trace,
                "space": obj.space.to_dict(), "coeffs": obj.coeffs}
    if isinstance(obj, SolveReport):
        return {"type": "solve_report", **obj.to_dict()}
    if isinstance(obj, QualityReport):
        return {"type": "quality_report", **obj.to_dict()}
    if isinstance(obj, OptimizeReport):
        return {"type": "optimize_report", **obj.to_dict()}
    if isinstance(obj, dict):
        return {"type": "document", **obj}
    raise TypeError("cannot save objects of type %s" % type(obj).__name__)


def result_from_dict(doc: dict, what: str = "result"):
    """Inverse of :func:`result_to_dict` for maps and solve reports; other types come back as dicts."""
    from .domopt import ControlMap
    from .solvers import SolveReport

    _validate(doc, RESULT_SCHEMA, what)
    kind = doc["type"]
    if kind in ("geometry_map", "control_map"):
        space = ThbSpace.from_dict(doc["space"])
        coeffs = np.asarray(doc["coeffs"], dtype=float)
        if coeffs.shape != (space.ndof, 2):
            raise SchemaError("%s: coeffs: expected %d rows, got %d" % (what, space.ndof, len(coeffs)))
        g = GeometryMap(space, coeffs)
        if kind == "geometry_map":
            return g
        return ControlMap(g, identity_trace=bool(doc.get("identity_trace", True)), check=False)
    if kind == "solve_report":
        names = {f.name for f in fields(SolveReport)}
        return SolveReport(**{k: v for k, v in doc.items() if k in names})
    return {k: v for k, v in doc.items() if k != "type"}


def save_result(path, obj) -> None:
    _write(path, dumps(result_to_dict(obj)))


def load_result(path):
    return result_from_dict(_read_json(path, "result"), str(path))


# SVG -------------------------------------------------------------------------------

def _polyline(pts, cls):
    coords = " ".join("%.6f,%.6f" % (a, b) for a, b in pts)
    return '<polyline class="%s" points="%s"/>' % (cls, coords)


def export_svg(x: GeometryMap, isolines=(10, 10), path=None, samples: int = 64, mesh: bool = False,
               width: float = 800.0, title: str | None = None) -> str:
    """SVG drawing of the xi- and eta-isolines of ``x``.

    ``isolines = (n_xi, n_eta)`` polylines are drawn at equally spaced
    parameter values including the boundary, each sampled at ``samples``
    points.  With ``mesh=True`` the element boundaries of the hierarchical
    mesh are overlaid.  Returns the SVG text and writes it when ``path`` is
    given.
    """
    n_xi, n_eta = (isolines, isolines) if np.isscalar(isolines) else isolines
    if n_xi < 1 or n_eta < 1 or samples < 64:
        raise ValueError("need at least one isoline per family and 64 samples per line")
    t = np.linspace(0.0, 1.0, samples)
    fam = {}
    for name, n, make in (("xi", n_xi, lambda c: np.column_stack([np.full_like(t, c), t])),
                          ("eta", n_eta, lambda c: np.column_stack([t, np.full_like(t, c)]))):
        vals = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
        fam[name] = [x(make(c)) for c in vals]
    lines = fam["xi"] + fam["eta"]
    cells = []
    if mesh:
        for x0, x1, y0, y1 in x.space.mesh.element_bounds():
            u = np.concatenate([np.linspace(x0, x1, 8), np.full(8, x1), np.linspace(x1, x0, 8), np.full(8, x0)])
            v = np.concatenate([np.full(8, y0), np.linspace(y0, y1, 8), np.full(8, y1), np.linspace(y1, y0, 8)])
            cells.append(x(np.column_stack([u, v])))
    allp = np.vstack(lines)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    scale = (width - 20.0) / span[0]
    height = span[1] * scale + 20.0

    def tr(p):
        return np.column_stack([10.0 + (p[:, 0] - lo[0]) * scale, height - 10.0 - (p[:, 1] - lo[1]) * scale])

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           '<svg xmlns="http://www.w3.org/2000/svg" width="%.6f" height="%.6f" viewBox="0 0 %.6f %.6f">'
           % (width, height, width, height)]
    if title:
        out.append("<title>%s</title>" % escape(title))
    out.append('<g fill="none" stroke-linejoin="round">')
    if cells:
        out.append('<g class="mesh" stroke="#bbbbbb" stroke-width="0.5">')
        out += [_polyline(tr(c), "element") for c in cells]
        out.append("</g>")
    for name, colour in (("xi", "#1f4e9c"), ("eta", "#b03a2e")):
        out.append('<g class="%s-isolines" stroke="%s" stroke-width="1">' % (name, colour))
        out += [_polyline(tr(p), name) for p in fam[name]]
        out.append("</g>")
    out += ["</g>", "</svg>"]
    text = "\n".join(out) + "\n"
    if path is not None:
        _write(path, text)
    return text

