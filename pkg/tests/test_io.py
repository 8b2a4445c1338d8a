import copy
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thbgrid import io
from thbgrid.boundary import CornerMismatchError, coons_patch
from thbgrid.domopt import ControlMap, maxprinciple_reparam
from thbgrid.geometries import GEOMETRIES, get_geometry, square
from thbgrid.quality import evaluate
from thbgrid.solvers import SolverConfig, solve
from thbgrid.thb import HierarchicalMesh, ThbSpace, identity_map, uniform_space

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def square_doc():
    return io.geometry_to_dict(square())


def multilevel_map():
    mesh = HierarchicalMesh(3).refine([(0, 0, 0), (0, 1, 0), (0, 0, 1)])
    mesh = mesh.refine([(1, 0, 0)])
    return coons_patch(get_geometry("quarter_annulus"), ThbSpace(mesh, 3, 2))


class TestDumps:
    def test_float_format(self):
        text = io.dumps([0.1, 1.0, 3, 1e-20, -0.0], None)
        assert text == "[0.10000000000000001, 1.0, 3, 9.9999999999999995e-21, -0.0]\n"

    def test_non_finite(self):
        assert io.dumps({"a": math.nan, "b": -math.inf}, None) == '{"a": NaN, "b": -Infinity}\n'

    def test_numpy_scalars_and_arrays(self):
        text = io.dumps({"n": np.int64(3), "x": np.float32(0.5), "ok": np.bool_(True), "v": np.arange(2.0)})
        assert json.loads(text) == {"n": 3, "x": 0.5, "ok": True, "v": [0.0, 1.0]}

    def test_rejects_unknown(self):
        with pytest.raises(TypeError):
            io.dumps({"a": object()})

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False), max_size=8))
    def test_floats_round_trip_exactly(self, xs):
        assert json.loads(io.dumps(xs)) == xs


class TestGeometry:
    def test_packaged(self):
        assert set(io.packaged_geometries()) == set(GEOMETRIES)

    @pytest.mark.parametrize("name", sorted(GEOMETRIES))
    def test_packaged_file_matches_builder(self, name):
        a = io.load_geometry(name)
        b = get_geometry(name)
        for s in ("south", "east", "north", "west"):
            np.testing.assert_allclose(a[s].cps, b[s].cps, atol=1e-14)

    def test_round_trip(self, tmp_path):
        b = get_geometry("horseshoe")
        io.save_geometry(tmp_path / "h.json", b)
        c = io.load_geometry(tmp_path / "h.json")
        assert c.name == b.name
        for s in ("south", "east", "north", "west"):
            assert c[s].cps.tobytes() == b[s].cps.tobytes()
            assert c[s].kv.knots.tobytes() == b[s].kv.knots.tobytes()

    @pytest.mark.parametrize("mutate,path", [
        (lambda d: d["sides"].pop("west"), "sides"),
        (lambda d: d["sides"]["north"].update(degree=0), "sides/north/degree"),
        (lambda d: d["sides"]["east"]["cps"].__setitem__(0, [0.0]), "sides/east/cps/0"),
        (lambda d: d.update(colour="red"), "<root>"),
        (lambda d: d["sides"]["south"].update(knots="0 0 1 1"), "sides/south/knots"),
    ])
    def test_schema_errors_name_the_path(self, square_doc, mutate, path):
        doc = copy.deepcopy(square_doc)
        mutate(doc)
        with pytest.raises(io.SchemaError) as exc:
            io.geometry_from_dict(doc, "g.json")
        assert str(exc.value).startswith("g.json: %s:" % path)

    def test_inconsistent_curve(self, square_doc):
        doc = copy.deepcopy(square_doc)
        doc["sides"]["south"]["cps"].append([2.0, 0.0])
        with pytest.raises(io.SchemaError, match="sides/south"):
            io.geometry_from_dict(doc)

    def test_corner_mismatch(self, square_doc):
        doc = copy.deepcopy(square_doc)
        doc["sides"]["east"]["cps"][0] = [1.0, 0.1]
        with pytest.raises(CornerMismatchError, match="mismatch"):
            io.geometry_from_dict(doc)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"sides": [1,\n 2,,]}')
        with pytest.raises(io.SchemaError, match="line 2"):
            io.load_geometry(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.load_geometry(tmp_path / "none.json")


class TestResults:
    def test_geometry_map_round_trip(self, tmp_path):
        x = multilevel_map()
        io.save_result(tmp_path / "x.json", x)
        y = io.load_result(tmp_path / "x.json")
        assert y.space.compatible(x.space)
        assert y.coeffs.tobytes() == x.coeffs.tobytes()

    def test_control_map_round_trip(self, tmp_path):
        x = coons_patch(get_geometry("quarter_annulus"), uniform_space(4))
        s = maxprinciple_reparam(x, 0.5)
        io.save_result(tmp_path / "s.json", s)
        t = io.load_result(tmp_path / "s.json")
        assert isinstance(t, ControlMap) and t.identity_trace
        assert t.coeffs.tobytes() == s.coeffs.tobytes()

    def test_solve_report_round_trip(self):
        _, rep = solve(coons_patch(get_geometry("skewed_quad"), uniform_space(3)), SolverConfig())
        back = io.result_from_dict(json.loads(io.dumps(io.result_to_dict(rep))))
        assert back.to_dict() == rep.to_dict()

    def test_quality_report_as_document(self):
        rep = evaluate(identity_map(uniform_space(2)), ["Area"])
        back = io.result_from_dict(json.loads(io.dumps(io.result_to_dict(rep))))
        assert back == json.loads(json.dumps(rep.to_dict()))

    def test_save_is_deterministic(self, tmp_path):
        x = multilevel_map()
        io.save_result(tmp_path / "a.json", x)
        io.save_result(tmp_path / "b.json", multilevel_map())
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_coefficient_count(self):
        doc = io.result_to_dict(identity_map(uniform_space(2)))
        doc["coeffs"] = doc["coeffs"][:-1].tolist()
        with pytest.raises(io.SchemaError, match="coeffs"):
            io.result_from_dict(doc)

    def test_unknown_type(self):
        with pytest.raises(io.SchemaError, match="type"):
            io.result_from_dict({"type": "mesh"})
        with pytest.raises(TypeError):
            io.result_to_dict(3.0)


class TestSvg:
    def test_well_formed(self, tmp_path):
        x = multilevel_map()
        text = io.export_svg(x, (5, 7), tmp_path / "x.svg", mesh=True, title="a < b")
        root = ET.parse(tmp_path / "x.svg").getroot()
        assert root.tag == SVG + "svg"
        assert ET.fromstring(text.encode()).tag == root.tag
        assert root.find(SVG + "title").text == "a < b"
        lines = root.iter(SVG + "polyline")
        classes = [p.get("class") for p in lines]
        assert classes.count("xi") == 5 and classes.count("eta") == 7
        assert classes.count("element") == x.space.mesh.n_elements

    def test_points_stay_in_viewbox(self):
        x = coons_patch(get_geometry("horseshoe"), uniform_space(4))
        root = ET.fromstring(io.export_svg(x, 4, samples=80).encode())
        w, h = (float(v) for v in root.get("viewBox").split()[2:])
        for pl in root.iter(SVG + "polyline"):
            pts = np.array([p.split(",") for p in pl.get("points").split()], dtype=float)
            assert len(pts) == 80
            assert pts.min() >= 0 and pts[:, 0].max() <= w + 1e-9 and pts[:, 1].max() <= h + 1e-9

    def test_boundary_isolines_trace_boundary(self):
        # the first and last xi-isolines are the west and east sides, up to the svg transform
        x = coons_patch(square(), uniform_space(2))
        root = ET.fromstring(io.export_svg(x, (2, 2), width=120.0).encode())
        xi = [pl for pl in root.iter(SVG + "polyline") if pl.get("class") == "xi"]
        west = np.array([p.split(",") for p in xi[0].get("points").split()], dtype=float)
        east = np.array([p.split(",") for p in xi[1].get("points").split()], dtype=float)
        np.testing.assert_allclose(west[:, 0], 10.0)
        np.testing.assert_allclose(east[:, 0], 110.0)

    @pytest.mark.parametrize("kw", [dict(isolines=0), dict(samples=10)])
    def test_errors(self, kw):
        with pytest.raises(ValueError):
            io.export_svg(identity_map(uniform_space(2)), **kw)
