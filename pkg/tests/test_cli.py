import json
import xml.etree.ElementTree as ET

import pytest

from thbgrid import io
from thbgrid.cli import ProjectConfig, build_parser, load_config, main
from thbgrid.domopt import ControlMap
from thbgrid.thb import GeometryMap


@pytest.fixture
def run(tmp_path, capsys):
    """Call the CLI on a state file in ``tmp_path``; returns ``(exit code, stdout, stderr)``."""
    def call(*argv):
        code = main(["--state", str(tmp_path / "state.json"), *map(str, argv)])
        out = capsys.readouterr()
        return code, out.out, out.err
    return call


def quality_values(text):
    return {line.split()[0]: line.split()[-1] for line in text.splitlines() if line.startswith("L_")}


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg == ProjectConfig()
        assert cfg.solver_config().method == "newton"

    def test_merges_sections(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"n0": 4, "solver": {"method": "picard", "mu": 0.01}, "dwr": {"beta": 0.5}}))
        cfg = load_config(p)
        assert cfg.n0 == 4 and cfg.dwr["beta"] == 0.5 and cfg.dwr["goal"] == "bijectivity"
        sc = cfg.solver_config(mu=0.02)
        assert sc.method == "picard" and sc.mu == 0.02

    @pytest.mark.parametrize("doc,path", [({"colour": 1}, "<root>"), ({"solver": {"method": "sor"}}, "solver/method"),
                                          ({"export": {"samples": 8}}, "export/samples")])
    def test_rejects(self, doc, path):
        with pytest.raises(io.SchemaError, match="config: %s" % path):
            load_config(doc=doc)


class TestWorkflow:
    def test_square_is_winslow_optimal(self, run):
        assert run("init", "square", "--n0", 3)[0] == 0
        code, out, _ = run("solve", "--method", "newton")
        assert code == 0 and "converged" in out
        code, out, _ = run("quality", "--functionals", "W", "Area")
        vals = quality_values(out)
        assert code == 0 and abs(float(vals["L_W"]) - 2) <= 1e-10 and abs(float(vals["L_Area"]) - 1) <= 1e-10

    def test_state_history(self, run, tmp_path):
        run("init", "skewed_quad", "--n0", 3)
        run("solve")
        run("quality", "--functionals", "Length")
        doc = json.loads((tmp_path / "state.json").read_text())
        assert [h["command"] for h in doc["history"]] == ["init", "solve", "quality"]
        assert doc["history"][1]["report"]["converged"]

    def test_picard_without_regularization_warns(self, run):
        run("init", "quarter_annulus", "--n0", 3)
        code, out, _ = run("solve", "--method", "picard", "--mu", 0, "--max-iters", 3)
        assert "warning:" in out and "ill-posed" in out
        assert code in (0, 2)

    def test_no_convergence_exit_code(self, run, tmp_path):
        run("init", "quarter_annulus", "--n0", 4)
        code, out, _ = run("solve", "--max-iters", 1, "--tol", 1e-14, "--report", tmp_path / "r.json")
        assert code == 2 and "NOT converged" in out
        rep = io.load_result(tmp_path / "r.json")
        assert not rep.converged and len(rep.residuals) == 2

    def test_adapt_repairs_horseshoe(self, run, tmp_path):
        run("init", "horseshoe", "--n0", 5, "--fit-tol", 1e-2)
        run("solve")
        code, out, _ = run("quality", "--functionals", "Area")
        assert "L_W and L_ML are undefined" not in out
        before = json.loads((tmp_path / "state.json").read_text())["history"][1]["report"]
        assert before["n_negative"] > 0
        code, out, _ = run("adapt", "--beta", 0.2, "--report", tmp_path / "a.json")
        assert code == 0 and "|Xi_-| = 0" in out
        rounds = io.load_result(tmp_path / "a.json")["rounds"]
        assert rounds[0]["n_negative"] > 0 and rounds[-1]["goal_met"]

    def test_folded_quality_drops_winslow(self, run):
        run("init", "horseshoe", "--n0", 5, "--fit-tol", 1e-2)
        run("solve")
        code, out, _ = run("quality")
        vals = quality_values(out)
        assert code == 0 and "L_W" not in vals and "L_Area" in vals
        assert "undefined" in out

    def test_reparam_and_export(self, run, tmp_path):
        run("init", "quarter_annulus", "--n0", 4)
        run("solve")
        code, out, _ = run("reparam", "maxprinciple", "--k", 1)
        assert code == 0 and "recomputed map: converged" in out
        assert run("export", "json", "--what", "control", "--out", tmp_path / "s.json")[0] == 0
        assert isinstance(io.load_result(tmp_path / "s.json"), ControlMap)
        assert run("export", "json", "--what", "reference", "--out", tmp_path / "x.json")[0] == 0
        assert isinstance(io.load_result(tmp_path / "x.json"), GeometryMap)
        code, _, _ = run("export", "svg", "--out", tmp_path / "g.svg", "--isolines", 4, 6, "--mesh")
        root = ET.parse(tmp_path / "g.svg").getroot()
        assert code == 0 and root.tag.endswith("svg")

    def test_quality_scan_uses_seed(self, run, tmp_path):
        run("init", "square", "--n0", 2)
        run("--seed", 5, "quality", "--functionals", "Area", "--scan-points", 50, "--out", tmp_path / "q.json")
        doc = io.load_result(tmp_path / "q.json")
        assert doc["scan"]["seed"] == 5 and doc["scan"]["n_negative"] == 0

    def test_reproducible(self, run, tmp_path):
        for name in ("a", "b"):
            run("init", "quarter_annulus", "--n0", 3)
            run("solve")
            run("export", "json", "--out", tmp_path / (name + ".json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestErrors:
    def test_missing_state(self, run):
        code, _, err = run("solve")
        assert code == 1 and "run 'init' first" in err

    @pytest.mark.parametrize("argv", [["solve", "--method", "jacobi"], ["frobnicate"], []])
    def test_usage(self, run, argv):
        code, _, err = run(*argv)
        assert code == 1 and err.startswith("error:")

    def test_help(self, run):
        assert run("--help")[0] == 0

    def test_unknown_geometry(self, run):
        code, _, err = run("init", "triangle.json")
        assert code == 1 and "triangle.json" in err

    def test_bad_geometry_file(self, run, tmp_path):
        p = tmp_path / "g.json"
        p.write_text(json.dumps({"sides": {}}))
        code, _, err = run("init", p)
        assert code == 1 and "sides" in err

    def test_maxprinciple_needs_k(self, run):
        run("init", "square", "--n0", 2)
        code, _, err = run("reparam", "maxprinciple")
        assert code == 1 and "--k" in err

    def test_export_missing_control(self, run, tmp_path):
        run("init", "square", "--n0", 2)
        code, _, err = run("export", "json", "--what", "control", "--out", tmp_path / "s.json")
        assert code == 1 and "no control map" in err

    def test_bad_config(self, run, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"dwr": {"beta": 2}}))
        code, _, err = run("--config", p, "init", "square")
        assert code == 1 and "dwr/beta" in err

    def test_corrupt_state(self, run, tmp_path):
        (tmp_path / "state.json").write_text(json.dumps({"version": 99}))
        code, _, err = run("quality")
        assert code == 1 and "version" in err


def test_parser_lists_all_commands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"init", "solve", "adapt", "reparam", "quality", "export"}
