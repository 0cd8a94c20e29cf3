import json
import subprocess
import sys

import numpy as np
import pytest

from dislocq.cli import main, parse_config
from dislocq.errors import ConfigError
from dislocq.mesh import generate_disk_mesh, load_mesh, save_mesh


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


EDGE = "problem = edge2d\nepsilon = 0.05\nmesh_h = 0.25\n"


class TestParse:
    def test_defaults(self):
        cfg = parse_config("problem = screw3d\nbeta = 0.1  # comment\n")
        assert cfg.get("mesh_radius") == 0.2
        assert cfg.get("alpha") == 1.0
        assert cfg.exports == ["csv"]

    @pytest.mark.parametrize(
        "text,needle",
        [
            ("problem = edge2d\n", "epsilon"),
            ("epsilon = 0.1\n", "problem"),
            ("problem = edge2d\nepsilon = 0.1\ncolour = red\n", "colour"),
            ("problem = edge2d\nepsilon = 0.1\nepsilon = 0.2\n", "duplicate"),
            ("problem = edge2d\nepsilon = abc\n", "epsilon"),
            ("problem = edge2d\nepsilon = 0.1\nexport = pdf\n", "pdf"),
            ("problem = plate\n", "plate"),
            ("problem edge2d\n", "line 1"),
        ],
    )
    def test_errors_name_the_problem(self, text, needle):
        with pytest.raises(ConfigError, match=needle):
            parse_config(text)


class TestSolve:
    def test_outputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path, EDGE + "export = csv,vtk\n")
        assert main(["solve", str(cfg)]) == 0
        out = tmp_path / "run_out"
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] and summary["max_abs_c"] < 1e-8
        report = (out / "report.csv").read_text().splitlines()
        assert report[0].startswith("n,residual,increment,E_h")
        assert len(report) == summary["iterations"] + 1
        disp = np.loadtxt(out / "displacement.csv", delimiter=",", skiprows=1)
        assert disp.shape[0] == summary["nodes"]
        vtk = (out / "solution.vtk").read_text().splitlines()
        assert vtk[0] == "# vtk DataFile Version 3.0"
        assert "DATASET UNSTRUCTURED_GRID" in vtk
        assert any(line.startswith("CELL_TYPES") for line in vtk)
        assert "converged" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        a = write_config(tmp_path, EDGE + "output_dir = a\n", "a.cfg")
        b = write_config(tmp_path, EDGE + "output_dir = b\n", "b.cfg")
        assert main(["solve", str(a)]) == main(["solve", str(b)]) == 0
        for name in ("report.csv", "displacement.csv", "cells.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_mesh_file(self, tmp_path):
        save_mesh(generate_disk_mesh(1.0, 0.3), tmp_path / "d.msh")
        cfg = write_config(tmp_path, "problem = edge2d\nepsilon = 0.0\nmesh_file = d.msh\n")
        assert main(["solve", str(cfg)]) == 0
        summary = json.loads((tmp_path / "run_out" / "summary.json").read_text())
        assert summary["iterations"] == 1 and summary["max_abs_psi"] == 0.0

    def test_missing_key(self, tmp_path, capsys):
        assert main(["solve", str(write_config(tmp_path, "problem = edge2d\n"))]) == 2
        assert "epsilon" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["solve", str(tmp_path / "none.cfg")]) == 2

    def test_bad_mesh_file(self, tmp_path):
        (tmp_path / "bad.msh").write_text("dim 2\nnodes 0\ncells 0\nboundary 0\n")
        cfg = write_config(tmp_path, "problem = edge2d\nepsilon = 0.0\nmesh_file = bad.msh\n")
        assert main(["solve", str(cfg)]) == 2

    def test_epsilon_out_of_range(self, tmp_path):
        assert main(["solve", str(write_config(tmp_path, "problem = edge2d\nepsilon = 0.5\nmesh_h = 0.25\n"))]) == 2

    def test_diverged(self, tmp_path):
        cfg = write_config(tmp_path, EDGE + "max_outer = 1\n")
        assert main(["solve", str(cfg)]) == 3
        summary = json.loads((tmp_path / "run_out" / "summary.json").read_text())
        assert summary["converged"] is False


class TestCheck:
    def test_edge(self, tmp_path, capsys):
        assert main(["check", str(write_config(tmp_path, EDGE))]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 4
        assert all(line.startswith("PASS") for line in lines)

    def test_screw(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "problem = screw3d\nbeta = 0.1\nmesh_h = 0.1\n")
        assert main(["check", str(cfg)]) == 0
        assert capsys.readouterr().out.count("PASS") == 4


class TestMesh:
    def test_disk(self, tmp_path):
        out = tmp_path / "d.msh"
        assert main(["mesh", "disk", "1", "0.2", str(out)]) == 0
        assert load_mesh(out) == generate_disk_mesh(1.0, 0.2)

    def test_ball_header(self, tmp_path):
        out = tmp_path / "b.msh"
        assert main(["mesh", "ball", "0.2", "0.1", str(out)]) == 0
        assert out.read_text().startswith("dim 3\n")

    def test_bad_h(self, tmp_path):
        assert main(["mesh", "disk", "1", "0", str(tmp_path / "x.msh")]) == 2

    def test_usage_error(self):
        assert main(["mesh", "square", "1", "0.1", "x"]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.msh"
    proc = subprocess.run([sys.executable, "-m", "dislocq", "mesh", "disk", "1", "0.5", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
