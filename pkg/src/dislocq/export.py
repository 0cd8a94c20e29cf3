"""CSV, JSON and legacy ASCII VTK writers for solver output.

Floats are written with ``repr`` so that every value round-trips exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mesh import Mesh

__all__ = ["write_displacement_csv", "write_cell_csv", "write_summary", "write_vtk"]

_VTK_CELL_TYPE = {2: 5, 3: 10}


def _fmt(v):
    return repr(float(v))


def write_displacement_csv(path, mesh: Mesh, values) -> None:
    d = mesh.dim
    header = ["node"] + [f"y{a + 1}" for a in range(d)] + [f"psi{a + 1}" for a in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, (y, p) in enumerate(zip(mesh.nodes, np.asarray(values))):
            w.writerow([k, *map(_fmt, y), *map(_fmt, p)])


def write_cell_csv(path, S, T, energy_density) -> None:
    S = np.asarray(S)
    d = S.shape[-1]
    comps = [(a, b) for a in range(d) for b in range(a, d)]
    header = ["cell"] + [f"S_{a + 1}{b + 1}" for a, b in comps] + [f"T_{a + 1}{b + 1}" for a, b in comps] + ["energy_density"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for c in range(S.shape[0]):
            row = [c] + [_fmt(S[c, a, b]) for a, b in comps] + [_fmt(T[c, a, b]) for a, b in comps]
            w.writerow(row + [_fmt(energy_density[c])])


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _tensor3(t):
    """Pad a 2x2 tensor to 3x3 for VTK."""
    out = np.zeros((3, 3))
    d = t.shape[0]
    out[:d, :d] = t
    return out


def write_vtk(path, mesh: Mesh, values, cell_tensors: dict | None = None, cell_scalars: dict | None = None) -> None:
    """Legacy ASCII unstructured grid with nodal displacement and cell data."""
    d = mesh.dim
    pts = np.zeros((mesh.num_nodes, 3))
    pts[:, :d] = mesh.nodes
    disp = np.zeros((mesh.num_nodes, 3))
    disp[:, :d] = np.asarray(values)
    lines = ["# vtk DataFile Version 3.0", "dislocq solution", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.num_nodes} double")
    lines += [" ".join(map(_fmt, p)) for p in pts]
    n = mesh.num_cells
    lines.append(f"CELLS {n} {n * (d + 2)}")
    lines += [f"{d + 1} " + " ".join(str(int(v)) for v in cell) for cell in mesh.cells]
    lines.append(f"CELL_TYPES {n}")
    lines += [str(_VTK_CELL_TYPE[d])] * n
    lines.append(f"POINT_DATA {mesh.num_nodes}")
    lines.append("VECTORS displacement double")
    lines += [" ".join(map(_fmt, p)) for p in disp]
    if cell_tensors or cell_scalars:
        lines.append(f"CELL_DATA {n}")
    for name, arr in (cell_tensors or {}).items():
        lines.append(f"TENSORS {name} double")
        for t in np.asarray(arr):
            t3 = _tensor3(t)
            lines += [" ".join(map(_fmt, row)) for row in t3]
    for name, arr in (cell_scalars or {}).items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines += [_fmt(v) for v in np.asarray(arr)]
    Path(path).write_text("\n".join(lines) + "\n")
