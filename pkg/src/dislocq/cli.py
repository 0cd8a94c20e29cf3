"""Command-line front end: ``solve``, ``check`` and ``mesh`` subcommands.

Exit codes: 0 success, 1 a self-check failed, 2 configuration or mesh
error, 3 the solver diverged or failed.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constitutive import legendre_hadamard
from .equilibrium import (
    cell_fields,
    discrete_energy,
    edge_problem,
    gradient_check,
    outer_iteration,
    rescale_solution,
    screw_problem,
    solve_screw_3d,
    weak_residual,
)
from .errors import ConfigError, DislocqError, DivergenceError, DomainError, MeshError, PreconditionError
from .export import write_cell_csv, write_displacement_csv, write_summary, write_vtk
from .geometry import (
    affine_frame,
    burgers_circuit,
    dislocation_flux,
    heisenberg_frame,
    heisenberg_normal_chart,
    square_circuit,
    square_triangulation,
)
from .linear import DisplacementField
from .mesh import generate_ball_mesh, generate_disk_mesh, load_mesh, save_mesh

__all__ = ["RunConfig", "parse_config", "load_config", "build_problem", "cmd_solve", "cmd_check", "cmd_mesh", "main"]

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

_FLOAT_KEYS = {"epsilon", "beta", "alpha", "beta_w", "mesh_radius", "mesh_h", "outer_tol", "linear_tol", "chart_radius"}
_INT_KEYS = {"max_outer", "seed"}
_STR_KEYS = {"problem", "mesh_file", "output_dir", "export"}
_KNOWN = _FLOAT_KEYS | _INT_KEYS | _STR_KEYS
_REQUIRED = {"edge2d": ("epsilon",), "screw3d": ("beta",)}
_DEFAULTS = {
    "edge2d": {"mesh_radius": 1.0, "mesh_h": 0.1},
    "screw3d": {"mesh_radius": 0.2, "mesh_h": 0.05, "alpha": 1.0, "beta_w": 1.0, "chart_radius": 0.5},
}


@dataclass(frozen=True)
class RunConfig:
    problem: str
    values: dict
    source: Path | None = None

    def get(self, key, default=None):
        return self.values.get(key, _DEFAULTS[self.problem].get(key, default))

    @property
    def output_dir(self) -> Path:
        if "output_dir" in self.values:
            out = Path(self.values["output_dir"])
            if not out.is_absolute() and self.source is not None:
                out = self.source.parent / out
            return out
        base = self.source.parent / f"{self.source.stem}_out" if self.source else Path("dislocq_out")
        return base

    @property
    def exports(self):
        raw = self.values.get("export", "csv")
        fmts = [f.strip() for f in raw.split(",") if f.strip()]
        bad = [f for f in fmts if f not in ("csv", "vtk")]
        if bad:
            raise ConfigError(f"unknown export format(s): {', '.join(bad)}")
        return fmts


def parse_config(text: str, source=None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in _FLOAT_KEYS:
            try:
                v = float(value)
            except ValueError:
                raise ConfigError(f"key {key!r}: {value!r} is not a number") from None
            if not math.isfinite(v):
                raise ConfigError(f"key {key!r} must be finite")
            values[key] = v
        elif key in _INT_KEYS:
            try:
                values[key] = int(value)
            except ValueError:
                raise ConfigError(f"key {key!r}: {value!r} is not an integer") from None
        else:
            values[key] = value
    if "problem" not in values:
        raise ConfigError("missing required key 'problem'")
    problem = values.pop("problem")
    if problem not in _REQUIRED:
        raise ConfigError(f"key 'problem' must be edge2d or screw3d, got {problem!r}")
    for key in _REQUIRED[problem]:
        if key not in values:
            raise ConfigError(f"missing required key {key!r} for problem {problem}")
    cfg = RunConfig(problem, values, Path(source) if source else None)
    cfg.exports
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def _mesh_for(cfg: RunConfig):
    if "mesh_file" in cfg.values:
        path = Path(cfg.values["mesh_file"])
        if not path.is_absolute() and cfg.source is not None:
            path = cfg.source.parent / path
        try:
            return load_mesh(path)
        except OSError as exc:
            raise ConfigError(f"cannot read mesh {path}: {exc.strerror}") from None
    radius, h = cfg.get("mesh_radius"), cfg.get("mesh_h")
    gen = generate_disk_mesh if cfg.problem == "edge2d" else generate_ball_mesh
    return gen(radius, h)


def build_problem(cfg: RunConfig):
    """Mesh and :class:`~dislocq.equilibrium.ProblemSpec` for a configuration."""
    mesh = _mesh_for(cfg)
    opts = {}
    for key in ("outer_tol", "linear_tol", "max_outer"):
        if key in cfg.values:
            opts[key] = cfg.values[key]
    if cfg.problem == "edge2d":
        eps = cfg.get("epsilon")
        if eps < 0:
            raise ConfigError("epsilon must be non-negative")
        return edge_problem(mesh, eps, **opts)
    return screw_problem(
        mesh, cfg.get("beta"), cfg.get("alpha"), cfg.get("beta_w"), chart_radius=cfg.get("chart_radius"), **opts
    )


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _write_outputs(cfg, spec, psi, report, converged, elapsed):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    summary = {
        "problem": cfg.problem,
        "converged": bool(converged),
        "iterations": report.iterations,
        "max_abs_psi": psi.max_norm(),
        "max_abs_c": report.max_doping,
        "final_residual": report.final_residual,
        "final_increment": float(report.increments[-1]) if report.increments else float("nan"),
        "energy": float(report.energies[-1]) if report.energies else float("nan"),
        "contraction_ratios": [float(v) for v in report.contraction_ratios],
        "nodes": spec.mesh.num_nodes,
        "cells": spec.mesh.num_cells,
        "epsilon": cfg.get("epsilon"),
        "beta": cfg.get("beta"),
        "elapsed_seconds": elapsed,
    }
    fields = None
    try:
        fields = cell_fields(spec, psi)
    except DislocqError as exc:
        summary["cell_fields_error"] = str(exc)
    if "csv" in cfg.exports:
        write_displacement_csv(out / "displacement.csv", spec.mesh, psi.values)
        if fields is not None:
            write_cell_csv(out / "cells.csv", fields.S, fields.T, fields.energy_density)
    if "vtk" in cfg.exports:
        tensors = {"S": fields.S, "T": fields.T} if fields is not None else None
        scalars = {"energy_density": fields.energy_density} if fields is not None else None
        write_vtk(out / "solution.vtk", spec.mesh, psi.values, tensors, scalars)
    write_summary(out / "summary.json", {k: v for k, v in summary.items() if v is not None})
    return summary


def cmd_solve(config_path) -> int:
    try:
        cfg = load_config(config_path)
        spec = build_problem(cfg)
    except (ConfigError, MeshError, PreconditionError, DomainError) as exc:
        _err(exc)
        return EXIT_CONFIG
    start = time.perf_counter()
    solver = outer_iteration if cfg.problem == "edge2d" else solve_screw_3d
    try:
        psi, report = solver(spec)
    except DivergenceError as exc:
        _write_outputs(cfg, spec, exc.psi, exc.report, False, time.perf_counter() - start)
        _err(exc)
        return EXIT_DIVERGED
    except PreconditionError as exc:
        _err(exc)
        return EXIT_CONFIG
    except DislocqError as exc:
        _err(exc)
        return EXIT_DIVERGED
    summary = _write_outputs(cfg, spec, psi, report, True, time.perf_counter() - start)
    print(
        f"converged in {summary['iterations']} iterations; max|psi| = {summary['max_abs_psi']!r}; "
        f"max|c| = {summary['max_abs_c']!r}; output in {cfg.output_dir}"
    )
    return EXIT_OK


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: str
    passed: bool


def _check_gradient(cfg, spec):
    rng = np.random.default_rng(cfg.get("seed", 0))
    radius = float(np.linalg.norm(spec.mesh.nodes, axis=1).max())
    psi = rng.uniform(-1.0, 1.0, spec.mesh.nodes.shape)
    psi *= 1e-3 * radius / np.abs(psi).max()
    err, _, _ = gradient_check(spec, psi)
    return CheckResult("gradient vs finite differences (rel)", err, "< 1e-6", err < 1e-6)


def _check_lh(cfg, spec):
    model = spec.model
    value = legendre_hadamard(model, np.eye(spec.dim))
    if model.kind == "isotropic":
        return CheckResult("Legendre-Hadamard minimum at identity", value, "0.5 +- 1e-3", abs(value - 0.5) < 1e-3)
    return CheckResult("Legendre-Hadamard minimum at identity", value, "> 0", value > 0)


def _check_burgers(cfg, spec):
    side = 0.5
    closed = burgers_circuit(affine_frame, square_circuit(side, 8)).vector
    flux = dislocation_flux(affine_frame, *square_triangulation(side, 8))
    err = float(np.abs(closed - flux).max())
    if cfg.problem == "screw3d":
        beta = cfg.get("beta")
        frame = lambda y: heisenberg_frame(y, beta)  # noqa: E731
        closed = burgers_circuit(frame, square_circuit(1.0, 4, 3)).vector
        flux = dislocation_flux(frame, *square_triangulation(1.0, 4, 3))
        err = max(err, float(np.abs(closed - flux).max()))
    return CheckResult("Burgers circuit vs area quadrature", err, "< 1e-6", err < 1e-6)


def _check_scaling(cfg, spec):
    """Energy scales by l^2 and the residual by l under the similarity map."""
    rng = np.random.default_rng(cfg.get("seed", 0) + 1)
    psi = rng.uniform(-1.0, 1.0, spec.mesh.nodes.shape) * 1e-3
    l = 2.0
    scaled = rescale_solution(DisplacementField(spec.mesh, psi), l, spec.epsilon)
    sspec = scaled.spec(spec)
    e0, e1 = discrete_energy(spec, psi), discrete_energy(sspec, scaled.field)
    g0, g1 = weak_residual(spec, psi), weak_residual(sspec, scaled.field)
    err = max(abs(e1 - l * l * e0) / abs(e0), float(np.abs(g1 - l * g0).max() / np.abs(g0).max()))
    return CheckResult("similarity scaling of energy and residual (rel)", err, "< 1e-10", err < 1e-10)


def _check_chart(cfg, spec):
    chart = heisenberg_normal_chart(cfg.get("beta"), radius=cfg.get("chart_radius"))
    radii = np.array([0.05, 0.1, 0.2])
    dirs = np.random.default_rng(0).normal(size=(32, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    devs = [np.abs(chart(r * dirs) - np.eye(3)).max() for r in radii]
    slope = float(np.polyfit(np.log(radii), np.log(devs), 1)[0])
    return CheckResult("normal chart deviation slope", slope, ">= 1.9", slope >= 1.9)


def cmd_check(config_path) -> int:
    try:
        cfg = load_config(config_path)
        spec = build_problem(cfg)
    except (ConfigError, MeshError, PreconditionError, DomainError) as exc:
        _err(exc)
        return EXIT_CONFIG
    checks = [_check_gradient, _check_lh, _check_burgers]
    checks.append(_check_scaling if cfg.problem == "edge2d" else _check_chart)
    results = []
    for check in checks:
        try:
            results.append(check(cfg, spec))
        except DislocqError as exc:
            results.append(CheckResult(check.__name__.lstrip("_"), float("nan"), str(exc), False))
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  value={r.value!r}  tol {r.tolerance}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_mesh(kind, radius, h, out) -> int:
    try:
        gen = {"disk": generate_disk_mesh, "ball": generate_ball_mesh}[kind]
        mesh = gen(float(radius), float(h))
        save_mesh(mesh, out)
        load_mesh(out)
    except (PreconditionError, MeshError, ValueError, KeyError) as exc:
        _err(exc)
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot write {out}: {exc.strerror}")
        return EXIT_CONFIG
    print(f"wrote {mesh!r} to {out}")
    return EXIT_OK


def _parser():
    p = argparse.ArgumentParser(prog="dislocq", description="Equilibria of solids with uniform dislocation densities.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="run the outer iteration and write results")
    s.add_argument("config")
    c = sub.add_parser("check", help="run self-checks and print a pass/fail table")
    c.add_argument("config")
    m = sub.add_parser("mesh", help="generate a disk or ball mesh file")
    m.add_argument("kind", choices=["disk", "ball"])
    m.add_argument("radius", type=float)
    m.add_argument("h", type=float)
    m.add_argument("out")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "solve":
        return cmd_solve(args.config)
    if args.command == "check":
        return cmd_check(args.config)
    return cmd_mesh(args.kind, args.radius, args.h, args.out)


if __name__ == "__main__":
    sys.exit(main())
