"""Equilibrium configurations of crystalline solids with uniform dislocation densities.

Submodules
----------
geometry
    Lie-group frames, dislocation densities, Burgers circuits, material metrics
    and Heisenberg normal coordinates.
constitutive
    Stored energies, stresses and ellipticity diagnostics.
mesh
    Disk and ball meshes, quadrature and mesh files.
linear
    Flat pure-traction elasticity: operator, Killing fields, doping, gauge.
equilibrium
    Discrete energy, weak residual, the doped outer iteration and rescaling.
cli
    Command-line front end.
"""

from .constitutive import EnergyModel
from .equilibrium import (
    ProblemSpec,
    discrete_energy,
    edge_problem,
    outer_iteration,
    rescale_solution,
    screw_problem,
    solve_screw_3d,
    weak_residual,
)
from .errors import *  # noqa: F401,F403
from .geometry import HeisenbergChart, HyperbolicMetric, affine_frame, heisenberg_frame
from .linear import DisplacementField, TractionProblem, killing_basis, solve_traction
from .mesh import Mesh, generate_ball_mesh, generate_disk_mesh, load_mesh, save_mesh

__version__ = "0.1.0"
