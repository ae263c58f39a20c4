"""Hybridised DG solver for the 2D incompressible Euler equations.

Spatial discretisation: vector DG velocity, DG pressure, and facet traces
coupling the divergence constraint. Time integration: IMEX Runge-Kutta with
a projection-preconditioned defect-correction stage solver; the pressure
systems are statically condensed to the trace space and solved by GMRES
with a non-nested two-level multigrid preconditioner.
"""

__version__ = "0.1.0"
