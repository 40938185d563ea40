"""Nonlocal Cahn-Hilliard-Navier-Stokes solver with singular potentials.

Library layout:

- potential: logarithmic free energy, regularized family, comparison lemmas
- kernel: interaction kernel, coefficient field a(x), restricted convolution
- grid_ops: cell-centered grids, no-flux operators, norms, Neumann inverse
- ch_step: convective Cahn-Hilliard time stepping (convex splitting)
- ns_step: incompressible flow stepping (MAC projection, variable viscosity)
- diagnostics: energy budgets, decay envelope, trajectory metric
- cli: run configuration, presets, the coupled loop, command line
"""

__version__ = "0.1.0"
