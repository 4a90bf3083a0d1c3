"""Numerical companion for multi-species kinetic mixtures and their
non-isothermal Maxwell-Stefan diffusion limit.

Modules
-------
mixture
    Species, collision-kernel parameters, Maxwellians and velocity grids.
ms_matrix
    Maxwell-Stefan matrix algebra and flux-force solves.
diffusion
    Binary diffusion coefficients and their Monte-Carlo oracle.
collision
    Boltzmann collision probes, space-homogeneous relaxation and
    collision frequencies.
linearized
    Linearized collision operator, kernel projections and spectral gap.
ms_solver
    Perturbative Maxwell-Stefan solver with energy diagnostics.
cli
    Scenario configuration and the ``mskin`` command line.
"""

from __future__ import annotations

__version__ = "0.1.0"
