"""Solver kit for high-order vector backward stochastic PDEs with jumps.

Submodules
----------
fields     grids, finite-difference derivatives, weighted norms
operators  drift/diffusion operator pairs and the linear instance
drivers    Brownian / subordinator sampling with per-path streams
picard     regression-based backward solver and fixed-point loop
domains    annulus families, random environments, path evaluation
finance    two-asset utility model with closed-form oracle
cli        config-driven command line front end
"""

__version__ = "0.1.0"

from . import domains, drivers, fields, finance, operators, picard  # noqa: E402

__all__ = ["fields", "drivers", "operators", "picard", "domains", "finance", "__version__"]
