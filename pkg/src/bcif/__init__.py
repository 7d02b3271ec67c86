"""Pseudo-spectral constructor for Boussinesq-Reynolds tuples on T^3.

Submodules:

* :mod:`bcif.geometry`    -- direction family, matrix/vector decompositions,
  Beltrami modes
* :mod:`bcif.grid`        -- periodic grids, spectral calculus, dealiased
  products, modulated plane waves
* :mod:`bcif.timeops`     -- time sampling and the shared discrete d/dt
* :mod:`bcif.antidiv`     -- the anti-divergence operators and stationary
  phase integrals
* :mod:`bcif.partition`   -- quadratic partition of unity on the lattice
* :mod:`bcif.scheme`      -- perturbation steps, stages, outer iteration,
  presets
* :mod:`bcif.diagnostics` -- residual checks, energy gap, norm reports,
  decay experiments
* :mod:`bcif.snapshot`    -- binary field snapshots
* :mod:`bcif.cli`         -- config-driven experiment runner
"""

from bcif.geometry import build_family

__all__ = ["build_family"]
__version__ = "0.1.0"
