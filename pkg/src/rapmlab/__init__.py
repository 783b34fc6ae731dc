"""Numerical laboratory for the RAPM nonlinear option-pricing model.

Subpackages:

* ``model``          -- constants, admissibility and well-posedness checks
* ``quartic``        -- real roots and branch tracking of the reduction quartics
* ``reductions_rnz`` -- invariant solution families for r != 0
* ``reductions_r0``  -- invariant solution families for r = 0
* ``symmetry``       -- generators, commutators, flows, subalgebra catalog
* ``pde``            -- operator residuals and the finite-difference solver
* ``hedging``        -- path simulation and the optimal-lag Monte Carlo
* ``cli``            -- command-line entry point
"""

from .errors import (
    BranchTerminated,
    DenominatorSingularity,
    NumericalError,
    ParabolicityLost,
    PicardStalled,
    RapmlabError,
    SupportError,
    ValidationError,
)
from .model import (
    Admissibility,
    ModelParams,
    admissible,
    derive_mu,
    optimal_time_lag,
    parabolicity_margin,
    switching_time,
)
from .pde import GridSpec, Rect, SurfaceFn, bs_closed_form, fd_solve, rapm_operator, residual_norm
from .quartic import RapmQuartic, RootBranch, real_roots, signed_cbrt, track_root

__version__ = "0.1.0"
