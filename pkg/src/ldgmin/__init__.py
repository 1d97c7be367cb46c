"""ldgmin: local discontinuous Galerkin minimization of convex energies.

A 2D finite-element library and benchmark CLI: LDG discretization of convex
variational problems, an exactly computable dual maximizer, Raviart-Thomas
flux post-processing, a guaranteed a posteriori error estimator, and an
adaptive refinement driver.
"""

__version__ = "0.1.0"

# Honor the thread cap before anything pulls in numpy: the BLAS thread
# pools read their environment variables at import time.
import os as _os

_threads = _os.environ.get("LDGMIN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os

from . import (mesh, femspace, densities, ldg_core, solver, duality,  # noqa: F401,E402
               postprocess, adapt)
