"""Super-convergent IMEX-Peer methods: tableaus, integrator, stability and search."""

from .integrator import NewtonOptions, SplitOdeProblem, integrate
from .methods import BUILTIN_NAMES, builtin, resolve
from .stability import is_a_stable, region_summary, scan_region
from .tableau import MethodTableau, certify

__version__ = "0.1.0"

__all__ = ["BUILTIN_NAMES", "MethodTableau", "NewtonOptions", "SplitOdeProblem", "builtin",
           "certify", "integrate", "is_a_stable", "region_summary", "resolve", "scan_region"]
