"""mfg-lab: a numerical laboratory for time-dependent mean field games.

Solves the coupled backward value / forward density system on the flat
torus, evaluates the variational (potential) functional and its second
variation, certifies linear stability of equilibria, and runs the
fictitious-play learning procedure with reproducible experiment drivers.
"""

from .grid import (
    DensityField,
    FluxField,
    ScalarField,
    TorusGrid,
    divergence,
    gradient,
    integrate,
    laplacian,
)
from .models import MfgModel, builtin_quadratic

__all__ = [
    "TorusGrid",
    "ScalarField",
    "DensityField",
    "FluxField",
    "gradient",
    "divergence",
    "laplacian",
    "integrate",
    "MfgModel",
    "builtin_quadratic",
]

__version__ = "0.1.0"
