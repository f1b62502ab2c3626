"""Volume-constrained curvature-prescription flow on discrete closed surfaces."""

__version__ = "0.1.0"

from . import errors, flow, harness, linpar, statics, surface
from .surface import (
    DiscreteSurface,
    build_periodic_grid,
    build_two_vertex,
    conformal_volume,
    dirichlet_energy,
    gauss_curvature,
    integrate,
    laplacian,
    load_mesh,
)

__all__ = [
    "DiscreteSurface",
    "build_periodic_grid",
    "build_two_vertex",
    "conformal_volume",
    "dirichlet_energy",
    "errors",
    "flow",
    "gauss_curvature",
    "harness",
    "integrate",
    "laplacian",
    "linpar",
    "load_mesh",
    "statics",
    "surface",
]
