"""Cut-cell finite volume solver for 2D variable-coefficient elliptic
interface problems at selectable order of accuracy P in {2, 4, 6}."""

from .geometry import (CutCellGeometry, classify_corners, cut_cell_moments,
                       find_face_root, full_cell_moments, polygon_moments,
                       segment_moments)
from .harness import TestConfig, geometry_catalog, run_suite
from .linsys import LinearSystem, SolveReport, assemble, precondition, solve
from .mesh import Mesh, Neighborhood, build_mesh, regular_footprint
from .multiindex import MultiIndexSet, enumerate_indices, reduced_regular
from .stencils import (Stencil, StencilFactory, coefficient_taylor,
                       conservative_flux_merge, g_alpha, g_beta_face,
                       regular_stencils, weighted_pseudoinverse)

__version__ = "0.1.0"
