"""Numerical laboratory for multi-frequency acousto-optic transport.

Forward-simulates the three-stage frequency-shifted transport system,
synthesizes boundary measurements, recovers the internal functional from
them, and reconstructs the absorption coefficient and scattering kernel by
the constructive broken-ray procedure.
"""

__version__ = "0.1.0"

from .coefficients import (HenyeyGreenstein, IsotropicPhase, Phantom,
                           SeparableKernel, TabulatedKernel, UltrasoundProbe,
                           phantom_library, validate)
from .fields import (AnalyticField, BoundaryField, ConstantField,
                     GriddedField, ParametricField, RadianceField,
                     angular_profile_source, callable_source, constant_source)
from .geometry import (AngularGrid, Ball, BoundaryGrid, Box, SpatialGrid,
                       angular_grid, angular_grid_2d, angular_grid_3d,
                       boundary_grid, gamma, interpolate, optical_distance,
                       ray_trace)
from .transport import (OutgoingSamples, SolveResult, SolverOptions,
                        TransportOperator, outgoing_samples, pairing)
