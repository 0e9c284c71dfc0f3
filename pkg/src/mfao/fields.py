"""Scalar coefficient fields, phase-space radiance fields and boundary sources.

Scalar fields come in three flavors: constant, parametric-analytic (a closed
form the ray-marching kernels can evaluate exactly at quadrature points) and
gridded (multilinear interpolation).  Arbitrary Python callables are accepted
wherever evaluation happens in numpy, but the transport kernels require one
of the packable flavors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import Ball, SpatialGrid, interpolate

SIG_CONST = 0
SIG_PARAMETRIC = 1
SIG_GRIDDED = 2


class ScalarField:
    """Base interface: ``values_on(points) -> (m,) array``."""

    def values_on(self, points):
        raise NotImplementedError

    def __call__(self, points):
        return self.values_on(points)


@dataclass(frozen=True)
class ConstantField(ScalarField):
    value: float

    def values_on(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.full(points.shape[0], float(self.value))


@dataclass(frozen=True)
class AnalyticField(ScalarField):
    """Wraps an arbitrary vectorized callable ``fn(points) -> values``."""

    fn: object

    def values_on(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self.fn(points), dtype=float).reshape(points.shape[0])


@dataclass(frozen=True)
class ParametricField(ScalarField):
    """Constant plus isotropic Gaussian bumps plus mollified ball inclusions.

    ``gaussians`` is a sequence of (center, amplitude, width) with the bump
    ``amp * exp(-|x-c|^2 / (2 width^2))``.  ``inclusions`` is a sequence of
    (center, radius, edge, amplitude) where the profile ramps smoothly from
    ``amp`` inside ``radius - edge`` to 0 outside ``radius + edge``.
    ``support`` optionally clips the whole field to a ball (coefficients are
    zero-extended outside a ball domain).
    """

    base: float
    gaussians: tuple = ()
    inclusions: tuple = ()
    support: Ball | None = None

    def values_on(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        v = np.full(points.shape[0], float(self.base))
        for center, amp, width in self.gaussians:
            d2 = np.sum((points - np.asarray(center, dtype=float)) ** 2, axis=1)
            v += amp * np.exp(-d2 / (2.0 * width * width))
        for center, radius, edge, amp in self.inclusions:
            d = np.linalg.norm(points - np.asarray(center, dtype=float), axis=1)
            t = np.clip(0.5 + (radius - d) / (2.0 * edge), 0.0, 1.0)
            v += amp * (t * t * (3.0 - 2.0 * t))
        if self.support is not None:
            v = np.where(self.support.contains(points), v, 0.0)
        return v


@dataclass(frozen=True)
class GriddedField(ScalarField):
    """Nodal samples on a SpatialGrid, evaluated by multilinear interpolation."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=float).reshape(self.grid.shape))
        object.__setattr__(self, "values", vals)

    def values_on(self, points):
        return interpolate(self.grid, self.values, points)


@dataclass
class SigmaPack:
    """Flat parameter block a marching kernel can consume."""

    mode: int
    scalars: np.ndarray
    gauss: np.ndarray
    incl: np.ndarray
    grid_values: np.ndarray
    support: np.ndarray
    grid_lo: np.ndarray
    grid_spacing: np.ndarray
    grid_counts: np.ndarray


def _support_block(support, dim):
    blk = np.zeros(5)
    if support is not None:
        blk[0] = 1.0
        blk[1:1 + dim] = support.center_arr
        blk[4] = support.radius
    return blk


def pack_scalar_field(fld, grid):
    """Encode a packable ScalarField for the numba kernels.

    Gridded fields must live on ``grid`` (the solver's spatial grid);
    everything else is dimension-generic.
    """
    dim = grid.dimension
    dummy = np.zeros((1,) * dim)
    lo, sp = grid.lo_arr, grid.spacing_arr
    cts = np.asarray(grid.counts, dtype=np.int64)
    if isinstance(fld, ConstantField):
        return SigmaPack(SIG_CONST, np.array([fld.value]), np.zeros((0, dim + 2)),
                         np.zeros((0, dim + 3)), dummy, np.zeros(5), lo, sp, cts)
    if isinstance(fld, ParametricField):
        ng = len(fld.gaussians)
        gauss = np.zeros((ng, dim + 2))
        for i, (c, amp, w) in enumerate(fld.gaussians):
            gauss[i, :dim] = np.asarray(c, dtype=float)
            gauss[i, dim] = amp
            gauss[i, dim + 1] = 1.0 / (2.0 * w * w)
        ni = len(fld.inclusions)
        incl = np.zeros((ni, dim + 3))
        for i, (c, r, e, amp) in enumerate(fld.inclusions):
            incl[i, :dim] = np.asarray(c, dtype=float)
            incl[i, dim] = r
            incl[i, dim + 1] = e
            incl[i, dim + 2] = amp
        return SigmaPack(SIG_PARAMETRIC, np.array([fld.base]), gauss, incl, dummy,
                         _support_block(fld.support, dim), lo, sp, cts)
    if isinstance(fld, GriddedField):
        if fld.grid != grid:
            raise ContractError("gridded coefficient must live on the solver grid")
        return SigmaPack(SIG_GRIDDED, np.zeros(1), np.zeros((0, dim + 2)),
                         np.zeros((0, dim + 3)), np.ascontiguousarray(fld.values),
                         np.zeros(5), lo, sp, cts)
    raise ContractError(
        f"{type(fld).__name__} cannot be used inside the transport kernels; "
        "use ConstantField, ParametricField or GriddedField")


@dataclass
class RadianceField:
    """Phase-space intensity samples: one value per (spatial node, direction).

    ``values`` has shape (grid.size, agrid.count) and may be real or complex.
    """

    grid: SpatialGrid
    agrid: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values)
        expected = (self.grid.size, self.agrid.count)
        if self.values.shape != expected:
            raise ContractError(f"radiance values must have shape {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("radiance values must be finite")

    @property
    def is_complex(self):
        return np.iscomplexobj(self.values)

    def sup_norm(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def angular_l1(self):
        """L1 norm in the angular variable at each spatial node."""
        return np.abs(self.values) @ self.agrid.weights

    def at_points(self, points):
        """Multilinear interpolation in space; angular dependence stays nodal."""
        return interpolate(self.grid, self.values, points)

    def scaled(self, factor):
        return RadianceField(self.grid, self.agrid, self.values * factor)


@dataclass(frozen=True)
class BoundaryField:
    """A boundary condition evaluated pointwise on boundary phase space.

    ``fn(points, theta_idx, agrid) -> values`` evaluates the field at
    arbitrary boundary points paired with angular node indices; sources are
    analytic so no interpolation error enters the ballistic operator.
    ``side`` is ``"incoming"`` for data on the inflow boundary and
    ``"outgoing"`` for detector weights on the outflow boundary.
    """

    fn: object
    side: str = "incoming"
    label: str = ""
    meta: dict = field(default_factory=dict)

    def values(self, points, theta_idx, agrid):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta_idx = np.asarray(theta_idx, dtype=np.int64)
        out = np.asarray(self.fn(points, theta_idx, agrid))
        return out.reshape(points.shape[0])

    def flipped(self, scale=1.0):
        """The field ``(y, theta) -> scale * f(y, -theta)`` on the other side."""
        other = "outgoing" if self.side == "incoming" else "incoming"

        def fn(points, theta_idx, agrid):
            return scale * self.values(points, agrid.antipodal[theta_idx], agrid)

        return BoundaryField(fn, side=other, label=f"flip({self.label})",
                             meta=dict(self.meta))


def constant_source(amplitude=1.0, side="incoming", label="constant"):
    def fn(points, theta_idx, agrid):
        return np.full(points.shape[0], amplitude)
    return BoundaryField(fn, side=side, label=label)


def callable_source(fn_xy_theta, side="incoming", label="callable"):
    """Source from ``fn(points, theta_vectors) -> values``."""
    def fn(points, theta_idx, agrid):
        return fn_xy_theta(points, agrid.nodes[theta_idx])
    return BoundaryField(fn, side=side, label=label)


def angular_profile_source(profile, spatial_fn=None, side="incoming", label="profile"):
    """Source separable into a nodal angular profile times a spatial factor."""
    profile = np.asarray(profile)

    def fn(points, theta_idx, agrid):
        vals = profile[theta_idx]
        if spatial_fn is not None:
            vals = vals * np.asarray(spatial_fn(points))
        return vals

    return BoundaryField(fn, side=side, label=label)
