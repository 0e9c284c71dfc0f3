"""Transport operator algebra and the collision-expansion solver.

The discrete model keeps the angular variable nodal (no angular
interpolation) and evaluates every operator by ray marching:

* ballistic ``J``: attenuated boundary data along the backward ray,
* lift ``T^-1``: attenuated line integral of an interior source,
* scatter ``A2``: angular quadrature against the kernel matrix,
* ``K = T^-1 A2`` and the Neumann series ``u = (1 + K + K^2 + ...) J f``.

The adjoint solve is a pure relabeling ``theta -> -theta`` on the
antipodally closed angular grid, with the kernel matrix permuted
accordingly; under the incoming/outgoing symmetry this makes the discrete
scattering operator exactly self-adjoint in the weighted pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _march
from .coefficients import validate
from .errors import ContractError, NonContractionError
from .fields import BoundaryField, RadianceField, pack_scalar_field
from .geometry import Ball, Box

DEFAULT_STEP_DIVISOR = 256


@dataclass(frozen=True)
class SolverOptions:
    """Neumann-series controls; ``ray_step`` defaults to diameter/256."""

    tol: float = 1e-8
    max_terms: int = 200
    ray_step: float | None = None


@dataclass
class SolveResult:
    """Converged radiance field plus the term-norm history."""

    field: RadianceField
    term_norms: list
    converged: bool

    @property
    def ratios(self):
        return [b / a for a, b in zip(self.term_norms, self.term_norms[1:]) if a > 0]

    @property
    def observed_contraction(self):
        r = self.ratios
        return max(r) if r else 0.0


@dataclass(frozen=True)
class OutgoingSamples:
    """Product samples (boundary node, outgoing direction) on the outflow boundary."""

    points: np.ndarray
    theta_idx: np.ndarray
    normals: np.ndarray
    area: np.ndarray
    mu: np.ndarray

    @property
    def count(self):
        return self.points.shape[0]

    def quadrature_weights(self, agrid):
        """Weights for integrals over the outflow boundary with measure dS dtheta."""
        return self.area * agrid.weights[self.theta_idx]


def outgoing_samples(bgrid, agrid, side=+1):
    """Enumerate boundary-node x direction pairs with sign(theta . nu) = side."""
    mu_all = bgrid.normals @ agrid.nodes.T
    keep = mu_all > 1e-12 if side > 0 else mu_all < -1e-12
    node_idx, dir_idx = np.nonzero(keep)
    return OutgoingSamples(points=bgrid.points[node_idx],
                           theta_idx=dir_idx.astype(np.int64),
                           normals=bgrid.normals[node_idx],
                           area=bgrid.weights[node_idx],
                           mu=mu_all[node_idx, dir_idx])


class TransportOperator:
    """Bundles a validated phantom with grids and caches ray geometry.

    All public operations are pure; the object only memoizes geometry
    (per-direction chord lengths) and the packed coefficient parameters.
    """

    def __init__(self, phantom, domain, sgrid, agrid, options=None,
                 check_phantom=True):
        if sgrid.dimension != domain.dimension or agrid.dimension != domain.dimension:
            raise ContractError("domain and grid dimensions disagree")
        lo, hi = domain.bounding_box()
        if not (np.allclose(lo, sgrid.lo_arr) and np.allclose(hi, sgrid.hi_arr)):
            raise ContractError("spatial grid must cover the domain bounding box")
        self.phantom = phantom
        self.domain = domain
        self.sgrid = sgrid
        self.agrid = agrid
        self.options = options or SolverOptions()
        if check_phantom:
            self.validation = validate(phantom, agrid, sgrid)
        else:
            self.validation = None
        self.nodes = sgrid.nodes()
        self._box = Box(tuple(lo), tuple(hi))
        self._pack = pack_scalar_field(phantom.sigma, sgrid)
        self._kappa = phantom.kernel.amplitude().values_on(self.nodes)
        matrix = phantom.kernel.angular_matrix(agrid)
        self._matrix = matrix
        self._mw = np.ascontiguousarray(matrix * agrid.weights[None, :])
        anti = agrid.antipodal
        madj = matrix[np.ix_(anti, anti)]
        self._mw_adj = np.ascontiguousarray(madj * agrid.weights[None, :])
        self._tmax_bwd = {}

    # -- geometry ---------------------------------------------------------

    @property
    def step(self):
        if self.options.ray_step is not None:
            return self.options.ray_step
        return self.domain.diameter / DEFAULT_STEP_DIVISOR

    def _grid_tmax(self, j):
        """Backward chord length (along -theta_j) from every grid node."""
        t = self._tmax_bwd.get(j)
        if t is None:
            t = self._box.exit_distances(self.nodes, -self.agrid.nodes[j])
            self._tmax_bwd[j] = t
        return t

    def _entry_data(self, points, j):
        """Entry point and transmission chord for the ballistic operator."""
        theta = self.agrid.nodes[j]
        tmax = self._box.exit_distances(points, -theta)
        if isinstance(self.domain, Ball):
            dist, hit = self.domain.entry_backward(points, theta)
            entry = points - dist[:, None] * theta[None, :]
            return tmax, entry, hit
        entry = points - tmax[:, None] * theta[None, :]
        return tmax, entry, np.ones(points.shape[0], dtype=bool)

    # -- elementary operators ----------------------------------------------

    def scatter_values(self, values, adjoint=False):
        """A2: angular quadrature of the kernel against a nodal field."""
        mw = self._mw_adj if adjoint else self._mw
        return (values @ mw.T) * self._kappa[:, None]

    def scatter(self, w: RadianceField):
        return RadianceField(self.sgrid, self.agrid, self.scatter_values(w.values))

    def _lift_direction_real(self, points, j, src_grid, tmax):
        theta = self.agrid.nodes[j]
        return _march.lift_direction(points, -theta, tmax, self.step,
                                     self._pack, src_grid)

    def lift_values(self, values):
        """T^-1 applied to a nodal interior source, on the grid."""
        shape = self.sgrid.shape
        out = np.empty_like(values, dtype=values.dtype)
        for j in range(self.agrid.count):
            tmax = self._grid_tmax(j)
            col = values[:, j]
            if np.iscomplexobj(values):
                re = self._lift_direction_real(self.nodes, j,
                                               np.ascontiguousarray(col.real.reshape(shape)), tmax)
                im = self._lift_direction_real(self.nodes, j,
                                               np.ascontiguousarray(col.imag.reshape(shape)), tmax)
                out[:, j] = re + 1j * im
            else:
                out[:, j] = self._lift_direction_real(
                    self.nodes, j, np.ascontiguousarray(col.reshape(shape)), tmax)
        return out

    def lift(self, source: RadianceField):
        if not np.all(np.isfinite(source.values)):
            raise ContractError("interior source must be finite")
        return RadianceField(self.sgrid, self.agrid, self.lift_values(source.values))

    def k_apply_values(self, values):
        return self.lift_values(self.scatter_values(values))

    def k_apply(self, w: RadianceField):
        return RadianceField(self.sgrid, self.agrid, self.k_apply_values(w.values))

    # -- batched variants (trailing source axis) -----------------------------

    def scatter_values_multi(self, values):
        """A2 applied independently along a trailing source axis."""
        n_x, n_th, n_src = values.shape
        flat = values.transpose(0, 2, 1).reshape(n_x * n_src, n_th)
        out = (flat @ self._mw.T).reshape(n_x, n_src, n_th).transpose(0, 2, 1)
        return out * self._kappa[:, None, None]

    def lift_values_multi(self, values):
        """T^-1 applied independently along a trailing source axis."""
        n_x, n_th, n_src = values.shape
        shape = self.sgrid.shape + (n_src,)
        out = np.empty_like(values)
        for j in range(self.agrid.count):
            tmax = self._grid_tmax(j)
            src = np.ascontiguousarray(values[:, j, :].reshape(shape))
            theta = self.agrid.nodes[j]
            out[:, j, :] = _march.lift_direction_multi(
                self.nodes, -theta, tmax, self.step, self._pack, src)
        return out

    def solve_internal_multi(self, q_values, tol=None, max_terms=None):
        """Joint Neumann series for a batch of interior sources (real data).

        Stops when every column's term norm is below tolerance; returns the
        stacked solutions and the per-column term-norm histories.
        """
        tol = self.options.tol if tol is None else tol
        max_terms = self.options.max_terms if max_terms is None else max_terms
        b = self.lift_values_multi(np.ascontiguousarray(q_values))
        sup0 = np.max(np.abs(b), axis=(0, 1))
        norms = [sup0]
        total = b.copy()
        if np.all(sup0 == 0.0):
            return total, norms, True
        term = b
        floor = tol * np.maximum(sup0, 1e-300)
        for m in range(1, max_terms + 1):
            term = self.lift_values_multi(self.scatter_values_multi(term))
            n = np.max(np.abs(term), axis=(0, 1))
            total += term
            norms.append(n)
            if np.all(n < floor):
                return total, norms, True
            if m >= 2 and np.all(n >= norms[-2]) and np.all(norms[-2] >= norms[-3]):
                raise NonContractionError(
                    "batched Neumann series does not contract",
                    [float(np.max(v)) for v in norms])
        return total, norms, False

    def lift_at_multi(self, points, theta_idx, src_values):
        """Batched T^-1 at arbitrary (point, direction) pairs."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta_idx = np.asarray(theta_idx, dtype=np.int64)
        n_src = src_values.shape[2]
        shape = self.sgrid.shape + (n_src,)
        out = np.zeros((points.shape[0], n_src))
        for j, rows in self._group_by_direction(theta_idx):
            pts = np.ascontiguousarray(points[rows])
            theta = self.agrid.nodes[j]
            tmax = self._box.exit_distances(pts, -theta)
            src = np.ascontiguousarray(src_values[:, j, :].reshape(shape))
            out[rows] = _march.lift_direction_multi(pts, -theta, tmax,
                                                    self.step, self._pack, src)
        return out

    def ballistic_values(self, f: BoundaryField, points=None):
        """J f: attenuated boundary data along backward rays.

        When ``points`` is None the field is evaluated at all grid nodes.
        """
        if f.side != "incoming":
            raise ContractError("ballistic operator needs data on the inflow boundary")
        points = self.nodes if points is None else np.atleast_2d(points)
        n_pts = points.shape[0]
        probe = f.values(points[:1], np.zeros(1, dtype=np.int64), self.agrid)
        dtype = complex if np.iscomplexobj(probe) else float
        out = np.zeros((n_pts, self.agrid.count), dtype=dtype)
        use_cache = points is self.nodes
        for j in range(self.agrid.count):
            theta = self.agrid.nodes[j]
            if use_cache:
                tmax = self._grid_tmax(j)
            else:
                tmax = self._box.exit_distances(points, -theta)
            if isinstance(self.domain, Ball):
                dist, hit = self.domain.entry_backward(points, theta)
                entry = points - dist[:, None] * theta[None, :]
            else:
                entry = points - tmax[:, None] * theta[None, :]
                hit = None
            trans = _march.transmission_direction(points, -theta, tmax,
                                                  self.step, self._pack)
            fvals = f.values(entry, np.full(n_pts, j, dtype=np.int64), self.agrid)
            col = trans * fvals
            if hit is not None:
                col = np.where(hit, col, 0.0)
            out[:, j] = col
        return out

    def ballistic(self, f: BoundaryField):
        return RadianceField(self.sgrid, self.agrid, self.ballistic_values(f))

    # -- point evaluation ---------------------------------------------------

    def _group_by_direction(self, theta_idx):
        order = np.argsort(theta_idx, kind="stable")
        groups = []
        start = 0
        sorted_idx = theta_idx[order]
        while start < len(sorted_idx):
            j = sorted_idx[start]
            end = start
            while end < len(sorted_idx) and sorted_idx[end] == j:
                end += 1
            groups.append((int(j), order[start:end]))
            start = end
        return groups

    def lift_at(self, points, theta_idx, src_values):
        """T^-1 of a nodal source, evaluated at arbitrary (point, direction) pairs."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta_idx = np.asarray(theta_idx, dtype=np.int64)
        shape = self.sgrid.shape
        dtype = complex if np.iscomplexobj(src_values) else float
        out = np.zeros(points.shape[0], dtype=dtype)
        for j, rows in self._group_by_direction(theta_idx):
            pts = np.ascontiguousarray(points[rows])
            theta = self.agrid.nodes[j]
            tmax = self._box.exit_distances(pts, -theta)
            col = src_values[:, j]
            if dtype is complex:
                re = self._lift_direction_real(pts, j, np.ascontiguousarray(col.real.reshape(shape)), tmax)
                im = self._lift_direction_real(pts, j, np.ascontiguousarray(col.imag.reshape(shape)), tmax)
                out[rows] = re + 1j * im
            else:
                out[rows] = self._lift_direction_real(
                    pts, j, np.ascontiguousarray(col.reshape(shape)), tmax)
        return out

    def ballistic_at(self, points, theta_idx, f: BoundaryField):
        """J f at arbitrary (point, direction) pairs."""
        if f.side != "incoming":
            raise ContractError("ballistic operator needs data on the inflow boundary")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta_idx = np.asarray(theta_idx, dtype=np.int64)
        probe = f.values(points[:1], theta_idx[:1], self.agrid)
        dtype = complex if np.iscomplexobj(probe) else float
        out = np.zeros(points.shape[0], dtype=dtype)
        for j, rows in self._group_by_direction(theta_idx):
            pts = np.ascontiguousarray(points[rows])
            theta = self.agrid.nodes[j]
            tmax = self._box.exit_distances(pts, -theta)
            if isinstance(self.domain, Ball):
                dist, hit = self.domain.entry_backward(pts, theta)
                entry = pts - dist[:, None] * theta[None, :]
            else:
                entry = pts - tmax[:, None] * theta[None, :]
                hit = None
            trans = _march.transmission_direction(pts, -theta, tmax, self.step, self._pack)
            fvals = f.values(entry, np.full(len(rows), j, dtype=np.int64), self.agrid)
            col = trans * fvals
            if hit is not None:
                col = np.where(hit, col, 0.0)
            out[rows] = col
        return out

    def evaluate_at(self, points, theta_idx, u_values=None, f=None, q_values=None,
                    adjoint_kernel=False):
        """Evaluate ``J f + T^-1 (A2 u + q)`` at arbitrary phase-space points.

        With a converged solution ``u`` this reproduces the solution itself
        (the fixed point of the collision expansion), so it serves as the
        trace operator on boundary samples.
        """
        src = None
        if u_values is not None:
            src = self.scatter_values(u_values, adjoint=adjoint_kernel)
        if q_values is not None:
            src = q_values if src is None else src + q_values
        total = None
        if f is not None:
            total = self.ballistic_at(points, theta_idx, f)
        if src is not None:
            lifted = self.lift_at(points, theta_idx, src)
            total = lifted if total is None else total + lifted
        if total is None:
            total = np.zeros(np.atleast_2d(points).shape[0])
        return total

    # -- Neumann series ------------------------------------------------------

    def _neumann(self, b_values, tol, max_terms, adjoint_kernel=False):
        sup0 = float(np.max(np.abs(b_values))) if b_values.size else 0.0
        norms = [sup0]
        total = b_values.copy()
        if sup0 == 0.0:
            return total, norms, True
        term = b_values
        bad_ratio_streak = 0
        for m in range(1, max_terms + 1):
            term = self.lift_values(self.scatter_values(term, adjoint=adjoint_kernel))
            n = float(np.max(np.abs(term)))
            total += term
            prev = norms[-1]
            norms.append(n)
            if n < tol * sup0:
                return total, norms, True
            if prev > 0 and n >= prev:
                bad_ratio_streak += 1
                if bad_ratio_streak >= 2:
                    raise NonContractionError(
                        "Neumann term ratios reached 1; the discrete series does "
                        "not contract (invalid phantom or discretization)", norms)
            else:
                bad_ratio_streak = 0
        return total, norms, False

    def solve(self, f: BoundaryField, tol=None, max_terms=None):
        """Collision expansion for inflow boundary data."""
        tol = self.options.tol if tol is None else tol
        max_terms = self.options.max_terms if max_terms is None else max_terms
        b = self.ballistic_values(f)
        total, norms, ok = self._neumann(b, tol, max_terms)
        return SolveResult(RadianceField(self.sgrid, self.agrid, total), norms, ok)

    def solve_internal(self, q_values, tol=None, max_terms=None):
        """Collision expansion for an interior source with zero inflow."""
        tol = self.options.tol if tol is None else tol
        max_terms = self.options.max_terms if max_terms is None else max_terms
        b = self.lift_values(np.ascontiguousarray(q_values))
        total, norms, ok = self._neumann(b, tol, max_terms)
        return SolveResult(RadianceField(self.sgrid, self.agrid, total), norms, ok)

    def solve_adjoint(self, g: BoundaryField, tol=None, max_terms=None):
        """Adjoint solve by the antipodal relabeling.

        ``v(x, theta) = u~(x, -theta)`` where ``u~`` solves the forward
        equation with boundary data ``g(x, -theta)`` and the kernel matrix
        permuted by the antipodal map on both slots.
        """
        if g.side != "outgoing":
            raise ContractError("adjoint solve needs data on the outflow boundary")
        tol = self.options.tol if tol is None else tol
        max_terms = self.options.max_terms if max_terms is None else max_terms
        f_rel = g.flipped()
        b = self.ballistic_values(f_rel)
        total, norms, ok = self._neumann(b, tol, max_terms, adjoint_kernel=True)
        anti = self.agrid.antipodal
        v = np.ascontiguousarray(total[:, anti])
        return SolveResult(RadianceField(self.sgrid, self.agrid, v), norms, ok)

    def adjoint_relabeled_forward(self, g: BoundaryField, tol=None, max_terms=None):
        """The forward solve underlying :meth:`solve_adjoint` (for tests)."""
        if g.side != "outgoing":
            raise ContractError("adjoint solve needs data on the outflow boundary")
        tol = self.options.tol if tol is None else tol
        max_terms = self.options.max_terms if max_terms is None else max_terms
        b = self.ballistic_values(g.flipped())
        total, norms, ok = self._neumann(b, tol, max_terms, adjoint_kernel=True)
        return SolveResult(RadianceField(self.sgrid, self.agrid, total), norms, ok)

    # -- traces and measurements ---------------------------------------------

    def trace(self, samples: OutgoingSamples, u: RadianceField | None = None,
              f: BoundaryField | None = None, q_values=None):
        """Solution values at outflow samples via the fixed-point identity."""
        u_values = None if u is None else u.values
        return self.evaluate_at(samples.points, samples.theta_idx,
                                u_values=u_values, f=f, q_values=q_values)

    def albedo_00(self, f: BoundaryField, samples: OutgoingSamples,
                  tol=None, max_terms=None):
        """Outflow trace of the source-frequency solution."""
        sol = self.solve(f, tol=tol, max_terms=max_terms)
        return self.trace(samples, u=sol.field, f=f), sol

    def fixed_point_residual(self, sol: SolveResult, f=None, q_values=None):
        """Sup norm of ``u - (J f + K u + T^-1 q)`` over the grid."""
        u = sol.field.values
        rhs = self.lift_values(self.scatter_values(u))
        if f is not None:
            rhs = rhs + self.ballistic_values(f)
        if q_values is not None:
            rhs = rhs + self.lift_values(np.ascontiguousarray(q_values))
        return float(np.max(np.abs(u - rhs)))


def pairing(agrid, sgrid, u_values, v_values):
    """Discrete duality pairing over phase space: sum of u v w_theta dV."""
    cell = sgrid.cell_volume()
    return cell * np.sum((u_values * v_values) @ agrid.weights)


def directional_derivative(values, sgrid, theta, delta):
    """Centered finite-difference directional derivative on interior nodes.

    ``values`` is a flat nodal field; returns (interior mask, derivative).
    """
    nodes = sgrid.nodes()
    theta = np.asarray(theta, dtype=float)
    lo, hi = sgrid.lo_arr, sgrid.lo_arr + (np.asarray(sgrid.counts) - 1) * sgrid.spacing_arr
    fwd = nodes + delta * theta
    bwd = nodes - delta * theta
    ok = np.all((fwd >= lo) & (fwd <= hi) & (bwd >= lo) & (bwd <= hi), axis=1)
    from .geometry import interpolate
    dv = (interpolate(sgrid, values, fwd[ok]) - interpolate(sgrid, values, bwd[ok])) / (2 * delta)
    return ok, dv
