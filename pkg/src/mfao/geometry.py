"""Convex domains, quadrature grids, ray projections and optical distance.

Two domain shapes are supported: an axis-aligned box and a ball.  Both are
convex, so a ray from any interior point meets the boundary in exactly one
point per direction.  The box is the workhorse for solver tests because its
boundary projections are exact in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

GEOM_TOL = 1e-10


def _as_point(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape != (dim,):
        raise DomainError(f"expected a point of dimension {dim}, got shape {x.shape}")
    return x


def _unit(theta, dim):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (dim,):
        raise DomainError(f"expected a direction of dimension {dim}")
    norm = float(np.linalg.norm(theta))
    if abs(norm - 1.0) > 1e-8:
        raise DomainError(f"direction must be a unit vector, |theta| = {norm}")
    return theta / norm


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its lower and upper corners."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size not in (2, 3):
            raise DomainError("box corners must be 2- or 3-vectors")
        if np.any(hi <= lo):
            raise DomainError("box must have positive extent on every axis")
        object.__setattr__(self, "lo", tuple(map(float, lo)))
        object.__setattr__(self, "hi", tuple(map(float, hi)))

    @property
    def dimension(self):
        return len(self.lo)

    @property
    def lo_arr(self):
        return np.asarray(self.lo)

    @property
    def hi_arr(self):
        return np.asarray(self.hi)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi_arr - self.lo_arr))

    def bounding_box(self):
        return self.lo_arr.copy(), self.hi_arr.copy()

    def contains(self, points, tol=GEOM_TOL):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((points >= self.lo_arr - tol) & (points <= self.hi_arr + tol), axis=1)

    def exit_distances(self, points, theta):
        """Distance from each point to the boundary along +theta.

        Points must lie in the closed box; movement along an axis with zero
        direction component never exits through that axis's faces.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta = np.asarray(theta, dtype=float)
        t = np.full(points.shape[0], np.inf)
        for a in range(points.shape[1]):
            d = theta[a]
            if d > GEOM_TOL:
                t = np.minimum(t, (self.hi[a] - points[:, a]) / d)
            elif d < -GEOM_TOL:
                t = np.minimum(t, (self.lo[a] - points[:, a]) / d)
        return np.maximum(t, 0.0)

    def boundary_normal(self, point):
        """Outward unit normal of the face nearest to ``point``."""
        point = _as_point(point, self.dimension)
        d_lo = point - self.lo_arr
        d_hi = self.hi_arr - point
        axis_lo = int(np.argmin(d_lo))
        axis_hi = int(np.argmin(d_hi))
        nu = np.zeros(self.dimension)
        if d_lo[axis_lo] <= d_hi[axis_hi]:
            nu[axis_lo] = -1.0
        else:
            nu[axis_hi] = 1.0
        return nu

    def boundary_residual(self, point):
        """Distance from ``point`` to the boundary surface (0 when on it)."""
        point = np.asarray(point, dtype=float)
        inside = np.minimum(point - self.lo_arr, self.hi_arr - point)
        if np.any(inside < 0):
            return float(np.linalg.norm(np.maximum(self.lo_arr - point, 0)
                                        + np.maximum(point - self.hi_arr, 0)))
        return float(np.min(inside))


@dataclass(frozen=True)
class Ball:
    """Ball with a center and radius."""

    center: tuple
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.ndim != 1 or c.size not in (2, 3):
            raise DomainError("ball center must be a 2- or 3-vector")
        if self.radius <= 0:
            raise DomainError("ball radius must be positive")
        object.__setattr__(self, "center", tuple(map(float, c)))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dimension(self):
        return len(self.center)

    @property
    def center_arr(self):
        return np.asarray(self.center)

    @property
    def diameter(self):
        return 2.0 * self.radius

    def bounding_box(self):
        c = self.center_arr
        return c - self.radius, c + self.radius

    def contains(self, points, tol=GEOM_TOL):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(points - self.center_arr, axis=1)
        return r <= self.radius + tol

    def exit_distances(self, points, theta):
        """Distance to the sphere along +theta from points inside the ball."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta = np.asarray(theta, dtype=float)
        rel = points - self.center_arr
        b = rel @ theta
        c0 = np.einsum("ij,ij->i", rel, rel) - self.radius**2
        disc = np.maximum(b * b - c0, 0.0)
        return np.maximum(-b + np.sqrt(disc), 0.0)

    def entry_backward(self, points, theta):
        """First sphere crossing when traveling from each point along -theta.

        Works for points inside or outside the ball (the latter occur on
        bounding-box grids).  Returns ``(distance, hit)``; distance is 0 where
        the backward ray misses the ball.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        theta = np.asarray(theta, dtype=float)
        rel = points - self.center_arr
        b = rel @ (-theta)
        c0 = np.einsum("ij,ij->i", rel, rel) - self.radius**2
        disc = b * b - c0
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        inside = c0 <= GEOM_TOL * max(self.radius, 1.0)
        t = np.where(inside, -b + sq, -b - sq)
        hit = hit & (t >= -GEOM_TOL)
        return np.where(hit, np.maximum(t, 0.0), 0.0), hit

    def boundary_normal(self, point):
        point = _as_point(point, self.dimension)
        rel = point - self.center_arr
        r = np.linalg.norm(rel)
        if r < GEOM_TOL:
            raise DomainError("normal undefined at the ball center")
        return rel / r

    def boundary_residual(self, point):
        point = np.asarray(point, dtype=float)
        return float(abs(np.linalg.norm(point - self.center_arr) - self.radius))


def gamma(domain, x, theta, sign):
    """Project ``x`` onto the boundary by traveling in direction ``sign*theta``.

    ``sign`` is +1 for the forward exit point and -1 for the backward entry
    point.  Raises :class:`DomainError` when ``x`` lies outside the domain.
    """
    x = _as_point(x, domain.dimension)
    theta = _unit(theta, domain.dimension)
    if not bool(domain.contains(x[None, :])[0]):
        raise DomainError(f"point {x} lies outside the domain")
    if sign not in (+1, -1):
        raise DomainError("sign must be +1 or -1")
    d = sign * theta
    t = float(domain.exit_distances(x[None, :], d)[0])
    return x + t * d


@dataclass(frozen=True)
class RayTrace:
    """Chord of the domain through ``x`` in direction ``theta``."""

    entry: np.ndarray
    exit: np.ndarray
    chord: float
    degenerate: bool


def ray_trace(domain, x, theta):
    """Entry point, exit point and chord length of the ray through ``x``.

    A tangential ray with chord below the geometric tolerance is flagged
    degenerate with zero chord.
    """
    p_minus = gamma(domain, x, theta, -1)
    p_plus = gamma(domain, x, theta, +1)
    chord = float(np.linalg.norm(p_plus - p_minus))
    scale = max(domain.diameter, 1.0)
    if chord < GEOM_TOL * scale:
        return RayTrace(p_minus, p_plus, 0.0, True)
    return RayTrace(p_minus, p_plus, chord, False)


def _eval_scalar(sigma, points):
    if hasattr(sigma, "values_on"):
        return np.asarray(sigma.values_on(points), dtype=float)
    return np.asarray(sigma(points), dtype=float)


def optical_distance(sigma, x, y, step):
    """Line integral of ``sigma`` along the segment from ``y`` to ``x``.

    Composite trapezoid rule with sub-step at most ``step``.  ``sigma`` is
    either a callable mapping an (m, n) array of points to m values, or any
    object with a ``values_on`` method (analytic fields are evaluated exactly
    at the quadrature points, gridded ones by multilinear interpolation).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if step <= 0:
        raise ValueError("step must be positive")
    length = float(np.linalg.norm(x - y))
    if length == 0.0:
        return 0.0
    m = max(1, int(np.ceil(length / step)))
    ts = np.linspace(0.0, 1.0, m + 1)
    pts = y[None, :] + ts[:, None] * (x - y)[None, :]
    vals = _eval_scalar(sigma, pts)
    return float(np.trapezoid(vals, dx=length / m))


@dataclass(frozen=True)
class AngularGrid:
    """Quadrature nodes on the unit circle or sphere.

    The node set is antipodally closed by construction: the second half of
    the array is the exact negation of the first half, so the antipodal
    permutation is ``i -> (i + N/2) mod N`` and is weight-preserving.  This
    is what lets the adjoint solve be a pure relabeling.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=float))
        weights = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        if nodes.ndim != 2 or nodes.shape[0] != weights.shape[0]:
            raise ValueError("nodes and weights shapes disagree")
        if nodes.shape[0] % 2 != 0:
            raise ValueError("node count must be even for antipodal closure")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self):
        return self.nodes.shape[0]

    @property
    def dimension(self):
        return self.nodes.shape[1]

    @property
    def antipodal(self):
        half = self.count // 2
        return (np.arange(self.count) + half) % self.count

    def sphere_measure(self):
        return 2.0 * np.pi if self.dimension == 2 else 4.0 * np.pi

    def nearest_node(self, direction):
        direction = _unit(direction, self.dimension)
        return int(np.argmax(self.nodes @ direction))

    def cap_indices(self, center, width):
        """Indices of nodes with chordal distance to ``center`` below ``width``."""
        center = _unit(center, self.dimension)
        dist = np.linalg.norm(self.nodes - center[None, :], axis=1)
        return np.nonzero(dist < width)[0]


def angular_grid_2d(count):
    """Uniform circle quadrature with an even number of angles."""
    if count % 2 != 0 or count < 4:
        raise ValueError("count must be even and at least 4")
    half = count // 2
    ang = 2.0 * np.pi * np.arange(half) / count
    top = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    nodes = np.concatenate([top, -top], axis=0)
    weights = np.full(count, 2.0 * np.pi / count)
    return AngularGrid(nodes, weights)


def angular_grid_3d(n_polar, n_azimuth):
    """Product quadrature: Gauss-Legendre in the polar cosine x uniform azimuth.

    ``n_polar`` must be even (no equatorial ring, exact +/- symmetry) and
    ``n_azimuth`` even, which makes the node set antipodally closed.
    """
    if n_polar % 2 != 0 or n_polar < 2:
        raise ValueError("n_polar must be even and at least 2")
    if n_azimuth % 2 != 0 or n_azimuth < 4:
        raise ValueError("n_azimuth must be even and at least 4")
    mu, wmu = np.polynomial.legendre.leggauss(n_polar)
    pos = mu > 0
    mu_half, w_half = mu[pos], wmu[pos]
    phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    rho = np.sqrt(1.0 - mu_half**2)
    nx = (rho[:, None] * np.cos(phi)[None, :]).ravel()
    ny = (rho[:, None] * np.sin(phi)[None, :]).ravel()
    nz = np.repeat(mu_half, n_azimuth)
    top = np.stack([nx, ny, nz], axis=1)
    w_top = np.repeat(w_half, n_azimuth) * (2.0 * np.pi / n_azimuth)
    nodes = np.concatenate([top, -top], axis=0)
    weights = np.concatenate([w_top, w_top])
    return AngularGrid(nodes, weights)


def angular_grid(dimension, count=None, n_polar=None, n_azimuth=None):
    """Build the default angular quadrature for the given dimension."""
    if dimension == 2:
        return angular_grid_2d(count if count is not None else 32)
    if dimension == 3:
        return angular_grid_3d(n_polar if n_polar is not None else 8,
                               n_azimuth if n_azimuth is not None else 16)
    raise ValueError("dimension must be 2 or 3")


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform vertex-centered grid covering a domain's bounding box."""

    lo: tuple
    hi: tuple
    counts: tuple

    def __post_init__(self):
        lo = tuple(map(float, np.asarray(self.lo, dtype=float)))
        hi = tuple(map(float, np.asarray(self.hi, dtype=float)))
        counts = tuple(map(int, np.asarray(self.counts)))
        if len(lo) != len(hi) or len(lo) != len(counts):
            raise ValueError("grid extents and counts disagree in dimension")
        if any(c < 2 for c in counts):
            raise ValueError("need at least 2 nodes per axis")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("grid extent must be positive on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def for_domain(cls, domain, counts):
        lo, hi = domain.bounding_box()
        counts = (counts,) * domain.dimension if np.isscalar(counts) else tuple(counts)
        return cls(tuple(lo), tuple(hi), counts)

    @property
    def dimension(self):
        return len(self.counts)

    @property
    def shape(self):
        return self.counts

    @property
    def size(self):
        return int(np.prod(self.counts))

    @property
    def spacing(self):
        return tuple((h - l) / (c - 1) for l, h, c in zip(self.lo, self.hi, self.counts))

    @property
    def lo_arr(self):
        return np.asarray(self.lo)

    @property
    def hi_arr(self):
        return np.asarray(self.hi)

    @property
    def spacing_arr(self):
        return np.asarray(self.spacing)

    def axes(self):
        return [np.linspace(l, h, c) for l, h, c in zip(self.lo, self.hi, self.counts)]

    def nodes(self):
        """All grid nodes as an (size, dimension) array, axis-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.ascontiguousarray(np.stack([m.ravel() for m in mesh], axis=1))

    def interior_mask(self, margin_nodes):
        """Flat mask of nodes at least ``margin_nodes`` layers from the box edge."""
        mask = np.ones(self.counts, dtype=bool)
        for a, c in enumerate(self.counts):
            idx = np.arange(c)
            keep = (idx >= margin_nodes) & (idx <= c - 1 - margin_nodes)
            shape = [1] * self.dimension
            shape[a] = c
            mask &= keep.reshape(shape)
        return mask.ravel()

    def cell_volume(self):
        return float(np.prod(self.spacing_arr))

    def quadrature_weights(self):
        """Composite-trapezoid volume weights for nodal integrands (flat)."""
        w = np.ones(self.counts)
        for a, c in enumerate(self.counts):
            factor = np.ones(c)
            factor[0] = factor[-1] = 0.5
            shape = [1] * self.dimension
            shape[a] = c
            w = w * factor.reshape(shape)
        return w.ravel() * self.cell_volume()


def interpolate(grid, values, points):
    """Multilinear interpolation of nodal ``values`` at ``points``.

    ``values`` has the grid shape (or flat grid size) and may carry trailing
    axes; points outside the box are clamped onto it.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.asarray(values)
    trailing = vals.shape[1:] if vals.shape[0] == grid.size and vals.ndim > 1 else ()
    if vals.shape[0] == grid.size:
        vals = vals.reshape(grid.shape + trailing)
    n = grid.dimension
    frac = (points - grid.lo_arr) / grid.spacing_arr
    idx = np.floor(frac).astype(np.int64)
    for a in range(n):
        np.clip(idx[:, a], 0, grid.counts[a] - 2, out=idx[:, a])
    w = frac - idx
    np.clip(w, 0.0, 1.0, out=w)
    out = 0.0
    for corner in range(1 << n):
        offs = [(corner >> a) & 1 for a in range(n)]
        weight = np.ones(points.shape[0])
        for a in range(n):
            weight = weight * (w[:, a] if offs[a] else (1.0 - w[:, a]))
        gather = vals[tuple(idx[:, a] + offs[a] for a in range(n))]
        if trailing:
            weight = weight.reshape((-1,) + (1,) * len(trailing))
        out = out + weight * gather
    return out


@dataclass(frozen=True)
class BoundarySample:
    """A boundary point paired with a direction and its inflow/outflow sign."""

    point: np.ndarray
    direction: np.ndarray
    normal: np.ndarray

    @property
    def sign(self):
        return float(np.dot(self.direction, self.normal))

    @property
    def incoming(self):
        return self.sign < 0


@dataclass(frozen=True)
class BoundaryGrid:
    """Quadrature nodes on the domain boundary with area weights and normals."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    patch: np.ndarray

    @property
    def count(self):
        return self.points.shape[0]

    def min_spacing(self):
        """Approximate linear spacing of the sampling (for aliasing guards)."""
        dim = self.points.shape[1]
        total = float(np.sum(self.weights))
        per_node = total / self.count
        return per_node if dim == 2 else float(np.sqrt(per_node))


def boundary_grid(domain, per_axis):
    """Cell-centered boundary quadrature.

    For a box, each face carries a uniform (n-1)-dimensional grid of
    ``per_axis`` cells per axis.  For a ball, a uniform angular
    parameterization with exact per-cell areas.
    """
    if isinstance(domain, Box):
        return _box_boundary(domain, per_axis)
    if isinstance(domain, Ball):
        return _ball_boundary(domain, per_axis)
    raise DomainError(f"unsupported domain type {type(domain)!r}")


def _box_boundary(box, per_axis):
    n = box.dimension
    pts, nrm, wts, pid = [], [], [], []
    patch = 0
    for axis in range(n):
        others = [a for a in range(n) if a != axis]
        centers = [box.lo[a] + (np.arange(per_axis) + 0.5) * (box.hi[a] - box.lo[a]) / per_axis
                   for a in others]
        area = np.prod([(box.hi[a] - box.lo[a]) / per_axis for a in others])
        mesh = np.meshgrid(*centers, indexing="ij") if centers else []
        flat = [m.ravel() for m in mesh]
        m = flat[0].size if flat else 1
        for side, coord in ((-1.0, box.lo[axis]), (+1.0, box.hi[axis])):
            p = np.empty((m, n))
            p[:, axis] = coord
            for a, vals in zip(others, flat):
                p[:, a] = vals
            normal = np.zeros(n)
            normal[axis] = side
            pts.append(p)
            nrm.append(np.tile(normal, (m, 1)))
            wts.append(np.full(m, area))
            pid.append(np.full(m, patch, dtype=np.int64))
            patch += 1
    return BoundaryGrid(np.concatenate(pts), np.concatenate(nrm),
                        np.concatenate(wts), np.concatenate(pid))


def _ball_boundary(ball, per_axis):
    c, r = ball.center_arr, ball.radius
    if ball.dimension == 2:
        m = 4 * per_axis
        phi = (np.arange(m) + 0.5) * 2.0 * np.pi / m
        normals = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        pts = c[None, :] + r * normals
        wts = np.full(m, 2.0 * np.pi * r / m)
        return BoundaryGrid(pts, normals, wts, np.zeros(m, dtype=np.int64))
    nb, na = per_axis, 2 * per_axis
    edges = np.linspace(0.0, np.pi, nb + 1)
    psi = 0.5 * (edges[:-1] + edges[1:])
    band_area = r * r * (np.cos(edges[:-1]) - np.cos(edges[1:])) * (2.0 * np.pi / na)
    lam = (np.arange(na) + 0.5) * 2.0 * np.pi / na
    sin_psi, cos_psi = np.sin(psi), np.cos(psi)
    nx = (sin_psi[:, None] * np.cos(lam)[None, :]).ravel()
    ny = (sin_psi[:, None] * np.sin(lam)[None, :]).ravel()
    nz = np.repeat(cos_psi, na)
    normals = np.stack([nx, ny, nz], axis=1)
    pts = c[None, :] + r * normals
    wts = np.repeat(band_area, na)
    return BoundaryGrid(pts, normals, wts, np.zeros(pts.shape[0], dtype=np.int64))
