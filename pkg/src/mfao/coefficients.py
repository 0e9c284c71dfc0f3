"""Optical coefficient pairs: absorption, scattering kernels, phantom library.

The scattering kernel defaults to the separable symmetric form
``k(x, theta, theta') = kappa(x) * p(theta . theta')`` with the phase
function normalized to unit mass over the sphere (or circle), so the total
scattering rate equals ``kappa`` and the subcriticality margin reads simply
``sigma - kappa``.  Fully tabulated angular kernels are accepted as well but
must pass the incoming/outgoing symmetry check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError
from .fields import ConstantField, ParametricField, ScalarField
from .geometry import AngularGrid, Ball, Box

ISOTROPY_TOL = 1e-12


def _sphere_measure(dim):
    return 2.0 * np.pi if dim == 2 else 4.0 * np.pi


class PhaseFunction:
    """Even phase function of the scattering cosine, unit mass on the sphere."""

    dimension = None

    def __call__(self, cosines):
        raise NotImplementedError

    def matrix(self, agrid: AngularGrid):
        """Nodal kernel matrix ``P[i, j] = p(theta_i . theta_j)``."""
        cos = np.clip(agrid.nodes @ agrid.nodes.T, -1.0, 1.0)
        return self(cos)


@dataclass(frozen=True)
class IsotropicPhase(PhaseFunction):
    dimension: int = 3

    def __call__(self, cosines):
        return np.full_like(np.asarray(cosines, dtype=float),
                            1.0 / _sphere_measure(self.dimension))


@dataclass(frozen=True)
class HenyeyGreenstein(PhaseFunction):
    """Standard Henyey-Greenstein phase function with asymmetry ``g``."""

    g: float
    dimension: int = 3

    def __post_init__(self):
        if not -1.0 < self.g < 1.0:
            raise ContractError("asymmetry parameter must lie in (-1, 1)")

    def __call__(self, cosines):
        t = np.asarray(cosines, dtype=float)
        g = self.g
        if self.dimension == 2:
            return (1.0 - g * g) / (2.0 * np.pi * (1.0 + g * g - 2.0 * g * t))
        return (1.0 - g * g) / (4.0 * np.pi * (1.0 + g * g - 2.0 * g * t) ** 1.5)


@dataclass(frozen=True)
class NormalizedPhase(PhaseFunction):
    """Wraps a raw even function of the cosine, normalized numerically."""

    raw: object
    dimension: int = 3
    _scale: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.dimension == 2:
            ang = np.linspace(0.0, 2.0 * np.pi, 4097)[:-1]
            mass = float(np.mean(self.raw(np.cos(ang)))) * 2.0 * np.pi
        else:
            t, w = np.polynomial.legendre.leggauss(256)
            mass = 2.0 * np.pi * float(np.sum(w * self.raw(t)))
        if mass <= 0:
            raise ContractError("phase function must have positive mass")
        object.__setattr__(self, "_scale", 1.0 / mass)

    def __call__(self, cosines):
        return self._scale * np.asarray(self.raw(np.asarray(cosines, dtype=float)))


@dataclass(frozen=True)
class SeparableKernel:
    """``k(x, theta, theta') = kappa(x) p(theta . theta')``.

    Automatically satisfies the incoming/outgoing symmetry because
    ``(-theta') . (-theta) = theta . theta'``.
    """

    kappa: ScalarField
    phase: PhaseFunction

    def angular_matrix(self, agrid):
        return self.phase.matrix(agrid)

    def amplitude(self):
        return self.kappa

    def eval(self, points, theta, theta_prime):
        cos = np.clip(float(np.dot(theta, theta_prime)), -1.0, 1.0)
        return self.kappa.values_on(points) * self.phase(np.asarray(cos))


@dataclass(frozen=True)
class TabulatedKernel:
    """Angular table on a specific quadrature times a spatial amplitude."""

    kappa: ScalarField
    table: np.ndarray
    agrid: AngularGrid

    def __post_init__(self):
        table = np.ascontiguousarray(np.asarray(self.table, dtype=float))
        if table.shape != (self.agrid.count, self.agrid.count):
            raise ContractError("kernel table shape must match the angular grid")
        object.__setattr__(self, "table", table)

    def angular_matrix(self, agrid):
        if agrid.count != self.agrid.count:
            raise ContractError("tabulated kernel bound to a different angular grid")
        return self.table

    def amplitude(self):
        return self.kappa


def isotropy_defect(matrix, agrid):
    """Worst violation of ``k(theta_i, theta_j) = k(-theta_j, -theta_i)``."""
    anti = agrid.antipodal
    mirrored = matrix[np.ix_(anti, anti)].T
    return float(np.max(np.abs(matrix - mirrored))) if matrix.size else 0.0


@dataclass(frozen=True)
class Phantom:
    """The coefficient pair (absorption field, scattering kernel)."""

    sigma: ScalarField
    kernel: object
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def scattering_eval(self, points, theta, theta_prime):
        """Pointwise kernel values; used by ground-truth comparisons."""
        kappa = self.kernel.amplitude().values_on(points)
        if isinstance(self.kernel, SeparableKernel):
            cos = np.clip(np.dot(theta, theta_prime), -1.0, 1.0)
            return kappa * self.kernel.phase(np.asarray(cos))
        table = self.kernel.table
        agrid = self.kernel.agrid
        i = agrid.nearest_node(theta)
        j = agrid.nearest_node(theta_prime)
        return kappa * table[i, j]


@dataclass(frozen=True)
class UltrasoundProbe:
    """Plane ultrasound modulation ``cos(Q . x + phase)`` with couplings a, b."""

    Q: tuple
    phase: float = 0.0
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 1 or Q.size not in (2, 3):
            raise ContractError("Q must be a 2- or 3-vector")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ContractError("coupling amplitudes must be finite")
        object.__setattr__(self, "Q", tuple(map(float, Q)))

    @property
    def Q_arr(self):
        return np.asarray(self.Q)

    def check_nyquist(self, sgrid):
        limit = np.pi / np.min(sgrid.spacing_arr)
        if np.max(np.abs(self.Q_arr)) > limit * (1 + 1e-12):
            raise ContractError(
                f"|Q| exceeds the grid Nyquist limit {limit:.3g}")

    def modulation(self, points):
        return np.cos(points @ self.Q_arr + self.phase)


@dataclass
class ValidationReport:
    min_sigma: float
    min_kernel: float
    min_margin: float
    max_isotropy_defect: float
    worst_margin_point: tuple
    ok: bool
    messages: list

    def __str__(self):
        state = "PASS" if self.ok else "FAIL"
        return (f"[{state}] min sigma={self.min_sigma:.4g} min k={self.min_kernel:.4g} "
                f"margin={self.min_margin:.4g} isotropy defect={self.max_isotropy_defect:.3g}")


def validate(phantom, agrid, sgrid, raise_on_violation=True):
    """Check nonnegativity, subcriticality and kernel symmetry on the grids.

    The total scattering rate ``rho(x)`` is computed by angular quadrature at
    every spatial node.  On violation a :class:`ValidationError` names the
    failed condition and the worst offending point.
    """
    nodes = sgrid.nodes()
    sig = phantom.sigma.values_on(nodes)
    kappa = phantom.kernel.amplitude().values_on(nodes)
    matrix = phantom.kernel.angular_matrix(agrid)

    messages = []
    min_sigma = float(np.min(sig))
    min_kernel = float(np.min(kappa) * np.min(matrix))
    if min_sigma < 0:
        worst = tuple(nodes[int(np.argmin(sig))])
        err = ValidationError(f"sigma < 0 at {worst}", "regularity", worst)
        if raise_on_violation:
            raise err
        messages.append(str(err))
    if min_kernel < 0:
        worst = tuple(nodes[int(np.argmin(kappa))])
        err = ValidationError("kernel takes negative values", "regularity", worst)
        if raise_on_violation:
            raise err
        messages.append(str(err))

    # rho(x) = max over outgoing nodes of the quadrature of k over incoming nodes
    row_mass = np.max(matrix @ agrid.weights)
    rho = kappa * row_mass
    margin = sig - rho
    i_worst = int(np.argmin(margin))
    min_margin = float(margin[i_worst])
    worst_margin_point = tuple(nodes[i_worst])
    if min_margin <= 0:
        err = ValidationError(
            f"sigma - rho = {min_margin:.4g} <= 0 at {worst_margin_point}; "
            "scattering would generate light", "absorption", worst_margin_point)
        if raise_on_violation:
            raise err
        messages.append(str(err))

    defect = isotropy_defect(matrix, agrid)
    if defect > ISOTROPY_TOL:
        err = ValidationError(
            f"kernel symmetry defect {defect:.3g} exceeds {ISOTROPY_TOL}",
            "isotropicity")
        if raise_on_violation:
            raise err
        messages.append(str(err))

    ok = not messages and min_margin > 0
    return ValidationReport(min_sigma, min_kernel, min_margin, defect,
                            worst_margin_point, ok, messages)


def _default_phase(dim, g):
    return IsotropicPhase(dim) if g == 0.0 else HenyeyGreenstein(g, dim)


def phantom_library(name, dimension=2, support=None, **params):
    """Analytic phantoms: ``homogeneous``, ``gaussian-bumps``, ``two-inclusion``.

    ``support`` clips the coefficients to a ball (for ball domains).  All
    library phantoms pass :func:`validate` with margin at least 0.1 at the
    default parameters.
    """
    if name == "homogeneous":
        sigma0 = params.pop("sigma0", 2.0)
        kappa0 = params.pop("kappa0", 0.1)
        g = params.pop("g", 0.0)
        if support is None:
            sigma = ConstantField(sigma0)
            kappa = ConstantField(kappa0)
        else:
            sigma = ParametricField(sigma0, support=support)
            kappa = ParametricField(kappa0, support=support)
        kernel = SeparableKernel(kappa, _default_phase(dimension, g))
        return Phantom(sigma, kernel, "homogeneous",
                       {"sigma0": sigma0, "kappa0": kappa0, "g": g})

    if name == "gaussian-bumps":
        center = params.pop("center", (0.5,) * dimension)
        sigma_bg = params.pop("sigma_bg", 1.5)
        sigma_amp = params.pop("sigma_amp", 0.8)
        sigma_width = params.pop("sigma_width", 0.16)
        kappa_bg = params.pop("kappa_bg", 0.1)
        kappa_amp = params.pop("kappa_amp", 0.15)
        kappa_width = params.pop("kappa_width", 0.2)
        g = params.pop("g", 0.15)
        c = np.asarray(center, dtype=float)
        off = 0.18 * np.ones(dimension)
        sigma = ParametricField(sigma_bg,
                                gaussians=((tuple(c - off * 0.5), sigma_amp, sigma_width),),
                                support=support)
        kappa = ParametricField(kappa_bg,
                                gaussians=((tuple(c + off * 0.6), kappa_amp, kappa_width),),
                                support=support)
        kernel = SeparableKernel(kappa, _default_phase(dimension, g))
        return Phantom(sigma, kernel, "gaussian-bumps",
                       {"sigma_bg": sigma_bg, "sigma_amp": sigma_amp, "g": g})

    if name == "two-inclusion":
        sigma_bg = params.pop("sigma_bg", 1.6)
        incl_amp = params.pop("incl_amp", 0.7)
        kappa_bg = params.pop("kappa_bg", 0.12)
        kappa_amp = params.pop("kappa_amp", 0.12)
        g = params.pop("g", 0.1)
        c1 = (0.32,) * dimension
        c2 = (0.68,) * dimension
        sigma = ParametricField(sigma_bg,
                                inclusions=((c1, 0.14, 0.05, incl_amp),
                                            (c2, 0.12, 0.05, -0.5 * incl_amp)),
                                support=support)
        kappa = ParametricField(kappa_bg,
                                inclusions=((c2, 0.15, 0.06, kappa_amp),),
                                support=support)
        kernel = SeparableKernel(kappa, _default_phase(dimension, g))
        return Phantom(sigma, kernel, "two-inclusion",
                       {"sigma_bg": sigma_bg, "incl_amp": incl_amp, "g": g})

    raise ContractError(f"unknown phantom {name!r}; expected homogeneous, "
                        "gaussian-bumps or two-inclusion")


def default_domain(dimension=2):
    return Box((0.0,) * dimension, (1.0,) * dimension)


def default_support(domain):
    return domain if isinstance(domain, Ball) else None
