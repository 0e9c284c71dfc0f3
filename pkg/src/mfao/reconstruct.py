"""Constructive recovery of the absorption and scattering coefficients.

The attenuated scattering value along a two-leg broken ray is read off the
internal functional: directly (up to a mollification constant) for point
source/detector pairs, and through a directional difference quotient for the
oscillatory illuminations.  Log-differences of backscatter values plus the
ballistic transmission yield the optical depth along rays; differentiating
along the ray gives the absorption; re-exponentiating undoes the attenuation
and yields the kernel values.

The mollification constant of the discrete sources (the paper leaves the
distribution-size factor unspecified) is fixed by a reference scan: running
the identical design on a known homogeneous phantom and forming the ratio.
Optical-depth and absorption recovery are ratio-based and need no
calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import SeparableKernel
from .errors import (ContractError, DomainError, DynamicRangeError,
                     LogDomainError)
from .fields import ConstantField, GriddedField, ParametricField
from .functional import FunctionalField, H_oracle
from .geometry import gamma, interpolate, optical_distance
from .sources import (default_widths, make_oscillatory_source,
                      make_point_detector, make_point_source)
from .transport import TransportOperator

SEPARATION_FACTOR = 10.0
TAU_CAP = 60.0
F_FLOOR = 1e-300


@dataclass
class BrokenRayDatum:
    """One attenuated-scattering sample F(x, theta_in, theta_out)."""

    x: np.ndarray
    theta_in: np.ndarray
    theta_out: np.ndarray
    value: float
    s: float
    h: float
    est_err: float = 0.0
    valid: bool = True
    reason: str = ""

    def __post_init__(self):
        sep = float(np.linalg.norm(np.asarray(self.theta_in) - np.asarray(self.theta_out)))
        if sep < SEPARATION_FACTOR * self.h:
            raise ContractError(
                f"direction separation {sep:.3g} violates the margin "
                f"{SEPARATION_FACTOR} x h = {SEPARATION_FACTOR * self.h:.3g}")


def extract_F(h_field: FunctionalField, x, theta2, s):
    """Backward difference quotient of the functional along ``theta2``.

    Returns ``(value, est_err)`` where the error estimate is the second
    difference at step s/2 (a curvature scale for the quotient bias).
    Both evaluation points must lie inside the field's grid box.
    """
    x = np.asarray(x, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    grid = h_field.grid
    back = x - s * theta2
    half = x - 0.5 * s * theta2
    lo, hi = grid.lo_arr, grid.hi_arr
    tol = 1e-12 * max(1.0, float(np.max(hi - lo)))
    for p in (x, back):
        if np.any(p < lo - tol) or np.any(p > hi + tol):
            raise DomainError(f"evaluation point {tuple(p)} leaves the grid box")
    vals = h_field.at_points(np.stack([x, half, back]))
    vals = np.real(vals)
    value = float((vals[0] - vals[2]) / s)
    est = float(abs(vals[0] - 2.0 * vals[1] + vals[2]) / s)
    return value, est


def recover_tau(F_fwd, F_bwd, transmission):
    """Optical depth to the entry point from two backscatter values.

    With ``F_fwd = k exp(-2 tau_1)``, ``F_bwd = k exp(-2 tau_2)`` and the
    ballistic transmission ``exp(-(tau_1 + tau_2))``, the depth of the first
    leg is ``tau_1 = (log F_bwd - log F_fwd) / 4 - log(transmission) / 2``.
    Any common scale on the two F values cancels.
    """
    if F_fwd <= 0 or F_bwd <= 0 or transmission <= 0:
        raise LogDomainError(
            f"log-domain failure: F_fwd={F_fwd:.3g} F_bwd={F_bwd:.3g} "
            f"transmission={transmission:.3g} (under-resolved data)")
    return 0.25 * (np.log(F_bwd) - np.log(F_fwd)) - 0.5 * np.log(transmission)


def recover_sigma(ts, taus):
    """Differentiate sampled optical depth along a ray.

    Centered differences inside, one-sided at the ends; NaN depth samples
    poison only their difference stencils.
    """
    ts = np.asarray(ts, dtype=float)
    taus = np.asarray(taus, dtype=float)
    if ts.size < 3:
        raise ContractError("need at least 3 samples along the ray")
    out = np.full(ts.size, np.nan)
    ok = np.isfinite(taus)
    for j in range(ts.size):
        if j > 0 and j < ts.size - 1 and ok[j - 1] and ok[j + 1]:
            out[j] = (taus[j + 1] - taus[j - 1]) / (ts[j + 1] - ts[j - 1])
        elif j == 0 and ok[0] and ok[1]:
            out[j] = (taus[1] - taus[0]) / (ts[1] - ts[0])
        elif j == ts.size - 1 and ok[-1] and ok[-2]:
            out[j] = (taus[-1] - taus[-2]) / (ts[-1] - ts[-2])
    return out


def recover_k(F, tau_out, tau_in, cap=TAU_CAP):
    """Undo the two-leg attenuation: ``k = F exp(tau_out + tau_in)``."""
    total = tau_out + tau_in
    if total > cap:
        raise DynamicRangeError(
            f"attenuation legs sum to {total:.3g} > cap {cap}; "
            "dynamic range insufficient")
    return F * float(np.exp(total))


@dataclass
class KRecord:
    """A reconstructed kernel sample, written symmetrically."""

    x: tuple
    theta_out: tuple
    theta_in: tuple
    value: float
    true_value: float | None = None
    calibrated: bool = False
    mirrored: bool = False
    flags: str = ""

    def mirror(self):
        return KRecord(self.x, tuple(-t for t in self.theta_in),
                       tuple(-t for t in self.theta_out), self.value,
                       self.true_value, self.calibrated, True, self.flags)


@dataclass
class RayRecon:
    """Optical depth and absorption along one reconstruction ray."""

    entry: np.ndarray
    exit: np.ndarray
    direction: np.ndarray
    ts: np.ndarray
    points: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    transmission: float
    valid: np.ndarray
    imag_fraction: float = 0.0


@dataclass
class ReconstructionResult:
    """Everything the inversion produced, with per-sample failure accounting."""

    method: str
    dimension: int
    rays: list = field(default_factory=list)
    k_records: list = field(default_factory=list)
    f_data: list = field(default_factory=list)
    sigma_points: np.ndarray | None = None
    sigma_values: np.ndarray | None = None
    sigma_true: np.ndarray | None = None
    sigma_field: GriddedField | None = None
    sigma_dispersion: float = 0.0
    tau_table: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def sigma_rel_linf(self):
        if self.sigma_values is None or self.sigma_true is None:
            return np.nan
        good = np.isfinite(self.sigma_values) & np.isfinite(self.sigma_true)
        if not np.any(good):
            return np.nan
        scale = np.max(np.abs(self.sigma_true[good]))
        return float(np.max(np.abs(self.sigma_values[good] - self.sigma_true[good])) / scale)

    def sigma_median_abs_err(self):
        if self.sigma_values is None or self.sigma_true is None:
            return np.nan
        good = np.isfinite(self.sigma_values) & np.isfinite(self.sigma_true)
        if not np.any(good):
            return np.nan
        return float(np.median(np.abs(self.sigma_values[good] - self.sigma_true[good])))

    def k_rel_errors(self):
        vals = [(r.value, r.true_value) for r in self.k_records
                if r.true_value is not None and not r.mirrored and np.isfinite(r.value)]
        if not vals:
            return np.array([])
        v = np.asarray(vals)
        return np.abs(v[:, 0] - v[:, 1]) / np.maximum(np.abs(v[:, 1]), 1e-300)

    def f_scale(self):
        mags = [abs(d.value) for d in self.f_data if d.valid]
        return float(np.median(mags)) if mags else 0.0


def _h_self_dual(u_values, agrid, scale):
    """Functional for detector = flipped source: one solve instead of two.

    Valid when the adjoint relabeling preserves the kernel matrix (always
    true for separable kernels); equals the oracle functional exactly.
    """
    anti = agrid.antipodal
    return scale * ((u_values * u_values[:, anti]) @ agrid.weights)


def _fill_nan_nearest(values, shape):
    """Replace NaNs by the nearest finite value along axis 0, then axis 1..n."""
    arr = values.reshape(shape).copy()
    for axis in range(arr.ndim):
        moved = np.moveaxis(arr, axis, 0)
        for idx in np.ndindex(moved.shape[1:]):
            col = moved[(slice(None),) + idx]
            good = np.isfinite(col)
            if np.any(good) and not np.all(good):
                xi = np.arange(col.size)
                col[~good] = np.interp(xi[~good], xi[good], col[good])
    return arr.ravel()


class _PipelineContext:
    """Shared solver access with memoized solves keyed by source geometry."""

    def __init__(self, phantom, domain, sgrid, agrid, options, tol):
        self.op = TransportOperator(phantom, domain, sgrid, agrid, options)
        self.phantom = phantom
        self.tol = tol
        self._cache = {}

    def solve_source(self, key, f):
        if key not in self._cache:
            self._cache[key] = self.op.solve(f, tol=self.tol)
        return self._cache[key]

    def solve_detector(self, key, g):
        if key not in self._cache:
            self._cache[key] = self.op.solve_adjoint(g, tol=self.tol)
        return self._cache[key]


def _point_key(kind, x, j):
    return (kind, tuple(np.round(np.asarray(x, dtype=float), 12)), int(j))


# -- point pipeline ----------------------------------------------------------


def _point_backscatter_ray(ctx, domain, agrid, axis, j_dir, entry, exit_pt, h,
                           s, ts, points, separable):
    """Optical depth along one ray from the two backscatter functionals.

    For collinear backscatter the functional accumulates scattering from the
    whole remaining chord, so the clean attenuated value comes from the
    directional difference quotient (exactly the step that motivates the
    oscillatory construction), not from the raw functional.
    """
    op = ctx.op
    theta1 = agrid.nodes[j_dir]
    j_anti = int(agrid.antipodal[j_dir])

    f1 = make_point_source(domain, agrid, entry, theta1, h)
    u1 = ctx.solve_source(_point_key("src", entry, j_dir), f1)
    f2 = make_point_source(domain, agrid, exit_pt, -theta1, h)
    u2 = ctx.solve_source(_point_key("src", exit_pt, j_anti), f2)

    if separable:
        h1_vals = _h_self_dual(u1.field.values, agrid, h * h)
        h2_vals = _h_self_dual(u2.field.values, agrid, h * h)
    else:
        g1 = make_point_detector(domain, agrid, entry, -theta1, h)
        g2 = make_point_detector(domain, agrid, exit_pt, theta1, h)
        v1 = ctx.solve_detector(_point_key("det", entry, j_anti), g1)
        v2 = ctx.solve_detector(_point_key("det", exit_pt, j_dir), g2)
        h1_vals = (u1.field.values * v1.field.values) @ agrid.weights
        h2_vals = (u2.field.values * v2.field.values) @ agrid.weights

    # centered difference windows: O(s^2) bias instead of O(s)
    off = 0.5 * s * theta1[None, :]
    F_fwd = (interpolate(op.sgrid, h1_vals, points - off)
             - interpolate(op.sgrid, h1_vals, points + off)) / (2.0 * s)
    F_bwd = (interpolate(op.sgrid, h2_vals, points + off)
             - interpolate(op.sgrid, h2_vals, points - off)) / (2.0 * s)

    amp = f1.meta["amplitude"]
    trace = op.evaluate_at(exit_pt[None, :], np.array([j_dir]),
                           u_values=u1.field.values, f=f1)
    transmission = float(np.real(trace[0])) / amp

    tau = np.full(ts.size, np.nan)
    failures = []
    for i in range(ts.size):
        try:
            tau[i] = recover_tau(max(F_fwd[i], F_FLOOR),
                                 max(F_bwd[i], F_FLOOR), transmission)
        except LogDomainError as err:
            failures.append(f"ray axis{axis} t={ts[i]:.3f}: {err}")
    sigma = recover_sigma(ts, tau)
    ray = RayRecon(entry, exit_pt, theta1, ts, points, tau, sigma,
                   transmission, np.isfinite(sigma))
    return ray, F_fwd, failures


def run_point_pipeline(phantom, domain, sgrid, agrid, *, axes=(0,), row_stride=4,
                       k_samples=6, h=None, s=None, reference=None, tol=None,
                       options=None, ground_truth=True, interior_margin=3,
                       seed=0):
    """Reconstruct absorption and kernel samples with point sources/detectors.

    Rays run along quadrature directions aligned with grid axes (rows or
    columns, strided); each contributes an optical-depth profile from two
    backscatter functionals plus the ballistic transmission, then absorption
    by differentiation.  Kernel values are sampled at interior nodes for
    direction pairs, unwound with depth legs integrated from the assembled
    absorption field, and calibrated against a reference scan when given.
    """
    if h is None or s is None:
        h_def, s_def = default_widths(sgrid, domain)
        h = h_def if h is None else h
        s = s_def if s is None else s
    ctx = _PipelineContext(phantom, domain, sgrid, agrid, options, tol)
    separable = isinstance(phantom.kernel, SeparableKernel)
    result = ReconstructionResult("point", sgrid.dimension)
    axes_vals = sgrid.axes()
    margin = interior_margin

    sigma_grid_vals = np.full(sgrid.shape, np.nan)
    count_grid = np.zeros(sgrid.shape)
    m2_grid = np.zeros(sgrid.shape)

    for axis in axes:
        e_axis = np.zeros(sgrid.dimension)
        e_axis[axis] = 1.0
        j_dir = agrid.nearest_node(e_axis)
        theta1 = agrid.nodes[j_dir]
        if not np.allclose(theta1, e_axis, atol=1e-12):
            raise ContractError("point pipeline rays need an axis-aligned "
                                "quadrature node")
        other_axes = [a for a in range(sgrid.dimension) if a != axis]
        row_indices = [np.arange(margin, sgrid.counts[a] - margin, row_stride)
                       for a in other_axes]
        mesh = np.meshgrid(*row_indices, indexing="ij") if row_indices else []
        combos = np.stack([m.ravel() for m in mesh], axis=1) if mesh else np.zeros((1, 0), int)
        ts_all = axes_vals[axis] - sgrid.lo[axis]
        length = sgrid.hi[axis] - sgrid.lo[axis]
        keep_t = (ts_all >= 0.5 * s) & (ts_all <= length - 0.5 * s)
        ts = ts_all[keep_t]
        for combo in combos:
            entry = np.empty(sgrid.dimension)
            exit_pt = np.empty(sgrid.dimension)
            entry[axis] = sgrid.lo[axis]
            exit_pt[axis] = sgrid.hi[axis]
            for a, idx in zip(other_axes, combo):
                entry[a] = axes_vals[a][idx]
                exit_pt[a] = axes_vals[a][idx]
            points = entry[None, :] + ts[:, None] * e_axis[None, :]
            ray, F_fwd, fails = _point_backscatter_ray(
                ctx, domain, agrid, axis, j_dir, entry, exit_pt, h, s, ts,
                points, separable)
            result.rays.append(ray)
            result.failures.extend(fails)
            for i in range(ts.size):
                result.f_data.append(BrokenRayDatum(
                    points[i], theta1, -theta1, float(F_fwd[i]), s, h,
                    valid=bool(np.isfinite(ray.tau[i]))))
            flat_idx = np.ravel_multi_index(
                tuple(np.rint((points[:, a] - sgrid.lo[a]) / sgrid.spacing[a]).astype(int)
                      for a in range(sgrid.dimension)), sgrid.counts)
            vals = ray.sigma
            flat_sig = sigma_grid_vals.ravel()
            flat_cnt = count_grid.ravel()
            flat_m2 = m2_grid.ravel()
            for fi, v in zip(flat_idx, vals):
                if not np.isfinite(v):
                    continue
                if flat_cnt[fi] == 0:
                    flat_sig[fi] = v
                else:
                    old = flat_sig[fi]
                    flat_sig[fi] = (old * flat_cnt[fi] + v) / (flat_cnt[fi] + 1)
                    flat_m2[fi] += (v - old) * (v - flat_sig[fi])
                flat_cnt[fi] += 1

    filled = _fill_nan_nearest(sigma_grid_vals.ravel(), sgrid.shape)
    sigma_field = GriddedField(sgrid, filled)
    result.sigma_field = sigma_field
    n_multi = count_grid[count_grid > 1]
    result.sigma_dispersion = float(np.sqrt(np.max(m2_grid / np.maximum(count_grid - 1, 1)))) \
        if n_multi.size else 0.0

    sampled = count_grid.ravel() > 0
    interior = sgrid.interior_mask(margin)
    keep = sampled & interior
    nodes = sgrid.nodes()
    result.sigma_points = nodes[keep]
    result.sigma_values = sigma_grid_vals.ravel()[keep]
    if ground_truth:
        result.sigma_true = phantom.sigma.values_on(result.sigma_points)

    _point_k_samples(ctx, domain, sgrid, agrid, result, sigma_field, h, s,
                     k_samples, reference, separable, ground_truth,
                     interior_margin, seed)

    result.metrics = {
        "sigma_rel_linf": result.sigma_rel_linf(),
        "sigma_median_abs_err": result.sigma_median_abs_err(),
        "k_rel_err_max": float(np.max(result.k_rel_errors()))
        if result.k_rel_errors().size else np.nan,
        "n_failures": len(result.failures),
        "n_rays": len(result.rays),
        "h": h, "s": s,
        "f_scale": result.f_scale(),
    }
    return result


def _reference_context(reference, domain, sgrid, agrid, options, tol):
    sig = reference.sigma
    if isinstance(sig, ConstantField):
        sigma_ref = sig.value
    elif isinstance(sig, ParametricField) and not sig.gaussians and not sig.inclusions:
        sigma_ref = sig.base
    else:
        raise ContractError("the calibration reference needs constant absorption")
    return _PipelineContext(reference, domain, sgrid, agrid, options, tol), sigma_ref


def _point_k_samples(ctx, domain, sgrid, agrid, result, sigma_field, h, s,
                     k_samples, reference, separable, ground_truth,
                     interior_margin, seed):
    if k_samples <= 0:
        return
    rng = np.random.default_rng(seed)
    phantom = ctx.phantom
    op = ctx.op
    ref_ctx = None
    if reference is not None:
        ref_ctx, sigma_ref = _reference_context(reference, domain, sgrid, agrid,
                                                op.options, ctx.tol)

    # direction pairs with enough separation for the margin rule
    min_sep = SEPARATION_FACTOR * h
    pairs = []
    n_dir = agrid.count
    for jin in range(n_dir):
        for jout in range(jin + 1, n_dir):
            sep = np.linalg.norm(agrid.nodes[jin] - agrid.nodes[jout])
            if sep >= min_sep and sep < 1.999:  # exclude exact backscatter
                pairs.append((jin, jout))
    if not pairs:
        result.failures.append("no direction pairs satisfy the separation rule")
        return
    nodes = sgrid.nodes()
    interior = np.nonzero(sgrid.interior_mask(max(interior_margin, 4)))[0]
    for _ in range(k_samples):
        jin, jout = pairs[int(rng.integers(len(pairs)))]
        x = nodes[int(rng.choice(interior))]
        theta_in = agrid.nodes[jin]
        theta_out = agrid.nodes[jout]
        try:
            x1 = gamma(domain, x, theta_in, -1)
            x2 = gamma(domain, x, theta_out, +1)
            f = make_point_source(domain, agrid, x1, theta_in, h)
            u = ctx.solve_source(_point_key("src", x1, jin), f)
            g = make_point_detector(domain, agrid, x2, theta_out, h)
            v = ctx.solve_detector(_point_key("det", x2, jout), g)
            h_val = float(np.real(
                (interpolate(sgrid, u.field.values, x[None, :])[0]
                 * interpolate(sgrid, v.field.values, x[None, :])[0]) @ agrid.weights))
            datum = BrokenRayDatum(x, theta_in, theta_out, h_val / 2.0, s, h,
                                   valid=h_val > 0)
            result.f_data.append(datum)
            if h_val <= 0:
                result.failures.append(f"k-sample at {tuple(x)}: nonpositive functional")
                continue
            F = h_val / 2.0
            calibrated = False
            if ref_ctx is not None:
                u_r = ref_ctx.solve_source(_point_key("src", x1, jin), f)
                v_r = ref_ctx.solve_detector(_point_key("det", x2, jout), g)
                h_ref = float(np.real(
                    (interpolate(sgrid, u_r.field.values, x[None, :])[0]
                     * interpolate(sgrid, v_r.field.values, x[None, :])[0]) @ agrid.weights))
                k_ref = float(reference.scattering_eval(x[None, :], theta_out, theta_in)[0])
                d1 = float(np.linalg.norm(x - x1))
                d2 = float(np.linalg.norm(x - x2))
                f_ref_true = k_ref * np.exp(-sigma_ref * (d1 + d2))
                if h_ref > 0:
                    F = F * f_ref_true / (h_ref / 2.0)
                    calibrated = True
            step = op.step
            tau_in = optical_distance(sigma_field, x, x1, step)
            tau_out = optical_distance(sigma_field, x, x2, step)
            k_val = recover_k(F, tau_out, tau_in)
            true_val = float(phantom.scattering_eval(x[None, :], theta_out,
                                                     theta_in)[0]) if ground_truth else None
            rec = KRecord(tuple(x), tuple(theta_out), tuple(theta_in), k_val,
                          true_val, calibrated)
            result.k_records.append(rec)
            result.k_records.append(rec.mirror())
            result.tau_table.append((tuple(x), tuple(theta_in), tau_in))
            result.tau_table.append((tuple(x), tuple(-theta_out), tau_out))
        except (LogDomainError, DynamicRangeError, ContractError, DomainError) as err:
            result.failures.append(f"k-sample at {tuple(x)}: {err}")


# -- oscillatory pipeline ------------------------------------------------------


def _perp_axis(direction):
    direction = np.asarray(direction, dtype=float)
    probe = np.zeros(3)
    probe[int(np.argmin(np.abs(direction)))] = 1.0
    axis = np.cross(direction, probe)
    return axis / np.linalg.norm(axis)


def _osc_h_at_points(u_values, v_values, agrid, sgrid, points, x3_axis, h):
    """Phase-normalized functional values at ray points."""
    u_pts = interpolate(sgrid, u_values, points)
    v_pts = interpolate(sgrid, v_values, points)
    raw = (u_pts * v_pts) @ agrid.weights
    phase = np.exp(-1j * (points @ np.asarray(x3_axis)) / h)
    return raw * phase


def _osc_tau_ray(ctx, domain, sgrid, agrid, j_dir, anchor, x3_axis, h, s,
                 n_samples, failures):
    """Backscatter optical-depth profile along one oscillatory-illumination ray."""
    op = ctx.op
    d = agrid.nodes[j_dir]
    j_anti = int(agrid.antipodal[j_dir])
    entry = gamma(domain, anchor, d, -1)
    exit_pt = gamma(domain, anchor, d, +1)
    chord = float(np.linalg.norm(exit_pt - entry))
    if chord <= 1.6 * s:
        raise ContractError("chord too short for the difference-quotient step")

    key3 = tuple(np.round(x3_axis, 12))
    f_fwd = make_oscillatory_source(domain, agrid, d, x3_axis, h,
                                    boundary_spacing=float(np.max(sgrid.spacing_arr)))
    u_fwd = ctx.solve_source(("osc", j_dir, key3), f_fwd)
    f_bwd = make_oscillatory_source(domain, agrid, -d, x3_axis, h)
    u_bwd = ctx.solve_source(("osc", j_anti, key3), f_bwd)

    g_fwd = make_point_detector(domain, agrid, entry, -d, h)
    v_fwd = ctx.solve_detector(_point_key("det", entry, j_anti), g_fwd)
    g_bwd = make_point_detector(domain, agrid, exit_pt, d, h)
    v_bwd = ctx.solve_detector(_point_key("det", exit_pt, j_dir), g_bwd)

    t_lo, t_hi = 0.55 * s, chord - 0.55 * s
    ts = np.linspace(t_lo, t_hi, n_samples)
    points = entry[None, :] + ts[:, None] * d[None, :]

    off = 0.5 * s * d[None, :]
    h_fwd_m = _osc_h_at_points(u_fwd.field.values, v_fwd.field.values, agrid,
                               sgrid, points - off, x3_axis, h)
    h_fwd_p = _osc_h_at_points(u_fwd.field.values, v_fwd.field.values, agrid,
                               sgrid, points + off, x3_axis, h)
    h_bwd_m = _osc_h_at_points(u_bwd.field.values, v_bwd.field.values, agrid,
                               sgrid, points - off, x3_axis, h)
    h_bwd_p = _osc_h_at_points(u_bwd.field.values, v_bwd.field.values, agrid,
                               sgrid, points + off, x3_axis, h)

    im_scale = float(np.max(np.abs(np.imag(h_fwd_m))) /
                     max(np.max(np.abs(np.real(h_fwd_m))), 1e-300))
    F_fwd = (np.real(h_fwd_m) - np.real(h_fwd_p)) / s
    F_bwd = (np.real(h_bwd_p) - np.real(h_bwd_m)) / s

    amp = f_fwd.meta["amplitude"]
    trace = op.evaluate_at(exit_pt[None, :], np.array([j_dir]),
                           u_values=u_fwd.field.values, f=f_fwd)
    phase = np.exp(-1j * float(exit_pt @ np.asarray(x3_axis)) / h)
    transmission = float(np.real(trace[0] * phase)) / amp

    tau = np.full(ts.size, np.nan)
    for i in range(ts.size):
        try:
            tau[i] = recover_tau(max(F_fwd[i], F_FLOOR), max(F_bwd[i], F_FLOOR),
                                 transmission)
        except LogDomainError as err:
            failures.append(f"osc ray t={ts[i]:.3f}: {err}")
    sigma = recover_sigma(ts, tau)
    return RayRecon(entry, exit_pt, d, ts, points, tau, sigma, transmission,
                    np.isfinite(sigma), im_scale), F_fwd


def run_oscillatory_pipeline(phantom, domain, sgrid, agrid, *, k_pair_dirs,
                             theta1=None, anchors=None, n_ray_samples=10,
                             h=None, s=None, reference=None, tol=None,
                             options=None, ground_truth=True):
    """Reconstruction from the one-parameter oscillatory source family (3-D).

    ``k_pair_dirs`` lists outgoing quadrature-node indices; each defines one
    rotation of the oscillation axis (perpendicular to both the fixed
    illumination direction and that detector direction) and contributes
    kernel samples for its pair.  The first rotation also reconstructs the
    optical depth and absorption along rays through the anchor points.
    """
    if sgrid.dimension != 3:
        raise ContractError("the oscillatory pipeline is three-dimensional")
    if h is None or s is None:
        h_def, s_def = default_widths(sgrid, domain)
        h = h_def if h is None else h
        s = s_def if s is None else s
    ctx = _PipelineContext(phantom, domain, sgrid, agrid, options, tol)
    op = ctx.op
    result = ReconstructionResult("oscillatory", 3)
    result.metrics["h"], result.metrics["s"] = h, s

    if theta1 is None:
        j1 = agrid.nearest_node(np.array([1.0, 0.0, 0.0]))
    else:
        j1 = agrid.nearest_node(theta1)
    th1 = agrid.nodes[j1]

    if anchors is None:
        lo, hi = domain.bounding_box()
        c = 0.5 * (lo + hi)
        span = hi - lo
        offs = np.array([[0.0, 0.0, 0.0], [0.0, 0.18, 0.1], [0.0, -0.15, -0.12]])
        anchors = c[None, :] + offs * span[None, :]

    ref_ctx = None
    sigma_ref = None
    if reference is not None:
        ref_ctx, sigma_ref = _reference_context(reference, domain, sgrid, agrid,
                                                op.options, ctx.tol)

    rotations = []
    for j2 in k_pair_dirs:
        th2 = agrid.nodes[int(j2)]
        sep = float(np.linalg.norm(th1 - th2))
        if sep < SEPARATION_FACTOR * h:
            raise ContractError(
                f"pair separation {sep:.3g} below {SEPARATION_FACTOR} x h")
        cross = np.cross(th1, th2)
        nrm = np.linalg.norm(cross)
        axis = cross / nrm if nrm > 1e-9 else _perp_axis(th1)
        rotations.append((int(j2), axis))
    if not rotations:
        rotations = [(int(agrid.antipodal[j1]), _perp_axis(th1))]

    # rotation 0 carries the depth/absorption reconstruction
    x3_axis = rotations[0][1]
    sig_pts, sig_vals = [], []
    tau_rays = {}
    for anchor in anchors:
        ray, F_fwd = _osc_tau_ray(ctx, domain, sgrid, agrid, j1, anchor,
                                  x3_axis, h, s, n_ray_samples, result.failures)
        result.rays.append(ray)
        tau_rays[tuple(np.round(anchor, 12))] = ray
        for i in range(ray.ts.size):
            result.f_data.append(BrokenRayDatum(
                ray.points[i], th1, -th1, float(F_fwd[i]), s, h,
                valid=bool(np.isfinite(ray.tau[i]))))
        good = np.isfinite(ray.sigma)
        sig_pts.append(ray.points[good])
        sig_vals.append(ray.sigma[good])

    result.sigma_points = np.concatenate(sig_pts) if sig_pts else np.zeros((0, 3))
    result.sigma_values = np.concatenate(sig_vals) if sig_vals else np.zeros(0)
    if ground_truth and result.sigma_points.size:
        result.sigma_true = phantom.sigma.values_on(result.sigma_points)

    # kernel samples: one pair per rotation, anchored on the first depth ray
    for j2, axis in rotations:
        th2 = agrid.nodes[j2]
        anchor = np.asarray(anchors[0], dtype=float)
        ray0 = tau_rays.get(tuple(np.round(anchor, 12)))
        try:
            _osc_k_sample(ctx, ref_ctx, sigma_ref, domain, sgrid, agrid, result,
                          j1, j2, axis, anchor, ray0, h, s, n_ray_samples,
                          ground_truth)
        except (ContractError, DomainError, LogDomainError,
                DynamicRangeError) as err:
            result.failures.append(f"k-pair dir {j2}: {err}")

    result.metrics.update({
        "sigma_rel_linf": result.sigma_rel_linf(),
        "k_rel_err_max": float(np.max(result.k_rel_errors()))
        if result.k_rel_errors().size else np.nan,
        "n_failures": len(result.failures),
        "imag_fraction_max": float(max((r.imag_fraction for r in result.rays),
                                       default=0.0)),
        "n_rotations": len(rotations),
    })
    return result


def _osc_k_sample(ctx, ref_ctx, sigma_ref, domain, sgrid, agrid, result,
                  j1, j2, x3_axis, anchor, ray0, h, s, n_ray_samples,
                  ground_truth):
    """One kernel sample for the pair (illumination, detector) of a rotation."""
    op = ctx.op
    th1 = agrid.nodes[j1]
    th2 = agrid.nodes[j2]
    x = np.asarray(anchor, dtype=float)

    key3 = tuple(np.round(x3_axis, 12))
    f_rot = make_oscillatory_source(domain, agrid, th1, x3_axis, h)
    u_rot = ctx.solve_source(("osc", j1, key3), f_rot)
    x2 = gamma(domain, x, th2, +1)
    g = make_point_detector(domain, agrid, x2, th2, h)
    v = ctx.solve_detector(_point_key("det", x2, j2), g)

    pts = np.stack([x + 0.5 * s * th2, x - 0.5 * s * th2])
    h_vals = _osc_h_at_points(u_rot.field.values, v.field.values, agrid, sgrid,
                              pts, x3_axis, h)
    F_raw = float(np.real(h_vals[0]) - np.real(h_vals[1])) / s
    datum = BrokenRayDatum(x, th1, th2, F_raw, s, h, valid=F_raw > 0)
    result.f_data.append(datum)

    calibrated = False
    F = F_raw
    if ref_ctx is not None:
        u_ref = ref_ctx.solve_source(("osc", j1, key3), f_rot)
        v_ref = ref_ctx.solve_detector(_point_key("det", x2, j2), g)
        h_ref = _osc_h_at_points(u_ref.field.values, v_ref.field.values, agrid,
                                 sgrid, pts, x3_axis, h)
        F_ref_raw = float(np.real(h_ref[0]) - np.real(h_ref[1])) / s
        k_ref = float(ref_ctx.phantom.scattering_eval(x[None, :], th2, th1)[0])
        x1 = gamma(domain, x, th1, -1)
        f_ref_true = k_ref * np.exp(-sigma_ref * (np.linalg.norm(x - x1)
                                                  + np.linalg.norm(x - x2)))
        if F_ref_raw > 0:
            F = F_raw * f_ref_true / F_ref_raw
            calibrated = True

    # incoming leg from the rotation-0 depth ray, outgoing leg from its own ray
    if ray0 is None or not np.any(np.isfinite(ray0.tau)):
        raise LogDomainError("no depth profile available for the incoming leg")
    t_x = float(np.linalg.norm(x - ray0.entry))
    good = np.isfinite(ray0.tau)
    tau_in = float(np.interp(t_x, ray0.ts[good], ray0.tau[good]))

    leg_ray, _ = _osc_tau_ray(ctx, domain, sgrid, agrid, j2, x, x3_axis, h, s,
                              n_ray_samples, result.failures)
    goodl = np.isfinite(leg_ray.tau)
    if not np.any(goodl) or leg_ray.transmission <= 0:
        raise LogDomainError("outgoing leg depth profile unavailable")
    t_leg = float(np.linalg.norm(x - leg_ray.entry))
    tau_leg_entry = float(np.interp(t_leg, leg_ray.ts[goodl], leg_ray.tau[goodl]))
    tau_total = -float(np.log(leg_ray.transmission))
    tau_out = tau_total - tau_leg_entry

    k_val = recover_k(F, tau_out, tau_in)
    true_val = float(ctx.phantom.scattering_eval(x[None, :], th2, th1)[0]) \
        if ground_truth else None
    rec = KRecord(tuple(x), tuple(th2), tuple(th1), k_val, true_val, calibrated)
    result.k_records.append(rec)
    result.k_records.append(rec.mirror())
    result.tau_table.append((tuple(x), tuple(th1), tau_in))
    result.tau_table.append((tuple(x), tuple(-th2), tau_out))


# -- stability report ----------------------------------------------------------


@dataclass
class StabilityReport:
    """Discrete surrogates for the reconstruction stability bounds.

    Left sides use reconstructed coefficient differences (labeled
    surrogates); right sides use the log-gradient and C1 norms of the two
    functionals.
    """

    sigma_lhs: float
    sigma_rhs: float
    k_lhs: float
    k_rhs: float
    masked_fraction: float

    @property
    def sigma_holds(self):
        return self.sigma_lhs <= self.sigma_rhs

    @property
    def k_holds(self):
        return self.k_lhs <= self.k_rhs

    @property
    def holds(self):
        return self.sigma_holds and self.k_holds


def _grid_gradients(values, sgrid):
    arr = np.real(values).reshape(sgrid.shape)
    grads = np.gradient(arr, *sgrid.spacing)
    if sgrid.dimension == 1:
        grads = [grads]
    return [g.ravel() for g in grads]


def _c1_norm(values, sgrid, mask=None):
    grads = _grid_gradients(values, sgrid)
    total = np.abs(np.real(values)).reshape(-1) + sum(np.abs(g) for g in grads)
    if mask is not None:
        total = total[mask]
    return float(np.max(total)) if total.size else 0.0


def stability_report(result1: ReconstructionResult, result2: ReconstructionResult,
                     h1: FunctionalField, h2: FunctionalField,
                     grad_floor_rel=1e-6):
    """Evaluate both stability inequalities for two same-design runs."""
    sgrid = h1.grid
    g1 = _grid_gradients(h1.values, sgrid)
    g2 = _grid_gradients(h2.values, sgrid)
    mag1 = np.sqrt(sum(g * g for g in g1))
    mag2 = np.sqrt(sum(g * g for g in g2))
    floor = grad_floor_rel * max(float(np.max(mag1)), float(np.max(mag2)), 1e-300)
    interior = sgrid.interior_mask(2)
    mask = (mag1 > floor) & (mag2 > floor) & interior
    masked_fraction = 1.0 - float(np.sum(mask)) / max(np.sum(interior), 1)

    log_diff = np.zeros(sgrid.size)
    log_diff[mask] = np.log(mag1[mask]) - np.log(mag2[mask])
    sigma_rhs = 0.5 * _c1_norm(log_diff, sgrid, mask)

    sigma_lhs = 0.0
    if (result1.sigma_values is not None and result2.sigma_values is not None
            and result1.sigma_values.size == result2.sigma_values.size):
        good = np.isfinite(result1.sigma_values) & np.isfinite(result2.sigma_values)
        if np.any(good):
            sigma_lhs = float(np.max(np.abs(result1.sigma_values[good]
                                            - result2.sigma_values[good])))

    taus = [t for _, _, t in result1.tau_table + result2.tau_table if np.isfinite(t)]
    tau_max = max(taus) if taus else 0.0
    k_rhs = float(np.exp(2.0 * tau_max)) * _c1_norm(h1.values - h2.values, sgrid,
                                                    interior)
    k1 = {(r.x, r.theta_out, r.theta_in): r.value for r in result1.k_records}
    k2 = {(r.x, r.theta_out, r.theta_in): r.value for r in result2.k_records}
    shared = [key for key in k1 if key in k2
              and np.isfinite(k1[key]) and np.isfinite(k2[key])]
    k_lhs = max((abs(k1[k] - k2[k]) for k in shared), default=0.0)
    return StabilityReport(sigma_lhs, sigma_rhs, k_lhs, k_rhs, masked_fraction)
