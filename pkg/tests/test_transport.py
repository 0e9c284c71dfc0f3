"""Operator algebra: ballistic, lift, scatter, solver, adjoint, albedo."""

import numpy as np
import pytest

from mfao import (Box, ConstantField, SpatialGrid, angular_grid_2d,
                  boundary_grid, constant_source, phantom_library)
from mfao.coefficients import Phantom, SeparableKernel, IsotropicPhase
from mfao.errors import ContractError, NonContractionError
from mfao.fields import angular_profile_source, callable_source
from mfao.geometry import optical_distance
from mfao.transport import (SolverOptions, TransportOperator,
                            directional_derivative, outgoing_samples, pairing)


@pytest.fixture(scope="module")
def op_noscatter(box2, sgrid2, agrid2):
    ph = phantom_library("homogeneous", 2, sigma0=2.0, kappa0=0.0)
    return TransportOperator(ph, box2, sgrid2, agrid2)


class TestBallistic:
    def test_slab_attenuation(self, op_noscatter, sgrid2, agrid2):
        f = constant_source(1.0)
        vals = op_noscatter.ballistic_values(f)
        j = agrid2.nearest_node(np.array([1.0, 0.0]))
        x1 = sgrid2.nodes()[:, 0]
        np.testing.assert_allclose(vals[:, j], np.exp(-2.0 * x1), rtol=1e-12)

    def test_zero_source(self, op_noscatter):
        f = constant_source(0.0)
        assert op_noscatter.ballistic(f).sup_norm() == 0.0

    def test_matches_optical_distance_oracle(self, box2, sgrid2, agrid2):
        # compose the line-integral oracle with the boundary lookup
        from mfao.fields import ParametricField
        sigma = ParametricField(1.0, gaussians=(((0.4, 0.55), 0.8, 0.15),))
        ph = Phantom(sigma, SeparableKernel(ConstantField(0.0), IsotropicPhase(2)))
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        f = constant_source(1.0)
        j = 3
        theta = agrid2.nodes[j]
        x = np.array([0.63, 0.41])
        val = op.ballistic_at(x[None, :], np.array([j]), f)[0]
        from mfao.geometry import gamma
        entry = gamma(box2, x, theta, -1)
        expect = np.exp(-optical_distance(sigma, x, entry, op.step))
        assert val == pytest.approx(expect, abs=1e-6)

    def test_outgoing_source_rejected(self, op_noscatter):
        g = constant_source(1.0, side="outgoing")
        with pytest.raises(ContractError):
            op_noscatter.ballistic(g)


class TestLift:
    def test_constant_source_closed_form(self, op_noscatter, agrid2):
        # T^-1 sigma0 = 1 - exp(-sigma0 * backward chord)
        S = np.full((op_noscatter.sgrid.size, agrid2.count), 2.0)
        out = op_noscatter.lift_values(S)
        for j in range(agrid2.count):
            tmax = op_noscatter._grid_tmax(j)
            np.testing.assert_allclose(out[:, j], 1.0 - np.exp(-2.0 * tmax),
                                       atol=2e-5)

    def test_zero_source(self, op_noscatter, agrid2):
        S = np.zeros((op_noscatter.sgrid.size, agrid2.count))
        assert np.all(op_noscatter.lift_values(S) == 0.0)

    def test_sup_bound_scaled_by_sigma_min(self, op2, agrid2):
        rng = np.random.default_rng(5)
        S = rng.standard_normal((op2.sgrid.size, agrid2.count))
        out = op2.lift_values(S)
        sigma_min = 2.0
        assert np.max(np.abs(out)) <= np.max(np.abs(S)) / sigma_min * (1 + 1e-8)


class TestScatter:
    def test_zero_kernel(self, op_noscatter, agrid2):
        w = np.ones((op_noscatter.sgrid.size, agrid2.count))
        assert np.all(op_noscatter.scatter_values(w) == 0.0)

    def test_unit_field_gives_kappa(self, box2, sgrid2, agrid2):
        ph = phantom_library("gaussian-bumps", 2)
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        w = np.ones((sgrid2.size, agrid2.count))
        out = op.scatter_values(w)
        kappa = ph.kernel.amplitude().values_on(sgrid2.nodes())
        np.testing.assert_allclose(out, kappa[:, None], rtol=1e-2)

    def test_linfty_bound_by_l1(self, op2, phantom2, sgrid2, agrid2):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((sgrid2.size, agrid2.count))
        out = op2.scatter_values(w)
        c_k = 0.4 * float(np.max(phantom2.kernel.phase(np.linspace(-1, 1, 400))))
        l1 = np.abs(w) @ agrid2.weights
        assert np.all(np.max(np.abs(out), axis=1) <= c_k * l1 * (1 + 1e-12))

    def test_k_apply_single_node_kernel_hand_quadrature(self, box2, sgrid2, agrid2):
        ph = phantom_library("homogeneous", 2, sigma0=2.0, kappa0=0.3)
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        w = np.zeros((sgrid2.size, agrid2.count))
        w[:, 5] = 1.0
        a2 = op.scatter_values(w)
        matrix = ph.kernel.angular_matrix(agrid2)
        expect = 0.3 * matrix[:, 5] * agrid2.weights[5]
        np.testing.assert_allclose(a2[0], expect, rtol=1e-12)
        k_w = op.k_apply_values(w)
        lifted = op.lift_values(np.tile(expect, (sgrid2.size, 1)))
        np.testing.assert_allclose(k_w, lifted, rtol=1e-10)


class TestSolve:
    def test_no_scattering_terminates_at_ballistic(self, op_noscatter):
        f = constant_source(1.0)
        sol = op_noscatter.solve(f)
        b = op_noscatter.ballistic(f)
        assert len(sol.term_norms) == 2  # ballistic plus one vanishing term
        np.testing.assert_array_equal(sol.field.values, b.values)

    def test_contraction_ratio_bound(self, box2, sgrid2, agrid2):
        ph = phantom_library("homogeneous", 2, sigma0=1.0, kappa0=0.5)
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        sol = op.solve(constant_source(1.0))
        assert sol.converged
        assert sol.observed_contraction <= 0.5 / 1.0 + 0.05

    def test_interior_transport_residual(self, op2, sgrid2, agrid2):
        # finite-difference theta.grad u vs -sigma u + A2 u on interior stencils
        f = constant_source(1.0)
        sol = op2.solve(f)
        u = sol.field.values
        a2 = op2.scatter_values(u)
        sigma = 2.0
        delta = 1.5 * max(sgrid2.spacing)
        worst = 0.0
        for j in [0, 5, 11]:
            ok, du = directional_derivative(u[:, j], sgrid2, agrid2.nodes[j], delta)
            rhs = (-sigma * u[:, j] + a2[:, j])[ok]
            worst = max(worst, np.max(np.abs(du - rhs)))
        assert worst <= 2e-2 * sol.field.sup_norm()

    def test_fixed_point_residual(self, op2):
        f = constant_source(1.0)
        sol = op2.solve(f)
        res = op2.fixed_point_residual(sol, f=f)
        assert res <= 10 * op2.options.tol * sol.field.sup_norm()

    def test_non_contraction_detected(self, box2, sgrid2, agrid2):
        # force an invalid phantom through without validation
        ph = Phantom(ConstantField(0.05),
                     SeparableKernel(ConstantField(1.0), IsotropicPhase(2)))
        op = TransportOperator(ph, box2, sgrid2, agrid2, check_phantom=False)
        with pytest.raises(NonContractionError):
            op.solve(constant_source(1.0), max_terms=60)

    def test_maximum_principle_surrogate(self, op2):
        f = constant_source(1.0)
        sol = op2.solve(f)
        c_obs = sol.observed_contraction
        assert sol.field.sup_norm() <= 1.0 / (1.0 - c_obs)


class TestAdjoint:
    def test_relabel_identity(self, op2, agrid2):
        g = constant_source(1.0, side="outgoing")
        v = op2.solve_adjoint(g)
        forward = op2.adjoint_relabeled_forward(g)
        anti = agrid2.antipodal
        np.testing.assert_array_equal(v.field.values,
                                      forward.field.values[:, anti])

    def test_discrete_pairing_defect(self, op2, sgrid2, agrid2):
        rng = np.random.default_rng(9)
        u = rng.standard_normal((sgrid2.size, agrid2.count))
        v = rng.standard_normal((sgrid2.size, agrid2.count))
        lhs = pairing(agrid2, sgrid2, op2.scatter_values(u), v)
        rhs = pairing(agrid2, sgrid2, u, op2.scatter_values(v, adjoint=True))
        norm = np.sqrt(pairing(agrid2, sgrid2, u, u)
                       * pairing(agrid2, sgrid2, v, v))
        assert abs(lhs - rhs) <= 1e-10 * norm

    def test_incoming_detector_rejected(self, op2):
        with pytest.raises(ContractError):
            op2.solve_adjoint(constant_source(1.0, side="incoming"))

    def test_back_propagated_ray_no_scattering(self, op_noscatter, sgrid2, agrid2):
        j = agrid2.nearest_node(np.array([1.0, 0.0]))
        profile = np.zeros(agrid2.count)
        profile[j] = 1.0
        g = angular_profile_source(profile, side="outgoing")
        v = op_noscatter.solve_adjoint(g)
        # v(x, theta_j) = exp(-sigma * distance to the outflow face along theta_j)
        x1 = sgrid2.nodes()[:, 0]
        np.testing.assert_allclose(v.field.values[:, j], np.exp(-2.0 * (1.0 - x1)),
                                   rtol=1e-10)

    def test_no_scattering_product_constant_along_rays(self, op_noscatter,
                                                       sgrid2, agrid2):
        f = callable_source(lambda p, th: 1.0 + 0.5 * np.sin(3 * p[:, 1] + th[:, 0]))
        g = callable_source(lambda p, th: 1.0 + 0.3 * np.cos(2 * p[:, 0]),
                            side="outgoing")
        u = op_noscatter.solve(f).field.values
        v = op_noscatter.solve_adjoint(g).field.values
        prod = u * v
        delta = 1.5 * max(sgrid2.spacing)
        for j in [2, 7, 19]:
            ok, dv = directional_derivative(prod[:, j], sgrid2,
                                            agrid2.nodes[j], delta)
            assert np.max(np.abs(dv)) <= 1e-3 * np.max(np.abs(prod[:, j]))


class TestAlbedoAndTraces:
    def test_transmission_of_point_like_source(self, box2, sgrid2, agrid2, bgrid2):
        ph = phantom_library("homogeneous", 2, sigma0=1.2, kappa0=0.0)
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        j = agrid2.nearest_node(np.array([1.0, 0.0]))
        profile = np.zeros(agrid2.count)
        profile[j] = 1.0
        f = angular_profile_source(
            profile, spatial_fn=lambda p: (np.abs(p[:, 1] - 0.5) < 0.08).astype(float))
        samples = outgoing_samples(bgrid2, agrid2)
        trace, _ = op.albedo_00(f, samples)
        sel = (samples.theta_idx == j) & (np.abs(samples.points[:, 1] - 0.5) < 0.05) \
            & (samples.points[:, 0] > 0.99)
        np.testing.assert_allclose(trace[sel], np.exp(-1.2), rtol=1e-6)

    def test_zero_source_zero_trace(self, op2, samples2):
        trace, _ = op2.albedo_00(constant_source(0.0), samples2)
        assert np.all(trace == 0.0)

    def test_outgoing_flux_bounded_by_incoming(self, box2, agrid2):
        # energy bookkeeping on a small grid: absorption only removes light
        sgrid = SpatialGrid.for_domain(box2, 17)
        bgrid = boundary_grid(box2, 16)
        ph = phantom_library("homogeneous", 2, sigma0=1.0, kappa0=0.45)
        op = TransportOperator(ph, box2, sgrid, agrid2)
        f = constant_source(1.0)
        out_s = outgoing_samples(bgrid, agrid2)
        in_s = outgoing_samples(bgrid, agrid2, side=-1)
        sol = op.solve(f)
        trace = op.trace(out_s, u=sol.field, f=f)
        flux_out = np.sum(trace * out_s.quadrature_weights(agrid2) * out_s.mu)
        f_in = f.values(in_s.points, in_s.theta_idx, agrid2)
        flux_in = np.sum(f_in * in_s.quadrature_weights(agrid2) * (-in_s.mu))
        assert 0 < flux_out < flux_in

    def test_batched_paths_match_single(self, op2, sgrid2, agrid2, samples2):
        rng = np.random.default_rng(4)
        q = rng.random((sgrid2.size, agrid2.count, 3))
        single = np.stack([op2.lift_values(q[:, :, i]) for i in range(3)], axis=2)
        multi = op2.lift_values_multi(q)
        np.testing.assert_allclose(multi, single, atol=1e-13)
        s_single = np.stack([op2.scatter_values(q[:, :, i]) for i in range(3)], axis=2)
        np.testing.assert_allclose(op2.scatter_values_multi(q), s_single, atol=1e-14)
        at_single = np.stack([op2.lift_at(samples2.points, samples2.theta_idx,
                                          q[:, :, i]) for i in range(3)], axis=1)
        at_multi = op2.lift_at_multi(samples2.points, samples2.theta_idx, q)
        np.testing.assert_allclose(at_multi, at_single, atol=1e-13)
