"""The three-stage modulated system and the measurement map."""

import numpy as np
import pytest

from mfao import (SpatialGrid, angular_grid_2d, boundary_grid, constant_source,
                  phantom_library)
from mfao.cascade import (measure_A01, modulation_values, simulate_measurements,
                          solve_cascade)
from mfao.coefficients import UltrasoundProbe
from mfao.fields import angular_profile_source
from mfao.transport import TransportOperator, outgoing_samples


@pytest.fixture(scope="module")
def probe0():
    return UltrasoundProbe((0.0, 0.0), phase=0.0, a=1.0, b=0.5)


class TestCascade:
    def test_zero_coupling_zeroes_shifted_stages(self, op2):
        probe = UltrasoundProbe((3.0, 1.0), a=0.0, b=0.7)
        sol = solve_cascade(op2, probe, constant_source(1.0))
        assert sol.u01.sup_norm() == 0.0
        assert sol.u11.sup_norm() == 0.0

    def test_slab_closed_form(self, box2, sgrid2, agrid2, probe0):
        # Q=0, no scattering: u01(x) = a * depth * exp(-sigma0 depth) * f
        ph = phantom_library("homogeneous", 2, sigma0=2.0, kappa0=0.0)
        op = TransportOperator(ph, box2, sgrid2, agrid2)
        j = agrid2.nearest_node(np.array([1.0, 0.0]))
        sol = solve_cascade(op, probe0, constant_source(1.0))
        x1 = sgrid2.nodes()[:, 0]
        expect = 1.0 * x1 * np.exp(-2.0 * x1)
        np.testing.assert_allclose(sol.u01.values[:, j], expect, atol=3e-5)

    def test_linearity_in_source(self, op2, probe0):
        s1 = solve_cascade(op2, probe0, constant_source(1.0))
        s2 = solve_cascade(op2, probe0, constant_source(2.0))
        np.testing.assert_allclose(s2.u01.values, 2.0 * s1.u01.values, rtol=1e-12)

    def test_cascade_ordering_b_zero(self, op2):
        probe = UltrasoundProbe((2.0, 0.0), a=1.0, b=0.0)
        sol = solve_cascade(op2, probe, constant_source(1.0))
        assert sol.u11.sup_norm() == 0.0
        assert sol.u01.sup_norm() > 0.0

    def test_u11_doubly_modulated(self, op2, probe0):
        sol = solve_cascade(op2, probe0, constant_source(1.0))
        assert sol.u11.sup_norm() > 0.0
        assert "u11" in sol.histories and len(sol.histories["u11"]) >= 1

    def test_zero_inflow_of_shifted_stages(self, op2, bgrid2, agrid2, probe0):
        sol = solve_cascade(op2, probe0, constant_source(1.0))
        incoming = outgoing_samples(bgrid2, agrid2, side=-1)
        mod = modulation_values(probe0, op2.nodes)
        q01 = probe0.a * mod[:, None] * sol.u00.values
        trace = op2.lift_at(incoming.points, incoming.theta_idx,
                            q01 + op2.scatter_values(sol.u01.values))
        assert np.max(np.abs(trace)) <= 1e-12 * sol.u00.sup_norm()

    def test_fixed_point_residual_of_stage(self, op2, probe0):
        sol = solve_cascade(op2, probe0, constant_source(1.0))
        mod = modulation_values(probe0, op2.nodes)
        q01 = probe0.a * mod[:, None] * sol.u00.values
        rhs = op2.lift_values(q01 + op2.scatter_values(sol.u01.values))
        res = np.max(np.abs(sol.u01.values - rhs))
        assert res <= 10 * op2.options.tol * sol.u01.sup_norm()


class TestMeasurement:
    def test_zero_coupling_measurements(self, op2, samples2):
        probe = UltrasoundProbe((3.0, 1.0), a=0.0)
        vals, _ = measure_A01(op2, probe, constant_source(1.0), samples2)
        assert np.all(vals == 0.0)

    def test_phase_pair_equals_complex_modulation(self, op2, samples2):
        f = constant_source(1.0)
        q = (5.0, -2.0)
        v0, _ = measure_A01(op2, UltrasoundProbe(q, phase=0.0), f, samples2)
        v1, _ = measure_A01(op2, UltrasoundProbe(q, phase=0.5 * np.pi), f, samples2)
        vc, _ = measure_A01(op2, UltrasoundProbe(q), f, samples2,
                            complex_modulation=True)
        # cos(Qx) + i cos(Qx - pi/2) = exp(i Qx); phase pi/2 gives -sin
        np.testing.assert_allclose(v0 - 1j * v1, vc, atol=1e-12)

    def test_sweep_is_deterministic(self, op2, samples2):
        f = constant_source(1.0)
        qs = np.array([[0.0, 0.0], [4.0, 2.0]])
        m1, _ = simulate_measurements(op2, f, qs, samples2, a=1.0)
        m2, _ = simulate_measurements(op2, f, qs, samples2, a=1.0)
        np.testing.assert_array_equal(m1.values, m2.values)

    def test_probe_index_lookup(self, op2, samples2):
        f = constant_source(1.0)
        qs = np.array([[0.0, 0.0], [4.0, 2.0]])
        mset, _ = simulate_measurements(op2, f, qs, samples2, a=1.0)
        assert mset.probe_index((4.0, 2.0), 0.5 * np.pi) == 3
        assert mset.probe_index((9.9, 9.9), 0.0) == -1
