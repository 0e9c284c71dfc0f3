"""Domain projections, quadrature grids and the optical distance."""

import numpy as np
import pytest

from mfao import (Ball, Box, angular_grid_2d, angular_grid_3d, gamma,
                  optical_distance, ray_trace)
from mfao.errors import DomainError
from mfao.fields import AnalyticField
from mfao.geometry import SpatialGrid, boundary_grid, interpolate


class TestGamma:
    def test_axis_ray_in_box(self):
        box = Box((0, 0, 0), (1, 1, 1))
        p = gamma(box, (0.5, 0.5, 0.5), (1, 0, 0), +1)
        np.testing.assert_allclose(p, [1.0, 0.5, 0.5], atol=1e-12)

    def test_ball_center_backward(self):
        ball = Ball((0, 0, 0), 1.0)
        theta = np.array([1.0, 2.0, -0.5])
        theta /= np.linalg.norm(theta)
        p = gamma(ball, (0, 0, 0), theta, -1)
        np.testing.assert_allclose(p, -theta, atol=1e-12)

    def test_oblique_ray_in_box(self):
        # two slab-exit parameters by hand: t_x = 0.5/(1/sqrt2), t_y = 0.5/(1/sqrt2)
        # from (0.25, 0.5, 0.5): x-faces at t=0.75*sqrt2, y-faces at t=0.5*sqrt2 -> y wins
        box = Box((0, 0, 0), (1, 1, 1))
        d = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
        p = gamma(box, (0.25, 0.5, 0.5), d, +1)
        np.testing.assert_allclose(p, [0.75, 1.0, 0.5], atol=1e-10)

    def test_outside_point_rejected(self):
        box = Box((0, 0), (1, 1))
        with pytest.raises(DomainError):
            gamma(box, (1.5, 0.5), (1, 0), +1)

    def test_boundary_residual_tolerance(self):
        box = Box((0, 0), (2, 3))
        p = gamma(box, (0.3, 0.4), (0.6, 0.8), +1)
        assert box.boundary_residual(p) < 1e-10 * box.diameter


class TestRayTrace:
    def test_box_axis_chord(self):
        box = Box((0, 0), (1, 1))
        tr = ray_trace(box, (0.3, 0.4), (1, 0))
        np.testing.assert_allclose(tr.entry, [0.0, 0.4])
        np.testing.assert_allclose(tr.exit, [1.0, 0.4])
        assert tr.chord == pytest.approx(1.0)

    def test_ball_diameter_chord(self):
        ball = Ball((0, 0, 0), 0.5)
        tr = ray_trace(ball, (0.5, 0.0, 0.0), (-1.0, 0.0, 0.0))
        assert tr.chord == pytest.approx(1.0, abs=1e-12)

    def test_point_on_chord(self):
        rng = np.random.default_rng(7)
        box = Box((0, 0), (1, 1))
        for _ in range(50):
            x = rng.uniform(0.05, 0.95, 2)
            ang = rng.uniform(0, 2 * np.pi)
            theta = np.array([np.cos(ang), np.sin(ang)])
            tr = ray_trace(box, x, theta)
            t = (x - tr.entry) @ theta
            assert 0.0 <= t <= tr.chord + 1e-12
            np.testing.assert_allclose(tr.entry + t * theta, x, atol=1e-10)

    def test_gamma_antipodal_consistency(self):
        rng = np.random.default_rng(3)
        ball = Ball((0.5, 0.5), 0.5)
        for _ in range(25):
            x = np.array([0.5, 0.5]) + 0.3 * (rng.random(2) - 0.5)
            ang = rng.uniform(0, 2 * np.pi)
            theta = np.array([np.cos(ang), np.sin(ang)])
            plus = gamma(ball, x, theta, +1)
            minus = gamma(ball, x, -theta, -1)
            np.testing.assert_allclose(plus, minus, atol=1e-10)

    def test_tangential_flagged(self):
        ball = Ball((0, 0), 1.0)
        tr = ray_trace(ball, (1.0, 0.0), (0.0, 1.0))
        assert tr.degenerate and tr.chord == 0.0


class TestOpticalDistance:
    def test_constant_coefficient(self):
        sigma = lambda pts: np.full(pts.shape[0], 3.0)
        x, y = np.array([0.9, 0.2]), np.array([0.1, 0.6])
        expect = 3.0 * np.linalg.norm(x - y)
        assert optical_distance(sigma, x, y, 1e-3) == pytest.approx(expect, rel=1e-12)

    def test_symmetry(self):
        def sigma(pts):
            return 1.0 + np.exp(-np.sum((pts - 0.4) ** 2, axis=1) / 0.02)
        rng = np.random.default_rng(11)
        for _ in range(10):
            x, y = rng.random(2), rng.random(2)
            a = optical_distance(sigma, x, y, 1e-3)
            b = optical_distance(sigma, y, x, 1e-3)
            assert a == pytest.approx(b, rel=1e-10)

    def test_additivity_on_collinear_triple(self):
        def sigma(pts):
            return 1.0 + np.exp(-np.sum((pts - 0.4) ** 2, axis=1) / 0.05)
        x1 = np.array([0.1, 0.2])
        x2 = np.array([0.8, 0.9])
        x = x1 + 0.37 * (x2 - x1)
        whole = optical_distance(sigma, x1, x2, 2e-4)
        parts = optical_distance(sigma, x1, x, 2e-4) + optical_distance(sigma, x, x2, 2e-4)
        assert abs(whole - parts) < 1e-8

    def test_second_order_convergence(self):
        def sigma(pts):
            return 1.0 + np.exp(-np.sum((pts - 0.45) ** 2, axis=1) / 0.03)
        x, y = np.array([0.05, 0.1]), np.array([0.9, 0.85])
        ref = optical_distance(sigma, x, y, 1e-5)
        steps = np.array([0.04, 0.02, 0.01, 0.005])
        errs = np.array([abs(optical_distance(sigma, x, y, s) - ref) for s in steps])
        slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
        assert slope >= 1.8


class TestAngularGrid:
    @pytest.mark.parametrize("grid", [angular_grid_2d(16), angular_grid_2d(32),
                                      angular_grid_3d(4, 8), angular_grid_3d(8, 16)])
    def test_weight_sum(self, grid):
        total = np.sum(grid.weights)
        assert total == pytest.approx(grid.sphere_measure(), rel=1e-12)

    @pytest.mark.parametrize("grid", [angular_grid_2d(16), angular_grid_3d(6, 8)])
    def test_antipodal_exact(self, grid):
        anti = grid.antipodal
        np.testing.assert_array_equal(grid.nodes[anti], -grid.nodes)
        np.testing.assert_array_equal(grid.weights[anti], grid.weights)

    def test_unit_norm(self):
        grid = angular_grid_3d(8, 12)
        np.testing.assert_allclose(np.linalg.norm(grid.nodes, axis=1), 1.0,
                                   atol=1e-14)

    def test_odd_counts_rejected(self):
        with pytest.raises(ValueError):
            angular_grid_2d(15)
        with pytest.raises(ValueError):
            angular_grid_3d(5, 8)


class TestSpatialGrid:
    def test_interpolation_reproduces_linears(self):
        grid = SpatialGrid((0, 0), (1, 2), (9, 17))
        nodes = grid.nodes()
        vals = 2.0 * nodes[:, 0] - 0.5 * nodes[:, 1] + 1.0
        pts = np.random.default_rng(0).random((40, 2)) * [1.0, 2.0]
        out = interpolate(grid, vals, pts)
        np.testing.assert_allclose(out, 2 * pts[:, 0] - 0.5 * pts[:, 1] + 1, atol=1e-12)

    def test_quadrature_weights_integrate_constants(self):
        grid = SpatialGrid((0, 0), (1, 2), (9, 17))
        assert np.sum(grid.quadrature_weights()) == pytest.approx(2.0, rel=1e-12)

    def test_interior_mask(self):
        grid = SpatialGrid((0, 0), (1, 1), (5, 5))
        mask = grid.interior_mask(1).reshape(5, 5)
        assert mask.sum() == 9 and mask[0].sum() == 0


class TestBoundaryGrid:
    def test_box_area(self):
        bg = boundary_grid(Box((0, 0, 0), (1, 1, 1)), 8)
        assert np.sum(bg.weights) == pytest.approx(6.0, rel=1e-12)

    def test_ball_area_3d(self):
        bg = boundary_grid(Ball((0, 0, 0), 0.5), 16)
        assert np.sum(bg.weights) == pytest.approx(4 * np.pi * 0.25, rel=1e-12)

    def test_normals_unit(self):
        bg = boundary_grid(Ball((0.5, 0.5), 0.5), 16)
        np.testing.assert_allclose(np.linalg.norm(bg.normals, axis=1), 1.0)
