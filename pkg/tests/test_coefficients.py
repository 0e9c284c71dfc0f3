"""Coefficient admissibility and the phantom library."""

import numpy as np
import pytest

from mfao import (ConstantField, angular_grid_2d, angular_grid_3d,
                  phantom_library, validate)
from mfao.coefficients import (HenyeyGreenstein, IsotropicPhase, Phantom,
                               SeparableKernel, TabulatedKernel,
                               isotropy_defect)
from mfao.errors import ContractError, ValidationError
from mfao.geometry import SpatialGrid


class TestValidate:
    def test_zero_scattering_margin(self, box2, sgrid2, agrid2):
        ph = phantom_library("homogeneous", 2, sigma0=2.0, kappa0=0.0)
        report = validate(ph, agrid2, sgrid2)
        assert report.min_margin == pytest.approx(2.0, rel=1e-10)

    def test_supercritical_fails_absorption(self, sgrid2, agrid2):
        ph = Phantom(ConstantField(1.0),
                     SeparableKernel(ConstantField(2.0), IsotropicPhase(2)))
        with pytest.raises(ValidationError) as err:
            validate(ph, agrid2, sgrid2)
        assert err.value.condition == "absorption"

    def test_negative_sigma_fails_regularity(self, sgrid2, agrid2):
        ph = Phantom(ConstantField(-0.5),
                     SeparableKernel(ConstantField(0.0), IsotropicPhase(2)))
        with pytest.raises(ValidationError) as err:
            validate(ph, agrid2, sgrid2)
        assert err.value.condition == "regularity"

    def test_separable_kernel_has_zero_defect(self, agrid2):
        kern = SeparableKernel(ConstantField(1.0), HenyeyGreenstein(0.4, 2))
        assert isotropy_defect(kern.angular_matrix(agrid2), agrid2) == 0.0

    def test_asymmetric_table_fails(self, sgrid2, agrid2):
        rng = np.random.default_rng(0)
        table = rng.random((agrid2.count, agrid2.count)) * 0.01
        ph = Phantom(ConstantField(2.0),
                     TabulatedKernel(ConstantField(1.0), table, agrid2))
        with pytest.raises(ValidationError) as err:
            validate(ph, agrid2, sgrid2)
        assert err.value.condition == "isotropicity"

    def test_symmetric_table_passes(self, sgrid2, agrid2):
        anti = agrid2.antipodal
        rng = np.random.default_rng(1)
        raw = rng.random((agrid2.count, agrid2.count)) * 0.01
        table = 0.5 * (raw + raw[np.ix_(anti, anti)].T)
        ph = Phantom(ConstantField(2.0),
                     TabulatedKernel(ConstantField(1.0), table, agrid2))
        report = validate(ph, agrid2, sgrid2)
        assert report.ok


class TestPhaseNormalization:
    @pytest.mark.parametrize("dim,grid", [(2, angular_grid_2d(64)),
                                          (3, angular_grid_3d(16, 32))])
    @pytest.mark.parametrize("g", [0.0, 0.3, -0.5])
    def test_unit_mass_by_quadrature(self, dim, grid, g):
        phase = IsotropicPhase(dim) if g == 0.0 else HenyeyGreenstein(g, dim)
        theta = grid.nodes[0]
        mass = np.sum(grid.weights * phase(grid.nodes @ theta))
        assert mass == pytest.approx(1.0, abs=5e-3)

    def test_rho_matches_kappa_for_separable(self, sgrid2):
        # quadrature rho equals sphere measure x kappa x mean(p) = kappa
        grid = angular_grid_2d(48)
        ph = phantom_library("gaussian-bumps", 2)
        kappa = ph.kernel.amplitude().values_on(sgrid2.nodes())
        matrix = ph.kernel.angular_matrix(grid)
        rho = kappa * np.max(matrix @ grid.weights)
        np.testing.assert_allclose(rho, kappa, rtol=5e-3)


class TestLibrary:
    @pytest.mark.parametrize("name", ["homogeneous", "gaussian-bumps", "two-inclusion"])
    @pytest.mark.parametrize("dim", [2, 3])
    def test_margin_at_least_tenth(self, name, dim):
        grid = angular_grid_2d(32) if dim == 2 else angular_grid_3d(6, 8)
        sgrid = SpatialGrid((0,) * dim, (1,) * dim, (17,) * dim)
        ph = phantom_library(name, dim)
        report = validate(ph, grid, sgrid)
        assert report.ok and report.min_margin >= 0.1

    def test_unknown_name(self):
        with pytest.raises(ContractError):
            phantom_library("nope", 2)

    def test_homogeneous_fields_constant(self):
        ph = phantom_library("homogeneous", 2, sigma0=1.7, kappa0=0.2)
        pts = np.random.default_rng(0).random((20, 2))
        np.testing.assert_allclose(ph.sigma.values_on(pts), 1.7)
        np.testing.assert_allclose(ph.kernel.amplitude().values_on(pts), 0.2)


class TestProbe:
    def test_nyquist_guard(self, sgrid2):
        from mfao.coefficients import UltrasoundProbe
        probe = UltrasoundProbe((1000.0, 0.0))
        with pytest.raises(ContractError):
            probe.check_nyquist(sgrid2)

    def test_modulation_values(self):
        from mfao.coefficients import UltrasoundProbe
        probe = UltrasoundProbe((2.0, 0.0), phase=0.5 * np.pi)
        pts = np.array([[0.0, 0.3], [0.25 * np.pi, 1.0]])
        np.testing.assert_allclose(probe.modulation(pts),
                                   np.cos(2.0 * pts[:, 0] + 0.5 * np.pi))
