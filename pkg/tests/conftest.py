"""Shared fixtures: small grids and phantoms sized for fast unit runs."""

import numpy as np
import pytest

from mfao import (Box, SpatialGrid, angular_grid_2d, angular_grid_3d,
                  boundary_grid, phantom_library)
from mfao.transport import TransportOperator, outgoing_samples


@pytest.fixture(scope="session")
def box2():
    return Box((0.0, 0.0), (1.0, 1.0))


@pytest.fixture(scope="session")
def box3():
    return Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def agrid2():
    return angular_grid_2d(24)


@pytest.fixture(scope="session")
def agrid3():
    return angular_grid_3d(6, 8)


@pytest.fixture(scope="session")
def sgrid2(box2):
    return SpatialGrid.for_domain(box2, 25)


@pytest.fixture(scope="session")
def sgrid3(box3):
    return SpatialGrid.for_domain(box3, 13)


@pytest.fixture(scope="session")
def bgrid2(box2):
    return boundary_grid(box2, 24)


@pytest.fixture(scope="session")
def phantom2():
    return phantom_library("homogeneous", 2, sigma0=2.0, kappa0=0.4, g=0.15)


@pytest.fixture(scope="session")
def op2(phantom2, box2, sgrid2, agrid2):
    return TransportOperator(phantom2, box2, sgrid2, agrid2)


@pytest.fixture(scope="session")
def samples2(bgrid2, agrid2):
    return outgoing_samples(bgrid2, agrid2)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
