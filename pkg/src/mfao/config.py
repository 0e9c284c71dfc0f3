"""Experiment configuration: parsing, validation, canonical emission.

The config is a nested key/value tree (YAML).  ``emit(parse(text))`` is
canonical: parsing the emitted text reproduces the same tree, and the
config hash is the SHA-256 of the canonical emission.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from .coefficients import default_support, phantom_library
from .errors import ContractError
from .fields import BoundaryField, constant_source
from .functional import QLattice, default_qlattice
from .geometry import (Ball, Box, SpatialGrid, angular_grid_2d,
                       angular_grid_3d, boundary_grid)
from .transport import SolverOptions

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "domain": {"shape": "box", "lo": [0.0, 0.0], "hi": [1.0, 1.0]},
    "grids": {"spatial": [33, 33], "angular": {"count": 24}},
    "boundary": {"per_axis": 32},
    "phantom": {"name": "gaussian-bumps", "params": {}},
    "probes": {"a": 1.0, "b": 0.0, "lattice": None,
               "phases": [0.0, float(0.5 * np.pi)]},
    "source": {"kind": "constant", "amplitude": 1.0},
    "detector": {"kind": "constant", "amplitude": 1.0},
    "solver": {"tol": 1.0e-8, "max_terms": 200, "step_divisor": 256},
    "pipeline": {"method": "point", "mode": "oracle", "s_spacings": 8,
                 "h": None, "row_stride": 4, "k_samples": 6,
                 "reference": "homogeneous", "rotations": 1},
    "output": {"directory": "runs/experiment"},
}


def _merge(base, override):
    out = {}
    for key, val in base.items():
        if key in override and isinstance(val, dict) and isinstance(override[key], dict):
            out[key] = _merge(val, override[key])
        elif key in override:
            out[key] = override[key]
        else:
            out[key] = val
    for key in override:
        if key not in base:
            out[key] = override[key]
    return out


def parse(text):
    """Parse a config document, filling defaults."""
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ContractError("config root must be a mapping")
    return _merge(DEFAULTS, data)


def emit(tree):
    """Canonical emission: sorted keys, plain YAML."""
    return yaml.safe_dump(tree, sort_keys=True, default_flow_style=False)


def config_hash(tree):
    return hashlib.sha256(emit(tree).encode()).hexdigest()


def load(path):
    with open(path) as fh:
        return parse(fh.read())


@dataclass
class Experiment:
    """Constructed objects for one configuration tree."""

    tree: dict
    domain: object
    sgrid: SpatialGrid
    agrid: object
    bgrid: object
    phantom: object
    reference: object
    source: BoundaryField
    detector: BoundaryField
    lattice: QLattice
    options: SolverOptions
    phases: tuple
    a: float
    b: float
    seed: int

    @property
    def hash(self):
        return config_hash(self.tree)


def _build_domain(node):
    shape = node.get("shape", "box")
    if shape == "box":
        return Box(tuple(node["lo"]), tuple(node["hi"]))
    if shape == "ball":
        return Ball(tuple(node["center"]), float(node["radius"]))
    raise ContractError(f"unknown domain shape {shape!r}")


def _build_angular(node, dimension):
    if dimension == 2:
        return angular_grid_2d(int(node.get("count", 24)))
    return angular_grid_3d(int(node.get("polar", 8)), int(node.get("azimuth", 16)))


def _build_boundary_source(node, side):
    kind = node.get("kind", "constant")
    if kind == "constant":
        return constant_source(float(node.get("amplitude", 1.0)), side=side)
    raise ContractError(f"config boundary field kind {kind!r} not supported; "
                        "build custom sources through the API")


def build(tree):
    """Materialize the experiment objects a config tree describes."""
    domain = _build_domain(tree["domain"])
    n = domain.dimension
    sgrid = SpatialGrid.for_domain(domain, tuple(tree["grids"]["spatial"]))
    agrid = _build_angular(tree["grids"]["angular"], n)
    bgrid = boundary_grid(domain, int(tree["boundary"]["per_axis"]))
    support = default_support(domain)
    pnode = tree["phantom"]
    phantom = phantom_library(pnode["name"], dimension=n, support=support,
                              **(pnode.get("params") or {}))
    ref_name = tree["pipeline"].get("reference")
    reference = None
    if ref_name:
        ref_params = tree["pipeline"].get("reference_params") or {}
        reference = phantom_library(ref_name, dimension=n, support=support,
                                    **ref_params)
    lat_node = tree["probes"].get("lattice")
    if lat_node:
        lattice = QLattice(tuple(lat_node["extents"]), tuple(lat_node["counts"]))
    else:
        lattice = default_qlattice(sgrid)
    lattice.check_nyquist(sgrid)
    solver = tree["solver"]
    options = SolverOptions(tol=float(solver["tol"]),
                            max_terms=int(solver["max_terms"]),
                            ray_step=domain.diameter / float(solver["step_divisor"]))
    return Experiment(
        tree=tree, domain=domain, sgrid=sgrid, agrid=agrid, bgrid=bgrid,
        phantom=phantom, reference=reference,
        source=_build_boundary_source(tree["source"], "incoming"),
        detector=_build_boundary_source(tree["detector"], "outgoing"),
        lattice=lattice, options=options,
        phases=tuple(float(p) for p in tree["probes"]["phases"]),
        a=float(tree["probes"]["a"]), b=float(tree["probes"]["b"]),
        seed=int(tree["seed"]))
