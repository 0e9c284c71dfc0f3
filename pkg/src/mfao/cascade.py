"""Three-stage acousto-optic cascade and the boundary measurement maps.

The source-frequency field drives the frequency-shifted field through the
modulation ``a cos(Q.x + phase)``, which in turn drives the doubly shifted
field through ``b cos(Q.x + phase)``.  Shifted stages have zero inflow, so
each is a Neumann series applied to the lifted interior source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import UltrasoundProbe
from .errors import ContractError
from .fields import BoundaryField, RadianceField
from .transport import OutgoingSamples, SolveResult, TransportOperator

PHASES = (0.0, 0.5 * np.pi)


def modulation_values(probe: UltrasoundProbe, points, complex_modulation=False):
    """Nodal values of the ultrasound modulation at spatial points."""
    if complex_modulation:
        return np.exp(1j * (points @ probe.Q_arr))
    return np.cos(points @ probe.Q_arr + probe.phase)


@dataclass
class CascadeSolution:
    """Solutions of the three coupled stages for one probe."""

    u00: RadianceField
    u01: RadianceField
    u11: RadianceField
    probe: UltrasoundProbe
    f: BoundaryField
    histories: dict = field(default_factory=dict)

    def stage_fields(self):
        return {"u00": self.u00, "u01": self.u01, "u11": self.u11}


def solve_cascade(op: TransportOperator, probe: UltrasoundProbe, f: BoundaryField,
                  tol=None, complex_modulation=False, u00_result: SolveResult = None,
                  stages=3):
    """Solve the cascade; ``u00_result`` lets callers reuse the probe-independent stage."""
    probe.check_nyquist(op.sgrid)
    if u00_result is None:
        u00_result = op.solve(f, tol=tol)
    mod = modulation_values(probe, op.nodes, complex_modulation)
    q01 = probe.a * mod[:, None] * u00_result.field.values
    u01_result = op.solve_internal(q01, tol=tol)
    histories = {"u00": u00_result.term_norms, "u01": u01_result.term_norms}
    if stages >= 3 and probe.b != 0.0:
        q11 = probe.b * mod[:, None] * u01_result.field.values
        u11_result = op.solve_internal(q11, tol=tol)
        histories["u11"] = u11_result.term_norms
        u11 = u11_result.field
    else:
        u11 = RadianceField(op.sgrid, op.agrid,
                            np.zeros_like(u01_result.field.values))
        histories["u11"] = [0.0]
    return CascadeSolution(u00_result.field, u01_result.field, u11, probe, f,
                           histories)


def measure_A01(op: TransportOperator, probe: UltrasoundProbe, f: BoundaryField,
                samples: OutgoingSamples, tol=None, complex_modulation=False,
                u00_result: SolveResult = None):
    """Outflow trace of the frequency-shifted field (the measurement map).

    Returns ``(values, cascade)`` where values has one entry per outgoing
    sample.  The trace is the fixed-point evaluation ``T^-1(q + A2 u01)``;
    the ballistic part vanishes because u01 has zero inflow.
    """
    probe.check_nyquist(op.sgrid)
    if u00_result is None:
        u00_result = op.solve(f, tol=tol)
    mod = modulation_values(probe, op.nodes, complex_modulation)
    q01 = probe.a * mod[:, None] * u00_result.field.values
    u01_result = op.solve_internal(q01, tol=tol)
    q_plus_scatter = q01 + op.scatter_values(u01_result.field.values)
    values = op.lift_at(samples.points, samples.theta_idx, q_plus_scatter)
    cascade = CascadeSolution(u00_result.field, u01_result.field,
                              RadianceField(op.sgrid, op.agrid,
                                            np.zeros_like(u01_result.field.values)),
                              probe, f,
                              {"u00": u00_result.term_norms,
                               "u01": u01_result.term_norms, "u11": [0.0]})
    return values, cascade


@dataclass
class MeasurementSet:
    """Boundary measurements of the frequency-shifted field over a probe sweep.

    One complex value per (probe, outgoing sample); probes are (Q, phase)
    pairs in a fixed deterministic order.
    """

    q_vectors: np.ndarray
    phases: np.ndarray
    values: np.ndarray
    amplitude_a: float
    samples: OutgoingSamples
    source_label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.q_vectors.shape[0], self.samples.count):
            raise ContractError("measurement array shape disagrees with probes/samples")

    @property
    def n_probes(self):
        return self.q_vectors.shape[0]

    def probe_index(self, q_vec, phase):
        match = (np.all(np.isclose(self.q_vectors, np.asarray(q_vec)[None, :]), axis=1)
                 & np.isclose(self.phases, phase))
        idx = np.nonzero(match)[0]
        return int(idx[0]) if idx.size else -1


def simulate_measurements(op: TransportOperator, f: BoundaryField, q_vectors,
                          samples: OutgoingSamples, a=1.0, phases=PHASES,
                          tol=None, chunk_bytes=6.0e7):
    """Sweep probes over a Q set (all phases each) and record outflow traces.

    The probe-independent source-frequency solve is shared across probes, and
    probe batches ride through the marching kernels together (the attenuation
    work is shared).  Results are identical to per-probe solves up to the
    joint stopping rule; ordering is deterministic.
    """
    q_vectors = np.atleast_2d(np.asarray(q_vectors, dtype=float))
    u00_result = op.solve(f, tol=tol)
    u00 = np.real(u00_result.field.values)
    rows_q = np.repeat(q_vectors, len(phases), axis=0)
    rows_phase = np.tile(np.asarray(phases, dtype=float), q_vectors.shape[0])
    n_probes = rows_q.shape[0]
    values = np.empty((n_probes, samples.count), dtype=complex)
    chunk = max(1, int(chunk_bytes / (u00.nbytes * 3)))
    for start in range(0, n_probes, chunk):
        sel = slice(start, min(start + chunk, n_probes))
        mods = a * np.cos(op.nodes @ rows_q[sel].T + rows_phase[sel][None, :])
        q01 = mods[:, None, :] * u00[:, :, None]
        u01, _, _ = op.solve_internal_multi(q01, tol=tol)
        src = q01 + op.scatter_values_multi(u01)
        trace = op.lift_at_multi(samples.points, samples.theta_idx, src)
        values[sel] = trace.T
    return MeasurementSet(rows_q, rows_phase, values, a, samples,
                          source_label=f.label), u00_result
