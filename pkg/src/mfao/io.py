"""Serialization: field binaries, measurement sets, coefficient tables.

Field binary format: header ``magic "MFAO" | u32 version | u32 n |
u32 dims[n] | u32 angular count | u32 complex flag`` followed by
little-endian float64 data, spatial-major then angular (complex values
interleave real and imaginary parts).  Functional fields insert one
provenance byte between header and data.  Grid geometry travels in the
experiment config, not the field files.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct

import numpy as np

from .cascade import MeasurementSet
from .errors import ContractError
from .functional import (PROVENANCE_FOURIER, PROVENANCE_ORACLE,
                         FunctionalField, FourierCoefficients)
from .transport import OutgoingSamples

MAGIC_FIELD = b"MFAO"
MAGIC_MEASUREMENT = b"MFAM"
FORMAT_VERSION = 1

_PROVENANCE_BYTE = {PROVENANCE_ORACLE: 0, PROVENANCE_FOURIER: 1}
_PROVENANCE_NAME = {v: k for k, v in _PROVENANCE_BYTE.items()}


def _write_header(fh, dims, angular_count, is_complex):
    fh.write(MAGIC_FIELD)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack("<I", len(dims)))
    for d in dims:
        fh.write(struct.pack("<I", int(d)))
    fh.write(struct.pack("<I", int(angular_count)))
    fh.write(struct.pack("<I", 1 if is_complex else 0))


def _read_header(fh):
    magic = fh.read(4)
    if magic != MAGIC_FIELD:
        raise ContractError(f"bad field magic {magic!r}")
    version, = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported field version {version}")
    n, = struct.unpack("<I", fh.read(4))
    dims = [struct.unpack("<I", fh.read(4))[0] for _ in range(n)]
    angular_count, = struct.unpack("<I", fh.read(4))
    flag, = struct.unpack("<I", fh.read(4))
    return dims, angular_count, bool(flag)


def _pack_values(values, is_complex):
    flat = np.asarray(values).ravel(order="C")
    if is_complex:
        inter = np.empty(2 * flat.size)
        inter[0::2] = np.real(flat)
        inter[1::2] = np.imag(flat)
        return inter.astype("<f8").tobytes()
    return np.real(flat).astype("<f8").tobytes()


def _unpack_values(raw, count, is_complex):
    if is_complex:
        inter = np.frombuffer(raw, dtype="<f8", count=2 * count)
        return inter[0::2] + 1j * inter[1::2]
    return np.frombuffer(raw, dtype="<f8", count=count).copy()


def write_radiance(path, values, dims, angular_count):
    """Write a phase-space field: shape (prod(dims), angular_count)."""
    values = np.asarray(values)
    is_complex = np.iscomplexobj(values)
    with open(path, "wb") as fh:
        _write_header(fh, dims, angular_count, is_complex)
        fh.write(_pack_values(values, is_complex))


def read_radiance(path):
    with open(path, "rb") as fh:
        dims, angular_count, is_complex = _read_header(fh)
        count = int(np.prod(dims)) * angular_count
        values = _unpack_values(fh.read(), count, is_complex)
    return values.reshape(int(np.prod(dims)), angular_count), dims


def write_functional(path, h_field: FunctionalField):
    """Functional field: field header with angular count 1 + provenance byte."""
    is_complex = np.iscomplexobj(h_field.values)
    with open(path, "wb") as fh:
        _write_header(fh, h_field.grid.counts, 1, is_complex)
        fh.write(struct.pack("B", _PROVENANCE_BYTE[h_field.provenance]))
        fh.write(_pack_values(h_field.values, is_complex))


def read_functional(path, grid):
    with open(path, "rb") as fh:
        dims, angular_count, is_complex = _read_header(fh)
        if tuple(dims) != tuple(grid.counts) or angular_count != 1:
            raise ContractError("functional file does not match the grid")
        prov_byte, = struct.unpack("B", fh.read(1))
        values = _unpack_values(fh.read(), int(np.prod(dims)), is_complex)
    return FunctionalField(grid, values, _PROVENANCE_NAME[prov_byte])


def write_scalar_grid(path, values, dims):
    """Spatial-only nodal field (absorption maps etc.)."""
    write_radiance(path, np.asarray(values).reshape(-1, 1), dims, 1)


def read_scalar_grid(path):
    values, dims = read_radiance(path)
    return values[:, 0], dims


# -- measurement sets ----------------------------------------------------------


def write_measurements_binary(path, mset: MeasurementSet):
    s = mset.samples
    n = s.points.shape[1]
    with open(path, "wb") as fh:
        fh.write(MAGIC_MEASUREMENT)
        fh.write(struct.pack("<III", FORMAT_VERSION, n, mset.n_probes))
        fh.write(struct.pack("<I", s.count))
        fh.write(struct.pack("<d", mset.amplitude_a))
        fh.write(mset.q_vectors.astype("<f8").tobytes())
        fh.write(mset.phases.astype("<f8").tobytes())
        fh.write(s.points.astype("<f8").tobytes())
        fh.write(s.theta_idx.astype("<u4").tobytes())
        fh.write(s.normals.astype("<f8").tobytes())
        fh.write(s.area.astype("<f8").tobytes())
        fh.write(s.mu.astype("<f8").tobytes())
        fh.write(_pack_values(mset.values, True))


def read_measurements_binary(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC_MEASUREMENT:
            raise ContractError(f"bad measurement magic {magic!r}")
        version, n, n_probes = struct.unpack("<III", fh.read(12))
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported measurement version {version}")
        n_samples, = struct.unpack("<I", fh.read(4))
        a, = struct.unpack("<d", fh.read(8))
        q = np.frombuffer(fh.read(8 * n_probes * n), "<f8").reshape(n_probes, n).copy()
        phases = np.frombuffer(fh.read(8 * n_probes), "<f8").copy()
        pts = np.frombuffer(fh.read(8 * n_samples * n), "<f8").reshape(n_samples, n).copy()
        tidx = np.frombuffer(fh.read(4 * n_samples), "<u4").astype(np.int64)
        normals = np.frombuffer(fh.read(8 * n_samples * n), "<f8").reshape(n_samples, n).copy()
        area = np.frombuffer(fh.read(8 * n_samples), "<f8").copy()
        mu = np.frombuffer(fh.read(8 * n_samples), "<f8").copy()
        values = _unpack_values(fh.read(), n_probes * n_samples, True)
    samples = OutgoingSamples(pts, tidx, normals, area, mu)
    return MeasurementSet(q, phases, values.reshape(n_probes, n_samples), a, samples)


def write_measurements_csv(path, mset: MeasurementSet):
    """One record per (Q, phase, boundary sample) with the complex value."""
    s = mset.samples
    n = s.points.shape[1]
    qcols = [f"q{c}" for c in "xyz"[:n]]
    pcols = [f"{c}" for c in "xyz"[:n]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(qcols + ["phase"] + pcols + ["theta_index", "re", "im"])
        for p in range(mset.n_probes):
            qrow = [f"{v:.17g}" for v in mset.q_vectors[p]]
            ph = f"{mset.phases[p]:.17g}"
            for k in range(s.count):
                writer.writerow(
                    qrow + [ph] + [f"{v:.17g}" for v in s.points[k]]
                    + [int(s.theta_idx[k]),
                       f"{np.real(mset.values[p, k]):.17g}",
                       f"{np.imag(mset.values[p, k]):.17g}"])


def write_coefficients_csv(path, coeffs: FourierCoefficients):
    """Coefficient table: Q components then real and imaginary parts."""
    n = coeffs.q_vectors.shape[1]
    cols = [f"Q{c}" for c in "xyz"[:n]] + ["Re", "Im"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for q, v in zip(coeffs.q_vectors, coeffs.values):
            writer.writerow([f"{c:.17g}" for c in q]
                            + [f"{np.real(v):.17g}", f"{np.imag(v):.17g}"])


def write_k_records_csv(path, records):
    """Reconstructed kernel tuples with symmetry and calibration flags."""
    if records:
        n = len(records[0].x)
    else:
        n = 3
    cols = ([f"x{c}" for c in "xyz"[:n]] + [f"out_{c}" for c in "xyz"[:n]]
            + [f"in_{c}" for c in "xyz"[:n]]
            + ["value", "true_value", "calibrated", "mirrored", "flags"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in records:
            writer.writerow([f"{v:.17g}" for v in r.x]
                            + [f"{v:.17g}" for v in r.theta_out]
                            + [f"{v:.17g}" for v in r.theta_in]
                            + [f"{r.value:.17g}",
                               "" if r.true_value is None else f"{r.true_value:.17g}",
                               int(r.calibrated), int(r.mirrored), r.flags])


def metrics_json(metrics):
    """Canonical metrics serialization (sorted keys, stable float format)."""
    def conv(x):
        if isinstance(x, (np.floating, float)):
            return float(x)
        if isinstance(x, (np.integer, int)):
            return int(x)
        if isinstance(x, np.ndarray):
            return [conv(v) for v in x]
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        return x
    return json.dumps(conv(metrics), sort_keys=True, indent=2,
                      allow_nan=True) + "\n"


def write_metrics(path, metrics):
    with open(path, "w") as fh:
        fh.write(metrics_json(metrics))
