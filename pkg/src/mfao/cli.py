"""Experiment runner: simulate | functional | reconstruct | verify | phantom.

Every command takes a config file, writes its outputs under the output
directory, and emits a manifest recording the config hash, package and
dependency versions, and per-stage tolerances.  Identical config and seed
produce byte-identical outputs; the worker flag only sets the kernel thread
count and never changes results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod, io as io_mod
from .cascade import simulate_measurements
from .coefficients import validate
from .errors import MfaoError, ValidationError
from .fields import GriddedField
from .functional import (H_hat_from_boundary, H_oracle, H_recover,
                         analysis_coefficients)
from .reconstruct import run_oscillatory_pipeline, run_point_pipeline
from .sources import node_spacing
from .transport import TransportOperator, outgoing_samples, pairing

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2


def _write_manifest(outdir, exp, command, extra=None):
    import numba
    manifest = {
        "command": command,
        "config_hash": exp.hash,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "numba_version": numba.__version__,
        "tolerances": {
            "solver_tol": exp.options.tol,
            "max_terms": exp.options.max_terms,
            "ray_step": exp.options.ray_step,
        },
        "seed": exp.seed,
    }
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        fh.write(io_mod.metrics_json(manifest))


def _prepare(args):
    tree = config_mod.load(args.config)
    if args.out:
        tree["output"]["directory"] = args.out
    if args.tol is not None:
        tree["solver"]["tol"] = args.tol
    if args.seed is not None:
        tree["seed"] = args.seed
    if args.workers is not None:
        import numba
        numba.set_num_threads(max(1, args.workers))
    exp = config_mod.build(tree)
    outdir = Path(tree["output"]["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "config.yaml", "w") as fh:
        fh.write(config_mod.emit(tree))
    return exp, outdir


def cmd_simulate(args):
    exp, outdir = _prepare(args)
    op = TransportOperator(exp.phantom, exp.domain, exp.sgrid, exp.agrid, exp.options)
    samples = outgoing_samples(exp.bgrid, exp.agrid)
    mset, _ = simulate_measurements(op, exp.source, exp.lattice.vectors(),
                                    samples, a=exp.a, phases=exp.phases)
    io_mod.write_measurements_binary(outdir / "measurements.bin", mset)
    io_mod.write_measurements_csv(outdir / "measurements.csv", mset)
    _write_manifest(outdir, exp, "simulate",
                    {"n_probes": mset.n_probes, "n_samples": mset.samples.count})
    print(f"simulate: {mset.n_probes} probes x {mset.samples.count} samples "
          f"-> {outdir}")
    return EXIT_OK


def cmd_functional(args):
    exp, outdir = _prepare(args)
    op = TransportOperator(exp.phantom, exp.domain, exp.sgrid, exp.agrid, exp.options)
    mpath = Path(args.measurements) if args.measurements else outdir / "measurements.bin"
    if mpath.exists():
        mset = io_mod.read_measurements_binary(mpath)
    else:
        samples = outgoing_samples(exp.bgrid, exp.agrid)
        mset, _ = simulate_measurements(op, exp.source, exp.lattice.vectors(),
                                        samples, a=exp.a, phases=exp.phases)
        io_mod.write_measurements_binary(outdir / "measurements.bin", mset)
    coeffs = H_hat_from_boundary(mset, exp.detector, exp.agrid, exp.lattice)
    io_mod.write_coefficients_csv(outdir / "coefficients.csv", coeffs)
    h_rec = H_recover(coeffs, exp.sgrid)
    io_mod.write_functional(outdir / "h_recovered.bin", h_rec)
    h_or = H_oracle(op, exp.source, exp.detector)
    io_mod.write_functional(outdir / "h_oracle.bin", h_or)
    inter = exp.sgrid.interior_mask(3)
    scale = float(np.max(np.abs(h_or.values[inter])))
    err = float(np.max(np.abs(np.real(h_rec.values[inter]) - h_or.values[inter])))
    metrics = {"interior_rel_linf": err / scale if scale else np.nan,
               "oracle_scale": scale,
               "provenances": [h_rec.provenance, h_or.provenance]}
    io_mod.write_metrics(outdir / "functional_metrics.json", metrics)
    _write_manifest(outdir, exp, "functional", {"n_coefficients": len(coeffs.values)})
    print(f"functional: interior mismatch {metrics['interior_rel_linf']:.3%} "
          f"-> {outdir}")
    return EXIT_OK


def cmd_reconstruct(args):
    exp, outdir = _prepare(args)
    node = exp.tree["pipeline"]
    method = node.get("method", "point")
    common = dict(reference=exp.reference, tol=exp.options.tol,
                  options=exp.options, ground_truth=True)
    if method == "point":
        result = run_point_pipeline(
            exp.phantom, exp.domain, exp.sgrid, exp.agrid,
            row_stride=int(node.get("row_stride", 4)),
            k_samples=int(node.get("k_samples", 6)),
            h=node.get("h"), seed=exp.seed, **common)
    elif method == "oscillatory":
        n_rot = int(node.get("rotations", 1))
        j1 = exp.agrid.nearest_node(np.array([1.0, 0.0, 0.0]))
        pair_dirs = _spread_pair_dirs(exp.agrid, j1, n_rot)
        result = run_oscillatory_pipeline(
            exp.phantom, exp.domain, exp.sgrid, exp.agrid,
            k_pair_dirs=pair_dirs, h=node.get("h"), **common)
    else:
        raise MfaoError(f"unknown pipeline method {method!r}")
    if result.sigma_field is not None:
        io_mod.write_scalar_grid(outdir / "sigma.bin",
                                 result.sigma_field.values, exp.sgrid.counts)
    io_mod.write_k_records_csv(outdir / "k_records.csv", result.k_records)
    metrics = dict(result.metrics)
    metrics["failures"] = len(result.failures)
    io_mod.write_metrics(outdir / "reconstruction_metrics.json", metrics)
    _write_manifest(outdir, exp, "reconstruct", {"method": method})
    print(f"reconstruct[{method}]: sigma rel Linf "
          f"{metrics.get('sigma_rel_linf', float('nan')):.3%}, "
          f"{len(result.k_records)} kernel records -> {outdir}")
    return EXIT_OK


def _spread_pair_dirs(agrid, j1, n_rot):
    th1 = agrid.nodes[j1]
    seps = np.linalg.norm(agrid.nodes - th1[None, :], axis=1)
    order = np.argsort(-seps)
    picked = [int(order[0])]
    for j in order[1:]:
        if len(picked) >= n_rot:
            break
        if all(np.linalg.norm(agrid.nodes[j] - agrid.nodes[p]) > 0.3 for p in picked):
            picked.append(int(j))
    return picked


def cmd_verify(args):
    exp, outdir = _prepare(args)
    checks = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except MfaoError as err:
            ok, detail = False, str(err)
        checks.append((name, ok, detail))
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    ag, sg = exp.agrid, exp.sgrid

    def chk_weights():
        total = float(np.sum(ag.weights))
        target = ag.sphere_measure()
        rel = abs(total - target) / target
        return rel <= 1e-12, f"sum(w) rel defect {rel:.2e}"

    def chk_antipodal():
        defect = float(np.max(np.abs(ag.nodes[ag.antipodal] + ag.nodes)))
        return defect == 0.0, f"node negation defect {defect:.2e}"

    def chk_phantom():
        report = validate(exp.phantom, ag, sg, raise_on_violation=False)
        return report.ok, str(report)

    def chk_adjoint():
        op = TransportOperator(exp.phantom, exp.domain, sg, ag, exp.options)
        rng = np.random.default_rng(exp.seed)
        u = rng.standard_normal((sg.size, ag.count))
        v = rng.standard_normal((sg.size, ag.count))
        lhs = pairing(ag, sg, op.scatter_values(u), v)
        rhs = pairing(ag, sg, u, op.scatter_values(v, adjoint=True))
        scale = np.sqrt(pairing(ag, sg, u, u) * pairing(ag, sg, v, v))
        rel = abs(lhs - rhs) / scale
        return rel <= 1e-10, f"pairing defect {rel:.2e}"

    def chk_contraction():
        op = TransportOperator(exp.phantom, exp.domain, sg, ag, exp.options)
        sol = op.solve(exp.source)
        rho_max = float(np.max(exp.phantom.kernel.amplitude().values_on(sg.nodes())
                               * np.max(exp.phantom.kernel.angular_matrix(ag) @ ag.weights)))
        sig_min = float(np.min(exp.phantom.sigma.values_on(sg.nodes())))
        limit = rho_max / sig_min + 0.05
        obs = sol.observed_contraction
        return obs <= limit, f"observed {obs:.3f} <= bound {limit:.3f}"

    def chk_zero_inflow():
        op = TransportOperator(exp.phantom, exp.domain, sg, ag, exp.options)
        from .cascade import measure_A01
        from .coefficients import UltrasoundProbe
        incoming = outgoing_samples(exp.bgrid, ag, side=-1)
        probe = UltrasoundProbe((0.0,) * exp.domain.dimension, a=exp.a)
        u00 = op.solve(exp.source)
        mod = np.cos(op.nodes @ probe.Q_arr)
        q01 = exp.a * mod[:, None] * u00.field.values
        u01 = op.solve_internal(q01)
        vals = op.lift_at(incoming.points, incoming.theta_idx,
                          q01 + op.scatter_values(u01.field.values))
        # inflow samples have zero backward chord: the trace must vanish
        worst = float(np.max(np.abs(vals))) if vals.size else 0.0
        return worst <= 1e-12 * u00.field.sup_norm(), f"max inflow trace {worst:.2e}"

    check("angular weights", chk_weights)
    check("antipodal closure", chk_antipodal)
    check("phantom admissibility", chk_phantom)
    check("scattering self-adjointness", chk_adjoint)
    check("series contraction", chk_contraction)
    check("zero inflow of shifted stage", chk_zero_inflow)

    ok = all(c[1] for c in checks)
    io_mod.write_metrics(outdir / "verify.json",
                         {name: bool(good) for name, good, _ in checks})
    _write_manifest(outdir, exp, "verify", {"passed": bool(ok)})
    print(f"verify: {'all checks passed' if ok else 'INVARIANT FAILURE'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_phantom(args):
    exp, outdir = _prepare(args)
    try:
        report = validate(exp.phantom, exp.agrid, exp.sgrid)
    except ValidationError as err:
        print(f"phantom: INVALID ({err})")
        return EXIT_INVARIANT
    nodes = exp.sgrid.nodes()
    io_mod.write_scalar_grid(outdir / "sigma_true.bin",
                             exp.phantom.sigma.values_on(nodes), exp.sgrid.counts)
    io_mod.write_scalar_grid(outdir / "kappa_true.bin",
                             exp.phantom.kernel.amplitude().values_on(nodes),
                             exp.sgrid.counts)
    io_mod.write_metrics(outdir / "phantom_report.json", {
        "min_sigma": report.min_sigma, "min_kernel": report.min_kernel,
        "margin": report.min_margin,
        "isotropy_defect": report.max_isotropy_defect,
        "angular_node_spacing": node_spacing(exp.agrid)})
    _write_manifest(outdir, exp, "phantom", {"margin": report.min_margin})
    print(f"phantom: {report}")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mfao",
        description="Forward simulation and reconstruction for the "
                    "multi-frequency acousto-optic transport system")
    parser.add_argument("--config", required=True, help="experiment config (YAML)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--workers", type=int, help="kernel thread count")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--tol", type=float, help="solver tolerance override")
    parser.add_argument("--measurements", help="measurement file for the functional stage")
    parser.add_argument("command",
                        choices=["simulate", "functional", "reconstruct",
                                 "verify", "phantom"])
    args = parser.parse_args(argv)
    handler = {"simulate": cmd_simulate, "functional": cmd_functional,
               "reconstruct": cmd_reconstruct, "verify": cmd_verify,
               "phantom": cmd_phantom}[args.command]
    try:
        return handler(args)
    except MfaoError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
