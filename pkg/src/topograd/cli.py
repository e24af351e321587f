"""Command-line interface.

Every subcommand reads ``--scenario FILE`` and accepts ``--set section.key=value``
overrides.  Exit codes: 0 success, 2 validation failure, 1 any other error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .mesh import MeshError, boundary_edge_valence, n_components, write_mesh
from .scenario_io import (ScenarioError, boundary_trace, load_scenario, read_measurements,
                          run_rates, run_reconstruction, synthesize_measurements,
                          write_measurements, write_rate_table, write_report,
                          write_scenario, write_trace_csv, write_vtk)

log = logging.getLogger("topograd")

RATE_SLOPE_H1 = 0.45
RATE_SLOPE_L2 = 0.55
RATE_RATIO_TOL = 0.20


class ValidationFailure(Exception):
    pass


def _scenario(args):
    sc = load_scenario(args.scenario)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ScenarioError(f"override '{item}' is not of the form section.key=value")
        overrides[key.strip()] = value.strip()
    for flag, key in (("noise", "measurement.noise"), ("points", "measurement.points"),
                      ("seed", "measurement.seed"), ("out", "output.directory")):
        if getattr(args, flag, None) is not None:
            overrides[key] = str(getattr(args, flag))
    return sc.with_overrides(overrides) if overrides else sc


def _outdir(sc):
    d = Path(sc["output"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_mesh_gen(args):
    sc = _scenario(args)
    mesh = sc.build_mesh()
    out = _outdir(sc)
    write_mesh(out / "mesh.txt", mesh)
    write_vtk(out / "mesh.vtk", mesh, {"fiber_x": mesh.fiber_frames[:, 0, 0]}, sc.header())
    print(f"wrote {out / 'mesh.txt'} ({mesh.n_vertices} vertices, {mesh.n_tets} tets)")


def cmd_mesh_info(args):
    sc = _scenario(args)
    mesh = sc.build_mesh()
    info = {"vertices": mesh.n_vertices, "tets": mesh.n_tets,
            "boundary_faces": len(mesh.boundary_faces), "volume": mesh.volume(),
            "diameter": mesh.diameter(), "mean_edge_length": mesh.mean_edge_length(),
            "tags": mesh.tag_counts(), "components": n_components(mesh),
            "hash": mesh.content_hash()}
    print(json.dumps(info, indent=2, sort_keys=True))
    try:
        mesh.validate()
    except MeshError as exc:
        raise ValidationFailure(f"mesh validation failed: {exc}") from None
    if np.any(boundary_edge_valence(mesh) != 2):
        raise ValidationFailure("boundary surface is not closed")


def cmd_forward(args):
    sc = _scenario(args)
    setup = sc.forward_setup()
    mesh, out = setup.mesh, _outdir(sc)
    inc = sc.inclusion()
    u = setup.perturbed(inc) if inc is not None else setup.background()
    stride = sc["output"]["frame_stride"]
    for n in range(0, setup.grid.N + 1, stride):
        write_vtk(out / f"u_{n:05d}.vtk", mesh, {"u": u.frames[n]}, sc.header())
    write_trace_csv(out / "trace.csv", mesh, boundary_trace(u, setup.gamma), sc.header())
    print(f"forward: {setup.grid.N} steps, u in [{u.frames.min():.6g}, {u.frames.max():.6g}]")


def cmd_synth(args):
    sc = _scenario(args)
    meas = synthesize_measurements(sc)
    out = _outdir(sc)
    write_measurements(out / "measurements.csv", meas)
    print(f"synth: {meas.mode}, {len(meas.nodes)} nodes, noise {meas.noise}")


def cmd_reconstruct(args):
    sc = _scenario(args)
    setup_mesh = sc.build_mesh()
    meas = read_measurements(args.measurements) if args.measurements else None
    rep = run_reconstruction(sc, meas, setup_mesh)
    out = _outdir(sc)
    write_report(out / "report.json", rep, sc.header())
    write_vtk(out / "gradient.vtk", setup_mesh, {"G": rep.G}, sc.header())
    print(f"reconstruct: J = {rep.J:.6g}, min G = {rep.min_G:.6g} at {rep.argmin_global_xyz}")
    for flag in rep.flags:
        print(f"  flag: {flag}")


def cmd_validate_rates(args):
    sc = _scenario(args)
    table = run_rates(sc)
    out = _outdir(sc)
    write_rate_table(out / "rates.csv", table, sc.header())
    dev = [abs(r.ratio - 1.0) for r in table.rows]
    checks = {
        f"slope L2(H1) >= {RATE_SLOPE_H1}": table.slopes["l2_h1"] >= RATE_SLOPE_H1,
        f"slope L2(L2) >= {RATE_SLOPE_L2}": table.slopes["l2_l2"] >= RATE_SLOPE_L2,
        f"final ratio deviation <= {RATE_RATIO_TOL}": dev[-1] <= RATE_RATIO_TOL,
        "ratio deviation decreasing": all(b < a for a, b in zip(dev, dev[1:])),
    }
    for r in table.rows:
        print(f"eps={r.eps:g} |w|={r.volume:.4g} ratio={r.ratio:.4f}")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if not all(checks.values()):
        raise ValidationFailure("rate checks failed")


def build_parser():
    p = argparse.ArgumentParser(prog="topograd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario INI file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a scenario value (repeatable)")
        sp.add_argument("--out", help="output directory")
        return sp

    mesh = sub.add_parser("mesh", help="mesh generation and inspection")
    msub = mesh.add_subparsers(dest="mesh_command", required=True)
    common(msub.add_parser("gen", help="generate and write the scenario mesh")).set_defaults(func=cmd_mesh_gen)
    common(msub.add_parser("info", help="print mesh statistics and validate")).set_defaults(func=cmd_mesh_info)

    common(sub.add_parser("forward", help="run the forward problem")).set_defaults(func=cmd_forward)

    sp = common(sub.add_parser("synth", help="synthesize boundary measurements"))
    sp.add_argument("--noise", type=float)
    sp.add_argument("--points", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("reconstruct", help="one-shot topological-gradient reconstruction"))
    sp.add_argument("--measurements", help="measurement CSV from 'synth' (synthesized if omitted)")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--points", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_reconstruct)

    val = sub.add_parser("validate", help="validation studies")
    vsub = val.add_subparsers(dest="validate_command", required=True)
    common(vsub.add_parser("rates", help="asymptotic rate study")).set_defaults(func=cmd_validate_rates)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ScenarioError, ValidationFailure) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported and mapped to exit code 1
        log.debug("error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
