"""Scenario files, synthetic measurements and output writers.

A scenario is an INI file with a fixed schema (see :data:`SCHEMA`); unknown
sections or keys are rejected.  Its canonical text (every key, schema order,
normalized values) is hashed and the hash is stamped into every output header
together with the package version.

Randomness uses ``numpy.random.Philox`` (a 64-bit counter-based generator)
seeded through ``SeedSequence(seed).spawn(2)``: the first child stream picks
the starting node of the farthest-point sampler, the second draws the noise.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import gamma_source, point_source
from .fem import EXTRA_EIGENVALUES, INTRA_EIGENVALUES, ConductivityField
from .forward import (BoundaryTrace, StepperOptions, TimeGrid, TimeSeriesField,
                      activation_band, activation_slab, boundary_trace,
                      solve_background, solve_perturbed)
from .inclusion import InclusionSpec
from .ionic import IonicParams
from .mesh import (TAGS, Mesh, VentricleGeometry, assign_fibers, boundary_subset,
                   generate_box, generate_ventricle, load_mesh, prolongate,
                   refine_uniform)
from .reconstruction import ForwardSetup, ReconstructionReport, asymptotics_study, reconstruct
from .sparse_linalg import SolveOptions


class ScenarioError(ValueError):
    """Invalid scenario file or value (a validation failure, CLI exit code 2)."""


class InverseCrimeError(ScenarioError):
    pass


# ---------------------------------------------------------------- schema

def _floats(text):
    vals = tuple(float(v) for v in str(text).replace(",", " ").split())
    if not vals:
        raise ValueError("empty list")
    return vals


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_floats(text):
    return None if str(text).strip() in ("", "none") else _floats(text)


def _opt_int(text):
    t = str(text).strip()
    return None if t in ("", "none") else int(t)


# section -> key -> (parser, default)
SCHEMA = {
    "mesh": {
        "generator": (str, "ventricle"),          # ventricle | box | file
        "resolution": (float, 0.5),
        "path": (str, ""),
        "cells": (_ints, (8, 8, 8)),
        "lengths": (_floats, (1.0, 1.0, 1.0)),
        "fiber_endo": (float, -60.0),
        "fiber_epi": (float, 60.0),
    },
    "ionic": {k: (float, getattr(IonicParams(), k))
              for k in ("A2", "u1", "u2", "u3", "nu", "Cm", "alpha", "beta")},
    "conductivity": {
        "model": (str, "monodomain"),             # monodomain | scalar
        "k0": (float, 1.0),
        "intra": (_floats, INTRA_EIGENVALUES),
        "extra": (_floats, EXTRA_EIGENVALUES),
    },
    "time": {
        "T": (float, 30.0),
        "N": (int, 150),
    },
    "stimulus": {
        "kind": (str, "band"),                    # band | slab
        "tag": (str, "endocardium"),
        "depth": (float, 0.45),
        "z_min": (float, -2.0),
        "z_max": (float, 1.5),
        "ramp": (float, 0.0),
        "axis": (int, 0),
        "width": (float, 0.25),
        "value": (float, 1.0),
    },
    "inclusion": {
        "enabled": (_bool, False),
        "center": (_opt_floats, None),            # required when enabled
        "eps": (float, 0.4),
        "k1": (float, 0.1),
    },
    "measurement": {
        "gamma": (str, "endocardium"),
        "points": (int, 0),
        "noise": (float, 0.0),
        "seed": (_opt_int, None),
        "refine": (_bool, True),
        "allow_inverse_crime": (_bool, False),
    },
    "solver": {
        "lumped": (_bool, True),
        "monotone": (_bool, False),
        "tolerance": (float, 1e-12),
        "rhs_k0": (_bool, False),
    },
    "reconstruction": {
        "k1": (float, 0.1),
        "d0": (float, 0.0),
        "large_fraction": (float, 0.1),
        "rate_eps": (_floats, (0.4, 0.28, 0.2, 0.14)),
    },
    "output": {
        "directory": (str, "out"),
        "frame_stride": (int, 10),
    },
}


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Scenario:
    """Parsed scenario: ``values[section][key]`` with schema defaults filled in."""

    values: dict
    source: str | None = None

    def __getitem__(self, section):
        return self.values[section]

    # -- canonical form

    def canonical_text(self):
        out = []
        for sec, keys in SCHEMA.items():
            out.append(f"[{sec}]")
            out.extend(f"{k} = {_format(self.values[sec][k])}" for k in keys)
            out.append("")
        return "\n".join(out)

    @property
    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def header(self):
        return f"topograd {__version__} scenario {self.hash}"

    def with_overrides(self, overrides):
        """New scenario with ``{"section.key": text}`` overrides applied and re-validated."""
        vals = {s: dict(v) for s, v in self.values.items()}
        for dotted, text in overrides.items():
            sec, _, key = dotted.partition(".")
            _check_known(sec, key)
            vals[sec][key] = _parse_value(sec, key, text)
        return Scenario(_validate(vals), self.source)

    # -- builders

    def ionic(self):
        return IonicParams(**self["ionic"])

    def grid(self):
        return TimeGrid(self["time"]["T"], self["time"]["N"])

    def stepper(self):
        s = self["solver"]
        return StepperOptions(lumped=s["lumped"], monotone=s["monotone"],
                              solve=SolveOptions(tolerance=s["tolerance"]))

    def geometry(self):
        return VentricleGeometry() if self["mesh"]["generator"] == "ventricle" else None

    def build_mesh(self) -> Mesh:
        m = self["mesh"]
        if m["generator"] == "ventricle":
            return generate_ventricle(m["resolution"], angle_endo=m["fiber_endo"],
                                      angle_epi=m["fiber_epi"])
        if m["generator"] == "box":
            return generate_box(*m["cells"], lengths=m["lengths"])
        mesh = load_mesh(m["path"])
        if Path(m["path"]).suffix == ".msh":      # Gmsh files carry no fibre frames
            mesh = assign_fibers(mesh, m["fiber_endo"], m["fiber_epi"])
        return mesh

    def conductivity(self, mesh):
        c = self["conductivity"]
        if c["model"] == "scalar":
            return ConductivityField.scalar(mesh, c["k0"])
        return ConductivityField.monodomain(mesh, c["intra"], c["extra"])

    def initial_datum(self, mesh):
        s = self["stimulus"]
        if s["kind"] == "slab":
            return activation_slab(mesh, s["axis"], s["width"], s["value"], self["ionic"]["u1"])
        return activation_band(mesh, s["tag"], s["depth"], (s["z_min"], s["z_max"]),
                               s["value"], self["ionic"]["u1"], s["ramp"])

    def inclusion(self, k1=None):
        i = self["inclusion"]
        if not i["enabled"]:
            return None
        return InclusionSpec(i["center"], i["eps"], i["k1"] if k1 is None else k1)

    def gamma(self, mesh):
        return boundary_subset(mesh, self["measurement"]["gamma"])

    def forward_setup(self, mesh=None) -> ForwardSetup:
        mesh = mesh or self.build_mesh()
        return ForwardSetup(mesh, self.conductivity(mesh), self.ionic(), self.initial_datum(mesh),
                            self.grid(), self.gamma(mesh), self.stepper(),
                            self["solver"]["rhs_k0"])


def _check_known(sec, key=None):
    if sec not in SCHEMA:
        raise ScenarioError(f"unknown section [{sec}]")
    if key is not None and key not in SCHEMA[sec]:
        raise ScenarioError(f"unknown key '{key}' in section [{sec}]")


def _parse_value(sec, key, text):
    parser = SCHEMA[sec][key][0]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{sec}] {key} = {text!r}: {exc}") from None


def _validate(vals):
    def need(cond, msg):
        if not cond:
            raise ScenarioError(msg)

    m = vals["mesh"]
    need(m["generator"] in ("ventricle", "box", "file"), f"[mesh] generator: unknown '{m['generator']}'")
    need(m["generator"] != "file" or m["path"], "[mesh] path is required for generator = file")
    need(m["resolution"] > 0, "[mesh] resolution must be positive")
    need(len(m["cells"]) == 3 and min(m["cells"]) >= 1, "[mesh] cells needs three positive counts")
    need(len(m["lengths"]) == 3 and min(m["lengths"]) > 0, "[mesh] lengths needs three positive values")
    try:
        IonicParams(**vals["ionic"])
    except ValueError as exc:
        raise ScenarioError(f"[ionic] {exc}") from None
    c = vals["conductivity"]
    need(c["model"] in ("monodomain", "scalar"), f"[conductivity] model: unknown '{c['model']}'")
    need(c["k0"] > 0, "[conductivity] k0 must be positive")
    need(len(c["intra"]) == 3 and len(c["extra"]) == 3 and min(c["intra"] + c["extra"]) > 0,
         "[conductivity] intra/extra need three positive eigenvalues each")
    t = vals["time"]
    need(t["T"] > 0 and t["N"] >= 1, "[time] needs T > 0 and N >= 1")
    s = vals["stimulus"]
    need(s["kind"] in ("band", "slab"), f"[stimulus] kind: unknown '{s['kind']}'")
    need(s["tag"] in TAGS, f"[stimulus] tag: unknown '{s['tag']}'")
    i = vals["inclusion"]
    need(not i["enabled"] or i["center"] is not None, "[inclusion] missing required key 'center'")
    need(i["center"] is None or len(i["center"]) == 3, "[inclusion] center needs three coordinates")
    need(i["eps"] > 0 and i["k1"] > 0, "[inclusion] eps and k1 must be positive")
    ms = vals["measurement"]
    need(ms["gamma"] in TAGS or ms["gamma"] == "all", f"[measurement] gamma: unknown tag '{ms['gamma']}'")
    need(0.0 <= ms["noise"] <= 1.0, "[measurement] noise must lie in [0, 1]")
    need(ms["points"] >= 0, "[measurement] points must be >= 0")
    need(ms["seed"] is not None or (ms["noise"] == 0 and ms["points"] == 0),
         "[measurement] missing required key 'seed' (needed when noise > 0 or points > 0)")
    need(vals["solver"]["tolerance"] > 0, "[solver] tolerance must be positive")
    r = vals["reconstruction"]
    need(r["k1"] > 0 and r["d0"] >= 0, "[reconstruction] needs k1 > 0 and d0 >= 0")
    need(vals["output"]["frame_stride"] >= 1, "[output] frame_stride must be >= 1")
    return vals


def parse_scenario(text, source=None) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<scenario>")
    except configparser.Error as exc:
        raise ScenarioError(str(exc)) from None
    vals = {}
    for sec in cp.sections():
        _check_known(sec)
    for sec, keys in SCHEMA.items():
        vals[sec] = {k: default for k, (_, default) in keys.items()}
        if cp.has_section(sec):
            for key, text_value in cp.items(sec):
                _check_known(sec, key)
                vals[sec][key] = _parse_value(sec, key, text_value)
    return Scenario(_validate(vals), source)


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), str(path))


def write_scenario(path, scenario: Scenario):
    Path(path).write_text(f"# {scenario.header()}\n" + scenario.canonical_text())


def default_scenario(**overrides) -> Scenario:
    """Schema defaults with ``section.key`` overrides given as ``section__key=value``."""
    base = parse_scenario("")
    return base.with_overrides({k.replace("__", "."): _format(v) if not isinstance(v, str) else v
                                for k, v in overrides.items()})


# ---------------------------------------------------------------- measurements

@dataclass(eq=False)
class MeasurementSet:
    """Boundary data on coarse-mesh nodes: the full surface or a point subset."""

    mode: str                 # "full_gamma" | "points"
    grid: TimeGrid
    nodes: np.ndarray
    positions: np.ndarray     # (n, 3)
    values: np.ndarray        # (N+1, n)
    noise: float = 0.0
    seed: int | None = None
    synthesis: str = "refined"
    header: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("full_gamma", "points"):
            raise ValueError(f"unknown measurement mode {self.mode!r}")
        if self.values.shape != (self.grid.N + 1, len(self.nodes)):
            raise ValueError("measurement values do not match the time grid and node count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("measurement values are not finite")

    def trace(self) -> BoundaryTrace:
        return BoundaryTrace(self.grid, self.nodes, self.values)


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(2)]


def farthest_point_sample(positions, n, rng: np.random.Generator):
    """Indices of ``n`` quasi-uniform points; the first is drawn from ``rng``.

    Each further point maximizes the distance to those already chosen (lowest
    index on ties), so the sample for ``n`` is a prefix of the one for ``n' > n``.
    """
    positions = np.asarray(positions, dtype=float)
    if not 0 < n <= len(positions):
        raise ValueError(f"cannot sample {n} of {len(positions)} points")
    order = [int(rng.integers(len(positions)))]
    dist = np.linalg.norm(positions - positions[order[0]], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(positions - positions[nxt], axis=1))
    return np.array(order, dtype=np.int64)


def add_noise(values, p, amplitude, rng: np.random.Generator):
    """``values + p * amplitude * eta`` with i.i.d. standard normal ``eta`` per entry."""
    if p == 0:
        return np.array(values, dtype=float, copy=True)
    return values + p * amplitude * rng.standard_normal(np.shape(values))


def clean_trace(scenario: Scenario, mesh: Mesh,
                inclusion: InclusionSpec | None | str = "scenario") -> BoundaryTrace:
    """Noise-free synthetic trace on the scenario's Gamma nodes of ``mesh``.

    The perturbed problem is solved on the uniformly refined mesh and read back
    on the coarse nodes, which refinement keeps at the same indices.  Solving on
    the reconstruction mesh itself requires ``allow_inverse_crime``.
    """
    ms = scenario["measurement"]
    if not ms["refine"] and not ms["allow_inverse_crime"]:
        raise InverseCrimeError("synthesis on the reconstruction mesh needs allow_inverse_crime = true")
    inc = scenario.inclusion() if inclusion == "scenario" else inclusion
    grid, ionic = scenario.grid(), scenario.ionic()
    u0 = scenario.initial_datum(mesh)
    if ms["refine"]:
        fine = refine_uniform(mesh)
        u0 = prolongate(mesh, u0)
    else:
        fine = mesh
    K = scenario.conductivity(fine)
    opts = scenario.stepper()
    if inc is None:
        u = solve_background(fine, K, ionic, u0, grid, opts)
    else:
        u = solve_perturbed(fine, K, ionic, u0, grid, inc, opts)
    return boundary_trace(u, scenario.gamma(mesh))


def measurements_from_trace(scenario: Scenario, mesh: Mesh, trace: BoundaryTrace,
                            meta=None) -> MeasurementSet:
    """Point subsampling and noise, as configured in ``[measurement]``."""
    ms = scenario["measurement"]
    nodes, values = trace.nodes, trace.values
    pick_rng, noise_rng = _streams(ms["seed"] if ms["seed"] is not None else 0)
    mode = "full_gamma"
    if ms["points"] > 0:
        idx = farthest_point_sample(mesh.vertices[nodes], ms["points"], pick_rng)
        nodes, values, mode = nodes[idx], values[:, idx], "points"
    values = add_noise(values, ms["noise"], scenario.ionic().amplitude, noise_rng)
    return MeasurementSet(mode, trace.grid, nodes.copy(), mesh.vertices[nodes].copy(), values,
                          ms["noise"], ms["seed"],
                          "refined" if ms["refine"] else "inverse_crime", scenario.header(),
                          dict(meta or {}))


def synthesize_measurements(scenario: Scenario, mesh: Mesh | None = None,
                            inclusion: InclusionSpec | None | str = "scenario") -> MeasurementSet:
    """Synthetic measurements for the scenario's inclusion (or a healthy heart)."""
    mesh = mesh or scenario.build_mesh()
    inc = scenario.inclusion() if inclusion == "scenario" else inclusion
    trace = clean_trace(scenario, mesh, inc)
    meta = {"inclusion": None if inc is None else
            {"center": list(inc.center), "eps": inc.eps, "k1": inc.k1}}
    return measurements_from_trace(scenario, mesh, trace, meta)


def source_builder(mesh: Mesh, gamma, meas: MeasurementSet):
    """Closure mapping a background trajectory to its mismatch source."""
    if meas.mode == "points":
        return lambda u: point_source(mesh, gamma, boundary_trace(u, meas.nodes), meas.trace())
    return lambda u: gamma_source(mesh, gamma, boundary_trace(u, gamma), meas.trace())


def run_reconstruction(scenario: Scenario, meas: MeasurementSet | None = None,
                       mesh: Mesh | None = None, background: TimeSeriesField | None = None
                       ) -> ReconstructionReport:
    """Synthesize (unless given) and reconstruct; the report carries config and provenance."""
    setup = scenario.forward_setup(mesh)
    meas = meas if meas is not None else synthesize_measurements(scenario, setup.mesh)
    r = scenario["reconstruction"]
    truth = scenario.inclusion(k1=r["k1"])
    rep = reconstruct(setup, source_builder(setup.mesh, setup.gamma, meas), r["k1"], r["d0"],
                      truth, r["large_fraction"], background)
    rep.config = {sec: {k: _format(v) for k, v in keys.items()}
                  for sec, keys in scenario.values.items()}
    rep.provenance = {"version": __version__, "scenario_hash": scenario.hash,
                      "measurement": {"mode": meas.mode, "n_nodes": int(len(meas.nodes)),
                                      "noise": meas.noise, "seed": meas.seed,
                                      "synthesis": meas.synthesis},
                      "mesh": {"vertices": setup.mesh.n_vertices, "tets": setup.mesh.n_tets,
                               "hash": setup.mesh.content_hash()},
                      "rng": "numpy Philox via SeedSequence(seed).spawn(2)"}
    return rep


def run_rates(scenario: Scenario, mesh: Mesh | None = None):
    """Asymptotics study at the scenario inclusion center, against the scenario's data."""
    setup = scenario.forward_setup(mesh)
    inc = scenario.inclusion()
    if inc is None:
        raise ScenarioError("validate rates needs [inclusion] enabled = true")
    meas = synthesize_measurements(scenario, setup.mesh)
    return asymptotics_study(setup, source_builder(setup.mesh, setup.gamma, meas), inc.center,
                             scenario["reconstruction"]["rate_eps"], inc.k1)


# ---------------------------------------------------------------- writers

def _fmt(x):
    return repr(float(x))


def measurements_to_text(meas: MeasurementSet) -> str:
    """Deterministic CSV: ``node_id,x,y,z,t,value`` under commented metadata lines."""
    buf = io.StringIO()
    buf.write(f"# {meas.header}\n")
    meta = {"mode": meas.mode, "T": meas.grid.T, "N": meas.grid.N, "noise": meas.noise,
            "seed": meas.seed, "synthesis": meas.synthesis, **meas.meta}
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    _trace_rows(buf, meas.nodes, meas.positions, meas.grid, meas.values)
    return buf.getvalue()


def _trace_rows(buf, nodes, positions, grid, values):
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_id", "x", "y", "z", "t", "value"])
    times = grid.times()
    for j, node in enumerate(nodes):
        x, y, z = (_fmt(c) for c in positions[j])
        for n, t in enumerate(times):
            w.writerow([int(node), x, y, z, _fmt(t), _fmt(values[n, j])])


def write_measurements(path, meas: MeasurementSet):
    Path(path).write_text(measurements_to_text(meas))


def read_measurements(path) -> MeasurementSet:
    lines = Path(path).read_text().splitlines()
    header = lines[0][2:]
    meta = json.loads(lines[1][2:])
    rows = list(csv.reader(lines[3:]))
    grid = TimeGrid(meta["T"], meta["N"])
    nf = grid.N + 1
    if len(rows) % nf:
        raise ValueError(f"{path}: row count is not a multiple of {nf} frames")
    arr = np.array(rows, dtype=float).reshape(-1, nf, 6)
    nodes = arr[:, 0, 0].astype(np.int64)
    extra = {k: meta[k] for k in meta if k not in ("mode", "T", "N", "noise", "seed", "synthesis")}
    return MeasurementSet(meta["mode"], grid, nodes, arr[:, 0, 1:4].copy(), arr[:, :, 5].T.copy(),
                          meta["noise"], meta["seed"], meta["synthesis"], header, extra)


def write_trace_csv(path, mesh: Mesh, trace: BoundaryTrace, header=""):
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    _trace_rows(buf, trace.nodes, mesh.vertices[trace.nodes], trace.grid, trace.values)
    Path(path).write_text(buf.getvalue())


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def report_to_json(report: ReconstructionReport, header="") -> str:
    d = report.to_dict()
    d["header"] = header
    d = json.loads(json.dumps(d, default=_json_default))
    for k, v in list(d.items()):
        if isinstance(v, float) and not math.isfinite(v):
            d[k] = None
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def write_report(path, report: ReconstructionReport, header=""):
    Path(path).write_text(report_to_json(report, header))


def write_vtk(path, mesh: Mesh, point_data: dict, header="topograd"):
    """Legacy ASCII VTK unstructured grid (cell type 10) with nodal scalar fields."""
    lines = ["# vtk DataFile Version 3.0", header.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_vertices} double"]
    lines += [" ".join(_fmt(c) for c in p) for p in mesh.vertices]
    lines.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    lines += ["4 " + " ".join(map(str, t)) for t in mesh.tets]
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines += ["10"] * mesh.n_tets
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, vals in point_data.items():
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (mesh.n_vertices,):
                raise ValueError(f"field {name!r} has shape {vals.shape}")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_fmt(v) for v in vals]
    Path(path).write_text("\n".join(lines) + "\n")


def write_rate_table(path, table, header=""):
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    recs = table.as_records()
    w = csv.DictWriter(buf, fieldnames=list(recs[0]), lineterminator="\n")
    w.writeheader()
    for r in recs:
        w.writerow({k: _fmt(v) if isinstance(v, float) else ("" if v is None else v)
                    for k, v in r.items()})
    buf.write("# slopes " + json.dumps(table.slopes, sort_keys=True) + "\n")
    Path(path).write_text(buf.getvalue())
