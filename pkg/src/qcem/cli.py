"""Command-line front end: ``qcem run``, ``qcem validate-mesh``, ``qcem greens``.

Exit codes: 0 success, 1 validation/config error, 2 compute error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .emcore import BathSpec, GreenSample, psd_margin
from .greens import Scene, green_scan
from .layered import LayeredStack, QuadratureError
from .mesh import (DEFAULT_MAX_TETS, GateBox, Material, MeshError, default_gate_layout, generate_ball,
                   generate_box, generate_gate_layout, generate_patch_array, load_mesh, refine_region)
from .qubits import (DephasingRates, GateSpec, InvariantError, QubitSpec, build_lindblad, gate_fidelity,
                     relaxation_rates, sample_spectrum, spectrum_grid, t1_from_rate,
                     zero_generator)
from .vie import VIEError, build_swg_space, counters

log = logging.getLogger("qcem")

EXIT_OK, EXIT_INVALID, EXIT_COMPUTE = 0, 1, 2

LENGTH = {"m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9}
FREQUENCY = {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9}
TIME = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}
AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}
OUTPUTS = ("relaxation", "correlation-ratio", "T1", "dephasing", "fidelity")
DESK_BUDGET = 20_000

PRESET_MATERIALS = {
    "Al": Material("Al", 1.6e8, 1.0),
    "Ag": Material("Ag", 5e7, 1.0),
    "vacuum": Material("vacuum", 0.0, 1.0),
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"config error at {path}: {message}")
        self.path = path


class ComputeError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

class _Reader:
    """Typed access to a JSON object that reports the dotted field path."""

    def __init__(self, data, path: str = ""):
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self.data = data
        self.path = path

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key):
        return key in self.data

    def sub(self, key, required=True):
        if key not in self.data:
            if required:
                raise ConfigError(self._p(key), "missing")
            return None
        return _Reader(self.data[key], self._p(key))

    def get(self, key, default=..., kind=None):
        if key not in self.data:
            if default is ...:
                raise ConfigError(self._p(key), "missing")
            return default
        v = self.data[key]
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                if v == "inf":
                    return math.inf
                raise ConfigError(self._p(key), f"expected a number, got {v!r}")
            return float(v)
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(self._p(key), f"expected an integer, got {v!r}")
            return v
        if kind is str and not isinstance(v, str):
            raise ConfigError(self._p(key), f"expected a string, got {v!r}")
        return v

    def vector(self, key, scale=1.0, default=...):
        v = self.get(key, default)
        if v is default and default is not ...:
            return default
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(self._p(key), "expected a list of numbers") from None
        if arr.shape != (3,) or not np.all(np.isfinite(arr)):
            raise ConfigError(self._p(key), "expected three finite numbers")
        return arr * scale


@dataclass
class Units:
    length: float = 1.0
    frequency: float = 1.0
    time: float = 1.0

    @classmethod
    def parse(cls, r: _Reader | None):
        if r is None:
            return cls()
        out = cls()
        for key, table in (("length", LENGTH), ("frequency", FREQUENCY), ("time", TIME)):
            if r.has(key):
                name = r.get(key, kind=str)
                if name not in table:
                    raise ConfigError(r._p(key), f"unknown unit {name!r}; choose from {sorted(table)}")
                setattr(out, key, table[name])
        return out


@dataclass
class Scenario:
    """Validated run configuration in SI units."""

    raw: dict
    scene: Scene
    reference: Scene | None
    omega: float
    qubit_position: np.ndarray
    axes: list
    scan_variable: str
    scan_values: np.ndarray
    scan_direction: np.ndarray
    outputs: list
    bath: BathSpec
    dephasing_times: list = field(default_factory=list)
    spectrum_points_per_decade: int = 5
    spectrum_decades: float = 4.0
    gate: dict | None = None
    gate_dt: float | None = None
    mesh_budget: int = DESK_BUDGET


def _materials(r: _Reader | None) -> dict:
    mats = dict(PRESET_MATERIALS)
    if r is None:
        return mats
    for name in r.data:
        m = r.sub(name)
        sigma = m.get("conductivity", kind=float)
        eps_r = m.get("relative_permittivity", 1.0, kind=float)
        if sigma < 0:
            raise ConfigError(m._p("conductivity"), "must be >= 0")
        mats[name] = Material(name, sigma, eps_r)
    return mats


def _material(r: _Reader, mats, key="material"):
    name = r.get(key, kind=str)
    if name not in mats:
        raise ConfigError(r._p(key), f"unknown material {name!r}")
    return mats[name]


def _stack(r: _Reader, u: Units, mats) -> LayeredStack:
    t = r.get("thickness", kind=float)
    if not t > 0:
        raise ConfigError(r._p("thickness"), "must be > 0 or 'inf'")
    return LayeredStack(t * u.length if math.isfinite(t) else math.inf, _material(r, mats))


def _mesh(r: _Reader, u: Units, mats, budget: int):
    kind = r.get("type", kind=str)
    L = u.length
    try:
        if kind == "mesh_file":
            region_mats = {}
            rm = r.sub("regionMaterials", required=False)
            if rm is not None:
                for rid in rm.data:
                    if not str(rid).lstrip("-").isdigit():
                        raise ConfigError(rm._p(rid), "region ids must be integers")
                    region_mats[int(rid)] = _material(rm, mats, rid)
            mesh = load_mesh(r.get("path", kind=str), r.get("format", "qem-ascii", kind=str),
                             materials=region_mats)
        elif kind == "box":
            mesh = generate_box(r.vector("dims", L), r.get("h", kind=float) * L, _material(r, mats),
                                origin=r.vector("origin", L, default=np.zeros(3)), max_tets=budget)
        elif kind == "patch_array":
            mesh = generate_patch_array(r.get("a", kind=float) * L, r.get("b", kind=float) * L,
                                        r.get("t", kind=float) * L, r.get("n", kind=int),
                                        r.get("h", kind=float) * L, _material(r, mats), max_tets=budget)
        elif kind == "gate_layout":
            if r.has("boxes"):
                boxes = []
                for k, b in enumerate(r.get("boxes")):
                    br = _Reader(b, r._p(f"boxes[{k}]"))
                    boxes.append(GateBox.of_class(*(br.get(c, kind=float) * L for c in ("x0", "x1", "y0", "y1")),
                                                  br.get("class", kind=str)))
            else:
                boxes = default_gate_layout()
            mesh = generate_gate_layout(boxes, r.get("h", kind=float) * L, _material(r, mats), max_tets=budget)
        elif kind == "ball":
            mesh = generate_ball(r.get("radius", kind=float) * L, r.get("n", kind=int), _material(r, mats))
        else:
            raise ConfigError(r._p("type"), f"unknown geometry type {kind!r}")
        ref = r.sub("refine", required=False)
        if ref is not None:
            mesh = refine_region(mesh, ref.vector("center", L), ref.get("radius", kind=float) * L,
                                 ref.get("factor", 2, kind=int))
    except (MeshError, OSError) as exc:
        raise ConfigError(r.path, str(exc)) from None
    if mesh.n_tets > budget:
        raise ConfigError(r.path, f"mesh has {mesh.n_tets} tets, above meshBudget {budget}")
    return mesh


def parse_scenario(raw: dict) -> Scenario:
    root = _Reader(raw)
    u = Units.parse(root.sub("units", required=False))
    mats = _materials(root.sub("materials", required=False))
    budget = root.get("meshBudget", DESK_BUDGET, kind=int)
    if budget <= 0:
        raise ConfigError("meshBudget", "must be positive")

    g = root.sub("geometry")
    if g.get("type", kind=str) == "layered":
        scene = Scene(stack=_stack(g, u, mats))
    else:
        scene = Scene(mesh=_mesh(g, u, mats, min(budget, DEFAULT_MAX_TETS)))
    ref = root.sub("referenceFilm", required=False)
    reference = Scene(stack=_stack(ref, u, mats)) if ref is not None else None

    f = root.get("frequency", kind=float) * u.frequency
    if not f > 0:
        raise ConfigError("frequency", "must be > 0")
    omega = 2 * math.pi * f

    q = root.sub("qubit")
    pos = q.vector("position", u.length)
    axes = q.get("axes", ["z"])
    if not isinstance(axes, list) or not axes or any(a not in AXES for a in axes):
        raise ConfigError("qubit.axes", "expected a non-empty list drawn from x, y, z")

    s = root.sub("scan")
    var = s.get("variable", kind=str)
    if var not in ("z", "d", "x"):
        raise ConfigError("scan.variable", "must be one of z, d, x")
    start = s.get("start", kind=float) * u.length
    stop = s.get("stop", kind=float) * u.length
    count = s.get("count", kind=int)
    if count < 1:
        raise ConfigError("scan.count", "must be >= 1")
    if not stop > start:
        raise ConfigError("scan", "range must be ordered (stop > start)")
    if var in ("z", "d") and not start > 0:
        raise ConfigError("scan.start", "must be positive")
    spacing = s.get("spacing", "linear", kind=str)
    if spacing == "log":
        if not start > 0:
            raise ConfigError("scan.start", "log spacing needs a positive start")
        values = np.geomspace(start, stop, count)
    elif spacing == "linear":
        values = np.linspace(start, stop, count)
    else:
        raise ConfigError("scan.spacing", "must be 'linear' or 'log'")
    direction = s.vector("direction", default=np.array([1.0, 0.0, 0.0]))
    if np.linalg.norm(direction) == 0:
        raise ConfigError("scan.direction", "must be nonzero")
    direction = direction / np.linalg.norm(direction)

    outputs = root.get("outputs", ["relaxation"])
    if not isinstance(outputs, list) or not outputs:
        raise ConfigError("outputs", "expected a non-empty list")
    for k, o in enumerate(outputs):
        if o not in OUTPUTS:
            raise ConfigError(f"outputs[{k}]", f"unknown output {o!r}; choose from {list(OUTPUTS)}")
    if "correlation-ratio" in outputs and var != "d":
        raise ConfigError("outputs", "correlation-ratio needs a 'd' scan")

    b = root.sub("bath", required=False)
    temperature = b.get("temperature", 0.0, kind=float) if b else 0.0
    cutoff = (b.get("dephasingCutoff", 0.01e9 / u.frequency, kind=float) if b else 0.01e9 / u.frequency)
    try:
        bath = BathSpec(temperature, 2 * math.pi * cutoff * u.frequency)
    except ValueError as exc:
        raise ConfigError("bath", str(exc)) from None

    sc = Scenario(raw, scene, reference, omega, pos, axes, var, values, direction, outputs, bath,
                  mesh_budget=budget)
    if "dephasing" in outputs:
        d = root.sub("dephasing")
        times = d.get("times")
        if not isinstance(times, list) or not times:
            raise ConfigError("dephasing.times", "expected a non-empty list")
        sc.dephasing_times = [float(t) * u.time for t in times]
        if any(t < 0 for t in sc.dephasing_times):
            raise ConfigError("dephasing.times", "times must be >= 0")
        sc.spectrum_points_per_decade = d.get("pointsPerDecade", 5, kind=int)
        sc.spectrum_decades = d.get("decades", 4.0, kind=float)
        if sc.spectrum_points_per_decade < 4:
            raise ConfigError("dephasing.pointsPerDecade", "need at least 4 points per decade")
    if "fidelity" in outputs:
        gate = root.sub("gate", required=False)
        if gate is None:
            raise ConfigError("gate", "fidelity output requires a gate")
        kind = gate.get("type", "idle", kind=str)
        if kind != "idle":
            raise ConfigError("gate.type", "only 'idle' gates are supported from configs")
        dur = gate.get("duration", kind=float) * u.time
        dt = gate.get("dt", kind=float) * u.time
        if not (dur > 0 and dt > 0):
            raise ConfigError("gate", "duration and dt must be > 0")
        sc.gate = {"type": kind, "duration": dur}
        sc.gate_dt = dt
    return sc


# -------------------------------------------------------------------- run

class _GreenCache:
    """Prefetches Green samples one frequency at a time and serves lookups."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.store: dict = {}

    @staticmethod
    def _key(a, b, w):
        return (np.asarray(a, float).tobytes(), np.asarray(b, float).tobytes(), float(w))

    def prefetch(self, requests):
        by_w: dict = {}
        for a, b, w in requests:
            k = self._key(a, b, w)
            if k not in self.store:
                by_w.setdefault(float(w), {})[k] = (np.asarray(a, float), np.asarray(b, float))
        for w in sorted(by_w):
            keys = list(by_w[w])
            samples = green_scan(self.scene, [by_w[w][k] for k in keys], [w])
            self.store.update(zip(keys, samples))

    def __call__(self, a, b, w) -> GreenSample:
        return self.store[self._key(a, b, w)]


def _qubit_sets(sc: Scenario):
    """Per scan point: list of qubit positions (1 or 2 qubits)."""
    pts = []
    for v in sc.scan_values:
        base = sc.qubit_position.copy()
        if sc.scan_variable == "z":
            base[2] = v
            pts.append([base])
        elif sc.scan_variable == "x":
            pts.append([base + v * sc.scan_direction])
        else:
            pts.append([base, base + v * sc.scan_direction])
    return pts


def _pair_requests(positions, omega):
    reqs = []
    for i in range(len(positions)):
        for j in range(i, len(positions)):
            reqs.append((positions[i], positions[j], omega))
    return reqs


def _fmt(x) -> str:
    return repr(float(x))


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files = {}

    def write(self, name, header, rows):
        path = self.out / f"{name}.csv"
        for row in rows:
            for v in row:
                if isinstance(v, float) and not math.isfinite(v):
                    raise ComputeError(f"non-finite value in {name} output")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
        self.files[name] = path.name


def _evaluate(sc: Scenario, scene: Scene, sets, tag: str):
    """Rates and derived quantities for every (scan point, axis)."""
    cache = _GreenCache(scene)
    requests = []
    for positions in sets:
        requests += _pair_requests(positions, sc.omega)
    cache.prefetch(requests)
    grid = None
    if "dephasing" in sc.outputs:
        grid = spectrum_grid(sc.bath.dephasing_cutoff, sc.spectrum_points_per_decade, sc.spectrum_decades)
        spec_req = []
        for positions in sets:
            for w in grid:
                spec_req += _pair_requests(positions, w)
        cache.prefetch(spec_req)

    results = []
    for k, positions in enumerate(sets):
        per_axis = {}
        for ax in sc.axes:
            qubits = [QubitSpec(p, sc.omega, AXES[ax]) for p in positions]
            try:
                rates = relaxation_rates(qubits, cache, sc.bath)
                entry = {"rates": rates}
                if grid is not None:
                    spectrum = sample_spectrum(qubits, cache, grid)
                    deph = DephasingRates(qubits, spectrum, sc.bath)
                    entry["dephasing"] = [deph(t) for t in sc.dephasing_times]
                    rates = rates.with_dephasing(deph)
                if sc.gate is not None:
                    gate = GateSpec.idle(len(qubits), sc.gate["duration"])
                    gen = build_lindblad(rates, sc.bath)
                    entry["fidelity"] = gate_fidelity(gate, gen, sc.gate_dt)
                    entry["infidelity"] = (gate_fidelity(gate, zero_generator(len(qubits)), sc.gate_dt)
                                           - entry["fidelity"])
            except (InvariantError, ValueError, ArithmeticError) as exc:
                raise ComputeError(f"{tag} scan point {k} ({sc.scan_variable} = "
                                   f"{sc.scan_values[k]:.6g} m, axis {ax}): {exc}") from exc
            per_axis[ax] = entry
        results.append(per_axis)
    return results


def run_scenario(sc: Scenario, out: Path) -> dict:
    t0 = time.perf_counter()
    counters.reset()
    out.mkdir(parents=True, exist_ok=True)
    sets = _qubit_sets(sc)
    for k, positions in enumerate(sets):
        for p in positions:
            if p[2] <= 0 and sc.scene.backend == "layered":
                raise ConfigError("scan", f"scan point {k} puts a qubit at z <= 0")
    try:
        main = _evaluate(sc, sc.scene, sets, sc.scene.backend)
        ref = _evaluate(sc, sc.reference, sets, "reference") if sc.reference is not None else None
    except (VIEError, QuadratureError, MemoryError) as exc:
        raise ComputeError(str(exc)) from exc

    var = f"{sc.scan_variable}_m"
    writer = _Writer(out)
    dual = ref is not None

    def rows_for(fn, extra_ref=True):
        rows = []
        for k, v in enumerate(sc.scan_values):
            for ax in sc.axes:
                row = [float(v), ax, fn(main[k][ax])]
                if dual and extra_ref:
                    row.append(fn(ref[k][ax]))
                rows.append(row)
        return rows

    if "relaxation" in sc.outputs:
        hdr = [var, "axis", "gamma_r_per_s"] + (["gamma_r_layered_per_s"] if dual else [])
        writer.write("relaxation", hdr, rows_for(lambda e: float(e["rates"].gamma[0, 0].real)))
    if "correlation-ratio" in sc.outputs:
        hdr = [var, "axis", "ratio"] + (["ratio_layered"] if dual else [])
        writer.write("correlation_ratio", hdr,
                     rows_for(lambda e: float(e["rates"].gamma[0, 1].real / e["rates"].gamma[0, 0].real)))
    if "T1" in sc.outputs:
        hdr = [var, "axis", "T1_s"] + (["T1_layered_s"] if dual else [])

        def t1(e):
            r = e["rates"]
            return t1_from_rate(float(r.gamma[0, 0].real), float(r.nbar[0, 0]))
        try:
            writer.write("t1", hdr, rows_for(t1))
        except ValueError as exc:
            raise ComputeError(f"T1: {exc}") from exc
    if "dephasing" in sc.outputs:
        hdr = [var, "axis", "t_s", "gamma_phi_per_s"] + (["gamma_phi_layered_per_s"] if dual else [])
        rows = []
        for k, v in enumerate(sc.scan_values):
            for ax in sc.axes:
                for n, t in enumerate(sc.dephasing_times):
                    row = [float(v), ax, float(t), float(main[k][ax]["dephasing"][n][0, 0])]
                    if dual:
                        row.append(float(ref[k][ax]["dephasing"][n][0, 0]))
                    rows.append(row)
        writer.write("dephasing", hdr, rows)
    if "fidelity" in sc.outputs:
        hdr = [var, "axis", "fidelity", "infidelity"]
        rows = [[float(v), ax, float(main[k][ax]["fidelity"]), float(main[k][ax]["infidelity"])]
                for k, v in enumerate(sc.scan_values) for ax in sc.axes]
        writer.write("fidelity", hdr, rows)

    mesh = sc.scene.mesh
    summary = {
        "version": __version__,
        "config": sc.raw,
        "backend": sc.scene.backend,
        "tetCount": int(mesh.n_tets) if mesh is not None else 0,
        "unknownCount": int(build_swg_space(mesh, sc.omega).n_unknowns) if mesh is not None else 0,
        "factorizationCount": int(counters.factorizations),
        "assemblyCount": int(counters.assemblies),
        "scanPoints": int(len(sc.scan_values)),
        "outputs": writer.files,
        "wallSeconds": time.perf_counter() - t0,
    }
    if mesh is not None:
        summary["mesh"] = {"nodes": int(mesh.n_nodes), "volume_m3": float(mesh.volumes().sum()),
                           "regions": sorted(int(r) for r in np.unique(mesh.regions))}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# --------------------------------------------------------------- commands

def _cmd_run(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        sc = parse_scenario(raw)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else Path(args.config).with_suffix("").parent / "qcem_out"
    try:
        with threadpool_limits(args.threads):
            summary = run_scenario(sc, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except ComputeError as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    print(f"wrote {', '.join(sorted(summary['outputs'].values()))} and summary.json to {out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    try:
        mesh = load_mesh(args.path, args.format, validate=False)
    except (MeshError, OSError) as exc:
        print(f"invalid: {exc}")
        return EXIT_INVALID
    problems = mesh.problems()
    print(f"{args.path}: {mesh.n_nodes} nodes, {mesh.n_tets} tets, regions "
          f"{sorted(int(r) for r in np.unique(mesh.regions))}")
    if problems:
        for p in problems:
            print(f"  violation: {p}")
        return EXIT_INVALID
    print("  ok: all mesh invariants hold")
    return EXIT_OK


def _point(text: str, flag: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(flag, f"cannot parse {text!r} as x,y,z") from None
    if v.shape != (3,):
        raise ConfigError(flag, "expected three comma-separated numbers")
    return v


def tensor_json(sample: GreenSample, backend: str) -> dict:
    """Serializable form of a sample (physics convention)."""
    T = sample.physics
    out = {
        "backend": backend,
        "provenance": sample.provenance.value,
        "convention": "physics",
        "r_i_m": [float(x) for x in sample.r_i],
        "r_j_m": [float(x) for x in sample.r_j],
        "omega_rad_per_s": float(sample.omega),
        "tensor_real_per_m": [[float(x) for x in row] for row in T.real],
        "tensor_imag_per_m": [[float(x) for x in row] for row in T.imag],
    }
    if sample.coincident:
        margin = psd_margin(T.imag)
        out["psd_check"] = {"min_eig_ratio": margin, "passed": bool(margin >= -1e-8)}
    return out


def _cmd_greens(args) -> int:
    try:
        ri = _point(args.ri, "--ri")
        rj = _point(args.rj, "--rj")
        if not args.freq_hz > 0:
            raise ConfigError("--freq-hz", "must be > 0")
        mat = Material("film", args.sigma, args.eps_r)
        if args.backend == "layered":
            if args.film is None:
                raise ConfigError("--film", "layered backend needs --film THICKNESS_M (or inf)")
            scene = Scene(stack=LayeredStack(float(args.film), mat))
        else:
            if args.mesh is None:
                raise ConfigError("--mesh", "vie backend needs --mesh FILE")
            mesh = load_mesh(args.mesh, args.format)
            if args.sigma_set:
                mesh = mesh.with_materials({int(r): mat for r in np.unique(mesh.regions)})
            scene = Scene(mesh=mesh)
    except (ConfigError, MeshError, OSError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(args.threads):
            sample = green_scan(scene, [(ri, rj)], [2 * math.pi * args.freq_hz])[0]
    except (VIEError, QuadratureError, MemoryError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(tensor_json(sample, args.backend), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcem", description="Magnetic noise near lossy nanostructures")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("validate-mesh", help="check mesh invariants")
    v.add_argument("path")
    v.add_argument("--format", default="qem-ascii", choices=["qem-ascii", "msh22"])
    v.set_defaults(func=_cmd_validate)

    g = sub.add_parser("greens", help="print one reflected Green tensor as JSON")
    g.add_argument("--backend", required=True, choices=["vie", "layered"])
    g.add_argument("--mesh")
    g.add_argument("--format", default="qem-ascii", choices=["qem-ascii", "msh22"])
    g.add_argument("--film", help="film thickness in m (or inf)")
    g.add_argument("--sigma", type=float, default=None, help="conductivity S/m")
    g.add_argument("--eps-r", type=float, default=1.0)
    g.add_argument("--ri", required=True, help="x,y,z in m")
    g.add_argument("--rj", required=True, help="x,y,z in m")
    g.add_argument("--freq-hz", type=float, required=True)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=_cmd_greens)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "greens":
        args.sigma_set = args.sigma is not None
        if args.sigma is None:
            args.sigma = 0.0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
