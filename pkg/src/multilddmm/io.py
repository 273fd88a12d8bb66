"""File formats and run configuration: ASCII OFF meshes, legacy VTK polydata, JSON configs, run artifacts."""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import geom, optim
from .markers import ScalarField


class FormatError(ValueError):
    """Malformed input file; the message carries the path and line number."""


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


# -- OFF ------------------------------------------------------------------------


def _content_lines(text: str):
    """Yield ``(line_number, tokens)`` for non-blank, non-comment lines."""
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if s:
            yield i, s.split()


def read_off(path) -> geom.TriMesh:
    path = Path(path)
    lines = _content_lines(path.read_text())

    def fail(lineno, msg):
        raise FormatError("%s:%s: %s" % (path, lineno, msg))

    def nxt(what):
        try:
            return next(lines)
        except StopIteration:
            fail("EOF", "unexpected end of file while reading %s" % what)

    lineno, tok = nxt("header")
    if tok[0] != "OFF":
        fail(lineno, "expected header 'OFF', got %r" % " ".join(tok))
    counts = tok[1:]
    if not counts:
        lineno, counts = nxt("counts")
    if len(counts) != 3:
        fail(lineno, "expected counts 'nV nF nE'")
    try:
        nv, nf, _ = (int(c) for c in counts)
    except ValueError:
        fail(lineno, "counts must be integers")
    if nv < 0 or nf < 0:
        fail(lineno, "negative counts")

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, tok = nxt("vertex %d" % i)
        if len(tok) != 3:
            fail(lineno, "vertex line must hold 3 coordinates, got %d" % len(tok))
        try:
            verts[i] = [float(t) for t in tok]
        except ValueError:
            fail(lineno, "bad vertex coordinate")
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        lineno, tok = nxt("face %d" % i)
        try:
            idx = [int(t) for t in tok]
        except ValueError:
            fail(lineno, "face indices must be integers")
        if idx[0] != 3:
            fail(lineno, "only triangles are supported, got a %d-gon" % idx[0])
        if len(idx) != 4:
            fail(lineno, "face line must be '3 i j k'")
        if min(idx[1:]) < 0 or max(idx[1:]) >= nv:
            fail(lineno, "face index out of range [0, %d)" % nv)
        faces[i] = idx[1:]
    for lineno, tok in lines:
        fail(lineno, "trailing data after %d faces" % nf)
    return geom.TriMesh(verts, faces)


def write_off(path, mesh) -> None:
    out = ["OFF", "%d %d 0" % (mesh.n_vertices, len(mesh.faces))]
    out += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
    out += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n")


# -- VTK ------------------------------------------------------------------------


def write_vtk_polydata(path, mesh, fields=(), title: str = "multilddmm") -> None:
    """Legacy ASCII VTK polydata with optional per-vertex and per-face scalar fields."""
    pf = [f for f in fields if f.location == "vertex"]
    cf = [f for f in fields if f.location == "face"]
    for f in fields:
        f.check_size(mesh)
        if not f.name or any(c.isspace() for c in f.name):
            raise ValueError("VTK field names must be non-empty without whitespace: %r" % f.name)
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET POLYDATA",
           "POINTS %d float" % mesh.n_vertices]
    out += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
    F = len(mesh.faces)
    out.append("POLYGONS %d %d" % (F, 4 * F))
    out += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    for header, group in (("POINT_DATA %d" % mesh.n_vertices, pf), ("CELL_DATA %d" % F, cf)):
        if group:
            out.append(header)
            for f in group:
                out += ["SCALARS %s float 1" % f.name, "LOOKUP_TABLE default"]
                out += [_fmt(x) for x in f.values]
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk(path):
    """Read files produced by :func:`write_vtk_polydata`.

    Returns ``(mesh, fields)`` with ``fields`` a list of :class:`ScalarField`.
    """
    path = Path(path)
    raw = path.read_text().splitlines()

    def fail(i, msg):
        raise FormatError("%s:%d: %s" % (path, i + 1, msg))

    if len(raw) < 5 or not raw[0].startswith("# vtk DataFile"):
        fail(0, "not a legacy VTK file")
    if raw[2].strip() != "ASCII" or raw[3].strip() != "DATASET POLYDATA":
        fail(2, "only ASCII POLYDATA is supported")
    i = 4

    def take(n, ncols, conv, what):
        nonlocal i
        rows = []
        for _ in range(n):
            if i >= len(raw):
                fail(i - 1, "unexpected end of file in %s" % what)
            tok = raw[i].split()
            if len(tok) != ncols:
                fail(i, "expected %d values in %s" % (ncols, what))
            try:
                rows.append([conv(t) for t in tok])
            except ValueError:
                fail(i, "bad number in %s" % what)
            i += 1
        return rows

    tok = raw[i].split()
    if len(tok) != 3 or tok[0] != "POINTS":
        fail(i, "expected POINTS")
    n = int(tok[1])
    i += 1
    verts = np.array(take(n, 3, float, "POINTS"), dtype=float).reshape(-1, 3)
    faces = np.zeros((0, 3), dtype=np.int64)
    fields = []
    location, size = None, 0
    while i < len(raw):
        tok = raw[i].split()
        if not tok:
            i += 1
            continue
        key = tok[0]
        if key == "POLYGONS":
            nf = int(tok[1])
            i += 1
            rows = take(nf, 4, int, "POLYGONS")
            if any(r[0] != 3 for r in rows):
                fail(i - 1, "only triangles are supported")
            faces = np.array([r[1:] for r in rows], dtype=np.int64).reshape(-1, 3)
        elif key in ("POINT_DATA", "CELL_DATA"):
            location = "vertex" if key == "POINT_DATA" else "face"
            size = int(tok[1])
            i += 1
        elif key == "SCALARS":
            if location is None:
                fail(i, "SCALARS outside a data section")
            name = tok[1]
            i += 1
            if i >= len(raw) or raw[i].split()[:1] != ["LOOKUP_TABLE"]:
                fail(i, "expected LOOKUP_TABLE")
            i += 1
            vals = np.array(take(size, 1, float, "SCALARS %s" % name)).ravel()
            fields.append(ScalarField(name, vals, location))
        else:
            fail(i, "unexpected keyword %r" % key)
    return geom.TriMesh(verts, faces), fields


# -- configuration ----------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KernelSettings(_Strict):
    shape: Union[float, List[float]] = 1.0
    background: float = 0.5
    data: float = 0.5

    @field_validator("shape")
    @classmethod
    def _shape_pos(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals or any(not s > 0 for s in vals):
            raise ValueError("kernel sigmas must be positive")
        return v

    @field_validator("background", "data")
    @classmethod
    def _pos(cls, v):
        if not v > 0:
            raise ValueError("kernel sigma must be positive")
        return v


class NlcgSettings(_Strict):
    max_iters: int = 500
    grad_tol: float = 1e-6
    restart_every: int = 100
    initial_step: float = 1.0
    c1: float = 1e-4
    c2: float = 0.1
    backtrack: float = 0.5
    max_backtracks: int = 40


class AlSettings(_Strict):
    max_outer: int = 30
    inner_tol_start: float = 1e-2
    inner_tol_final: float = 1e-4
    inner_tol_steps: int = 3
    constraint_tol: float = 1e-3
    mu0: float = 1.0
    rho_mu: float = 2.0
    decrease_required: float = 0.5
    mu_max_factor: float = 1e12
    scale_by_objective: bool = True


class RunConfig(_Strict):
    mode: Literal["single", "multi-identity", "multi-sliding", "multi-none"]
    templates: List[str] = Field(min_length=1)
    targets: List[str] = Field(min_length=1)
    kernels: KernelSettings = KernelSettings()
    data_term: Literal["current", "landmark"] = "current"
    data_weight: float = Field(1.0, ge=0)
    background_data_weight: float = Field(1.0, ge=0)
    T: int = Field(10, ge=1)
    grad_mode: Literal["hilbert", "kernel"] = "hilbert"
    optimizer: NlcgSettings = NlcgSettings()
    al: AlSettings = AlSettings()
    output_dir: str = "run"

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.templates) != len(self.targets):
            raise ValueError("templates (%d) and targets (%d) must have the same length"
                             % (len(self.templates), len(self.targets)))
        if isinstance(self.kernels.shape, list) and len(self.kernels.shape) != len(self.templates):
            raise ValueError("kernels.shape lists %d sigmas for %d shapes"
                             % (len(self.kernels.shape), len(self.templates)))
        return self

    def shape_sigmas(self) -> list:
        s = self.kernels.shape
        return list(s) if isinstance(s, list) else [s] * len(self.templates)

    def nlcg_config(self) -> optim.NlcgConfig:
        return optim.NlcgConfig(**self.optimizer.model_dump())

    def al_config(self) -> optim.AlConfig:
        return optim.AlConfig(**self.al.model_dump())


def _pointer(loc) -> str:
    return "/" + "/".join(str(p) for p in loc) if loc else "/"


def parse_config(data: dict, base_dir=None) -> RunConfig:
    """Validate a config mapping; relative paths are resolved against ``base_dir``."""
    try:
        cfg = RunConfig.model_validate(data)
        cfg.nlcg_config()
        cfg.al_config()
    except ValidationError as e:
        msgs = ["%s: %s" % (_pointer(err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError("invalid config: " + "; ".join(msgs)) from None
    except ValueError as e:
        raise ConfigError("invalid config: %s" % e) from None
    if base_dir is not None:
        base = Path(base_dir)

        def fix(p):
            return str(p if os.path.isabs(p) else base / p)

        cfg = cfg.model_copy(update={
            "templates": [fix(p) for p in cfg.templates],
            "targets": [fix(p) for p in cfg.targets],
            "output_dir": fix(cfg.output_dir),
        })
    return cfg


def read_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("%s:%d: invalid JSON: %s" % (path, e.lineno, e.msg)) from None
    if not isinstance(data, dict):
        raise ConfigError("%s: top-level JSON value must be an object" % path)
    return parse_config(data, path.parent)


# -- run artifacts -----------------------------------------------------------------


MANIFEST = "manifest.json"


def write_controls(path, arr) -> dict:
    """Raw little-endian float64 dump in C (t-major) order; returns its manifest entry."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    Path(path).write_bytes(arr.tobytes())
    return {"file": Path(path).name, "dims": list(arr.shape), "dtype": "float64", "ordering": "t-major"}


def read_controls(path, entry) -> np.ndarray:
    dims = entry.get("dims")
    if not isinstance(dims, list) or not all(isinstance(d, int) and d >= 0 for d in dims):
        raise FormatError("%s: manifest field 'dims' must be a list of non-negative integers" % path)
    raw = Path(path).read_bytes()
    need = 8 * int(np.prod(dims))
    if len(raw) != need:
        raise FormatError("%s: %d bytes on disk but manifest 'dims' %s requires %d" % (path, len(raw), dims, need))
    return np.frombuffer(raw, dtype="<f8").reshape(dims).copy()


def write_run_artifacts(outdir, flows, trace, fields=None, config=None, info=None) -> Path:
    """Write all outputs of one registration run.

    ``flows`` is a list of dicts with keys ``name``, ``kind`` (``"shape"``,
    ``"background"`` or ``"single"``), ``sigma``, ``faces``, ``traj``
    (``(T+1, n, 3)``) and ``controls`` (``(T, n, 3)``). ``fields`` maps a
    flow name to the scalar fields attached to its final mesh. Layout::

        <outdir>/<name>/template_t{t}.vtk   deformed mesh at every time step
        <outdir>/<name>/final.vtk           final mesh with marker fields
        <outdir>/controls/<name>.bin        momenta, float64, t-major
        <outdir>/manifest.json
        <outdir>/trace.csv
        <outdir>/config.json                copy of the run config
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "controls").mkdir(exist_ok=True)
    fields = fields or {}
    entries = []
    T = None
    for fl in flows:
        name = fl["name"]
        traj = np.asarray(fl["traj"], dtype=float)
        ctrl = np.asarray(fl["controls"], dtype=float)
        T = len(ctrl)
        if traj.shape != (T + 1,) + ctrl.shape[1:]:
            raise ValueError("flow %r: trajectory shape %s does not match controls %s" % (name, traj.shape, ctrl.shape))
        d = out / name
        d.mkdir(exist_ok=True)
        for t in range(T + 1):
            write_vtk_polydata(d / ("template_t%d.vtk" % t), geom.TriMesh(traj[t], fl["faces"]))
        write_vtk_polydata(d / "final.vtk", geom.TriMesh(traj[-1], fl["faces"]), fields.get(name, ()))
        entry = write_controls(out / "controls" / (name + ".bin"), ctrl)
        entry["file"] = "controls/" + entry["file"]
        entries.append({"name": name, "kind": fl["kind"], "sigma": float(fl["sigma"]), "controls": entry})
    manifest = {"T": T, "ordering": "t-major", "flows": entries}
    if info:
        manifest.update(info)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    optim.write_trace(out / "trace.csv", trace)
    if config is not None:
        if isinstance(config, (str, Path)):
            shutil.copyfile(config, out / "config.json")
        else:
            (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return out


def read_run(outdir):
    """Load the manifest, template meshes and controls of a run directory.

    Returns ``(manifest, flows)`` where each flow dict has ``name``, ``kind``,
    ``sigma``, ``mesh0`` and ``controls``.
    """
    out = Path(outdir)
    mpath = out / MANIFEST
    if not mpath.is_file():
        raise FormatError("%s: missing run manifest" % mpath)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError("%s:%d: corrupted manifest: %s" % (mpath, e.lineno, e.msg)) from None
    if not isinstance(manifest, dict):
        raise FormatError("%s: manifest must be a JSON object" % mpath)
    T = manifest.get("T")
    if not isinstance(T, int) or T < 1:
        raise FormatError("%s: manifest field 'T' must be a positive integer" % mpath)
    entries = manifest.get("flows")
    if not isinstance(entries, list) or not entries:
        raise FormatError("%s: manifest field 'flows' must be a non-empty list" % mpath)
    flows = []
    for i, e in enumerate(entries):
        for key in ("name", "kind", "sigma", "controls"):
            if not isinstance(e, dict) or key not in e:
                raise FormatError("%s: manifest field 'flows/%d/%s' is missing" % (mpath, i, key))
        c = e["controls"]
        if not isinstance(c, dict) or "file" not in c:
            raise FormatError("%s: manifest field 'flows/%d/controls/file' is missing" % (mpath, i))
        ctrl = read_controls(out / c["file"], c)
        if ctrl.ndim != 3 or ctrl.shape[0] != T or ctrl.shape[2] != 3:
            raise FormatError("%s: manifest field 'flows/%d/controls/dims' must be [T, n, 3]" % (mpath, i))
        mesh0, _ = read_vtk(out / e["name"] / "template_t0.vtk")
        if mesh0.n_vertices != ctrl.shape[1]:
            raise FormatError("%s: flow %r has %d vertices but %d control rows"
                              % (mpath, e["name"], mesh0.n_vertices, ctrl.shape[1]))
        flows.append({"name": e["name"], "kind": e["kind"], "sigma": float(e["sigma"]),
                      "mesh0": mesh0, "controls": ctrl})
    return manifest, flows
