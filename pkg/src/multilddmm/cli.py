"""Command line driver: ``register``, ``markers`` and ``synth``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataterm, flow, geom, io, markers, multishape, optim, synth
from .kernel import KernelSpec

logger = logging.getLogger("multilddmm")

EXIT_OK, EXIT_INPUT, EXIT_MAX_ITER, EXIT_INFEASIBLE = 0, 1, 2, 3

_MULTI_MODES = {"multi-identity": "identity", "multi-sliding": "sliding", "multi-none": "none"}


def _data_terms(cfg: io.RunConfig, templates, targets, weight):
    terms = []
    for k, (s, t) in enumerate(zip(templates, targets)):
        if cfg.data_term == "current":
            terms.append(dataterm.CurrentTerm(s.faces, t, KernelSpec(cfg.kernels.data), weight))
        else:
            if t.n_vertices != s.n_vertices:
                raise io.ConfigError("landmark data term needs equal vertex counts (shape %d: %d vs %d)"
                                     % (k, s.n_vertices, t.n_vertices))
            terms.append(dataterm.LandmarkTerm(t.vertices, weight))
    return terms


def compute_markers(flows) -> dict:
    """Marker fields for every flow, keyed by flow name.

    Each flow dict needs ``sigma``, ``mesh0`` and ``controls``; trajectories
    are re-integrated from the controls.
    """
    out = {}
    for fl in flows:
        spec = KernelSpec(fl["sigma"])
        traj = flow.shoot(spec, fl["mesh0"].vertices, fl["controls"])
        out[fl["name"]] = markers.shape_markers(spec, fl["mesh0"], traj, traj, fl["controls"])
    return out


def _status_code(status: str) -> int:
    if status in ("converged", "stalled"):
        return EXIT_OK
    if status == "infeasible":
        return EXIT_INFEASIBLE
    return EXIT_MAX_ITER


def run_registration(cfg: io.RunConfig, config_source=None):
    """Run one registration and write its artifacts.

    Returns ``(exit_code, info)``; ``info`` holds the run summary that is
    also stored in the manifest, plus the in-memory flows.
    """
    templates = [io.read_off(p) for p in cfg.templates]
    targets = [io.read_off(p) for p in cfg.targets]
    for path, m in zip(cfg.templates + cfg.targets, templates + targets):
        if m.n_faces == 0:
            raise io.ConfigError("%s has no faces" % path)
    cx = geom.MultiShapeComplex(templates)
    sigmas = cfg.shape_sigmas()
    T = cfg.T
    nlcg_cfg = cfg.nlcg_config()
    al_cfg = cfg.al_config()
    trace = []
    info = {"mode": cfg.mode}

    if cfg.mode == "single":
        union = cx.background_mesh()
        target_union = geom.MultiShapeComplex(targets).background_mesh()
        term = _data_terms(cfg, [union], [target_union], cfg.data_weight)[0]
        spec = KernelSpec(sigmas[0])
        prob = flow.SingleFlowProblem(spec, union.vertices, term, T)
        fun = prob.objective if cfg.grad_mode == "hilbert" else (lambda u: prob.objective(u)[:2])
        f0, g0, _ = prob.objective(prob.zero_controls().ravel())
        gtol = al_cfg.inner_tol_final * (float(np.linalg.norm(g0)) or 1.0)

        def record(k, x, f, gnorm, step):
            trace.append({"outer": 0, "inner": k, "objective": f, "grad_norm": gnorm, "mu": None, "step_len": step})

        res = optim.nlcg_minimize(fun, prob.zero_controls().ravel(), nlcg_cfg, gtol_abs=gtol, callback=record)
        if res.status == "aborted":
            raise optim.InnerSolverError(res.message)
        alpha = res.x.reshape(prob.shape)
        traj = flow.shoot(spec, union.vertices, alpha)
        flows = [{"name": "single", "kind": "single", "sigma": spec.sigma, "faces": union.faces,
                  "traj": traj, "controls": alpha, "mesh0": union}]
        status = res.status
        info.update(data_initial=term.cost(union.vertices), data_final=term.cost(traj[-1]))
    else:
        mode = _MULTI_MODES[cfg.mode]
        sterms = _data_terms(cfg, templates, targets, cfg.data_weight)
        bterms = _data_terms(cfg, templates, targets, cfg.background_data_weight)
        prob = multishape.MultiShapeProblem(cx, [KernelSpec(s) for s in sigmas], KernelSpec(cfg.kernels.background),
                                            sterms, bterms, T=T, mode=mode)
        if mode == "none":
            def fun(u):
                f, g, h = prob.objective(u, None)
                return (f, g, h) if cfg.grad_mode == "hilbert" else (f, g)

            u0 = prob.zero_controls().ravel()
            gtol = al_cfg.inner_tol_final * (float(np.linalg.norm(prob.objective(u0, None)[1])) or 1.0)

            def record(k, x, f, gnorm, step):
                trace.append({"outer": 0, "inner": k, "objective": f, "grad_norm": gnorm, "mu": None,
                              "step_len": step})

            res = optim.nlcg_minimize(fun, u0, nlcg_cfg, gtol_abs=gtol, callback=record)
            if res.status == "aborted":
                raise optim.InnerSolverError(res.message)
            u, status = res.x, res.status
        else:
            res = optim.al_solve(prob, al_cfg, nlcg_cfg, grad_mode=cfg.grad_mode)
            trace = res.trace
            u, status = res.x, res.status
            if res.message:
                info["message"] = res.message
            info["outer_iterations"] = len(res.outer)
        ctrl = prob.unflatten(u)
        state = prob.forward(ctrl)
        C = prob.residual(ctrl, state)
        if mode != "none":
            info.update(constraint_inf_norm=prob.constraint_norm(C), constraint_scale=prob.constraint_scale,
                        constraint_tol=al_cfg.constraint_tol * prob.constraint_scale)
        info.update(data_initial=prob.data_value(prob.zero_controls()), data_final=prob.data_value(ctrl))
        bg = cx.background_mesh()
        flows = [{"name": "shape_%d" % k, "kind": "shape", "sigma": sigmas[k], "faces": s.faces,
                  "traj": state.x[k], "controls": ctrl.alphas[k], "mesh0": s} for k, s in enumerate(templates)]
        flows.append({"name": "background", "kind": "background", "sigma": cfg.kernels.background,
                      "faces": bg.faces, "traj": state.z, "controls": ctrl.beta, "mesh0": bg})

    code = _status_code(status)
    info.update(status=status, exit_code=code)
    fields = compute_markers(flows)
    cfg_copy = config_source if config_source is not None else cfg.model_dump()
    io.write_run_artifacts(cfg.output_dir, flows, trace, fields, cfg_copy, info)
    info["flows"] = flows
    info["fields"] = fields
    return code, info


def cmd_register(args) -> int:
    try:
        cfg = io.read_config(args.config)
    except (io.ConfigError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    if args.out:
        cfg = cfg.model_copy(update={"output_dir": args.out})
    try:
        code, info = run_registration(cfg, args.config)
    except (io.ConfigError, io.FormatError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    except (optim.InnerSolverError, flow.FlowDivergenceError, np.linalg.LinAlgError) as e:
        print("error: optimization failed: %s" % e, file=sys.stderr)
        return EXIT_MAX_ITER
    msg = "%s: status %s, data term %.6g -> %.6g" % (cfg.mode, info["status"], info["data_initial"], info["data_final"])
    if "constraint_inf_norm" in info:
        msg += ", max constraint %.3e (tol %.3e)" % (info["constraint_inf_norm"], info["constraint_tol"])
    print(msg)
    if info.get("message"):
        print(info["message"], file=sys.stderr)
    print("artifacts in %s" % cfg.output_dir)
    return code


def cmd_markers(args) -> int:
    try:
        manifest, flows = io.read_run(args.rundir)
        fields = compute_markers(flows)
        for fl in flows:
            path = Path(args.rundir) / fl["name"] / "final.vtk"
            mesh, old = io.read_vtk(path)
            names = {f.name for f in fields[fl["name"]]}
            keep = [f for f in old if f.name not in names]
            io.write_vtk_polydata(path, mesh, keep + fields[fl["name"]])
    except (io.FormatError, markers.MarkerError, OSError, ValueError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    for name, fs in fields.items():
        print(name + ": " + ", ".join("%s in [%.4g, %.4g]" % (f.name, f.values.min(), f.values.max())
                                      for f in fs if f.location == "vertex"))
    return EXIT_OK


def cmd_synth(args) -> int:
    if not 0 <= args.level <= 4:
        print("error: --level must lie in [0, 4]", file=sys.stderr)
        return EXIT_INPUT
    try:
        tmpl, tgt = synth.two_balls(level=args.level, radius=args.radius, separation=args.separation,
                                    growth=args.growth, overlap=args.overlap)
    except ValueError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for tag, meshes in (("template", tmpl), ("target", tgt)):
        for k, m in zip("ab", meshes):
            io.write_off(out / ("%s_%s.off" % (tag, k)), m)
            names.append("%s_%s.off" % (tag, k))
    config = {"mode": "multi-identity", "templates": names[:2], "targets": names[2:], "output_dir": "run"}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    print("wrote %s and config.json to %s" % (", ".join(names), out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multilddmm", description="Multishape diffeomorphic surface registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="run a registration from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="override the output directory")
    r.set_defaults(func=cmd_register)

    m = sub.add_parser("markers", help="compute Jacobian markers for a finished run")
    m.add_argument("rundir")
    m.set_defaults(func=cmd_markers)

    s = sub.add_parser("synth", help="generate synthetic data")
    s.add_argument("name", choices=["two-balls"])
    s.add_argument("--out", required=True)
    s.add_argument("--level", type=int, default=1)
    s.add_argument("--overlap", type=float, default=0.1)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--separation", type=float, default=2.5)
    s.add_argument("--growth", type=float, default=1.4)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
