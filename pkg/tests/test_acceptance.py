"""End-to-end acceptance checks, one test per criterion.

Every test records a one-line verdict in ``RESULTS``; the conftest hook prints
them after the run. The long registrations share module-scoped fixtures.
"""

import time

import numpy as np
import pytest

from conftest import central_diff, rel_err, unit_right_triangle
from multilddmm import cli, dataterm, flow, geom, io, kernel, markers, multishape, optim, synth
from multilddmm.kernel import KernelSpec
from test_markers import _vj_vs_fd
from test_multishape import identity_problem, random_al, random_ctrl, sliding_problem

RESULTS = {}


def report(n, ok, detail):
    line = "criterion %2d: %s  %s" % (n, "PASS" if ok else "FAIL", detail)
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- shared two-ball registrations ---------------------------------------------


@pytest.fixture(scope="module")
def two_balls(tmp_path_factory):
    d = tmp_path_factory.mktemp("two_balls")
    assert cli.main(["synth", "two-balls", "--out", str(d), "--level", "1"]) == 0
    return io.read_config(d / "config.json")


def _run(cfg, mode):
    t0 = time.perf_counter()
    code, info = cli.run_registration(cfg.model_copy(update={"mode": mode, "output_dir": cfg.output_dir + "_" + mode}))
    info["elapsed"] = time.perf_counter() - t0
    info["code"] = code
    info["by_name"] = {fl["name"]: fl for fl in info["flows"]}
    return info


@pytest.fixture(scope="module")
def identity_run(two_balls):
    return _run(two_balls, "multi-identity")


@pytest.fixture(scope="module")
def sliding_run(two_balls):
    return _run(two_balls, "multi-sliding")


@pytest.fixture(scope="module")
def single_run(two_balls):
    return _run(two_balls, "single")


def _bbox_diag(info):
    v = info["by_name"]["background"]["mesh0"].vertices
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


# -- criteria --------------------------------------------------------------------


def test_criterion_01_unconstrained_gradient():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        T = int(rng.integers(5, 11))
        spec = KernelSpec(rng.uniform(0.5, 2.0))
        if i % 4 == 3:
            tri = unit_right_triangle()
            q0 = tri.vertices
            data = dataterm.CurrentTerm(tri.faces, tri.with_vertices(1.3 * tri.vertices + 0.2), KernelSpec(0.5))
        else:
            m = int(rng.integers(3, 9))
            q0 = rng.normal(size=(m, 3))
            data = dataterm.LandmarkTerm(q0 + rng.normal(size=(m, 3)))
        alpha = 0.3 * rng.normal(size=(T, len(q0), 3))
        g = flow.adjoint_grad(spec, q0, alpha, data, mode="kernel")
        fd = central_diff(lambda a: flow.reduced_cost(spec, q0, a, data), alpha)
        worst = max(worst, rel_err(g, fd))
    el = time.perf_counter() - t0
    report(1, worst <= 1e-6 and el < 10, "max rel err %.2e over 20 instances, %.1f s" % (worst, el))


def test_criterion_02_constrained_gradient():
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = {}
    for mode in ("identity", "sliding"):
        worst[mode] = 0.0
        for i in range(4):
            prob = identity_problem(rng, T=5, data=("landmark", "current")[i % 2]) if mode == "identity" \
                else sliding_problem(rng, T=5)
            ctrl, al = random_ctrl(prob, rng), random_al(prob, rng)
            g = prob.al_gradient(ctrl, al, "kernel").ravel()
            fd = central_diff(lambda u: prob.al_objective(prob.unflatten(u), al), ctrl.ravel())
            worst[mode] = max(worst[mode], rel_err(g, fd))
    el = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-6 and el < 30
    report(2, ok, "identity %.2e, sliding %.2e, %.1f s" % (worst["identity"], worst["sliding"], el))


def test_criterion_03_current_gradient():
    rng = np.random.default_rng(103)
    chi = KernelSpec(0.7)
    t0 = time.perf_counter()
    errs = []
    for level in (0, 1, 2):
        m = geom.icosphere(level)
        q = m.with_vertices(m.vertices + 0.1 * rng.normal(size=m.vertices.shape))
        tgt = geom.icosphere(level, 1.3, (0.2, 0, 0))
        g = dataterm.current_grad(q, tgt, chi)
        fd = central_diff(lambda v: dataterm.current_cost(q.with_vertices(v), tgt, chi), q.vertices)
        errs.append(rel_err(g, fd))
    el = time.perf_counter() - t0
    report(3, max(errs) <= 1e-6 and el < 30, "rel err per level %s, %.1f s" % (["%.1e" % e for e in errs], el))


def test_criterion_04_kernel_properties():
    rng = np.random.default_rng(104)
    spec = KernelSpec(1.0)
    t0 = time.perf_counter()
    for _ in range(50):
        np.linalg.cholesky(kernel.gram(spec, rng.normal(size=(100, 3))))
    e_grad = e_div = 0.0
    for _ in range(20):
        x, y, n, a = rng.normal(size=(4, 3))
        fd = central_diff(lambda p: n @ (kernel.eval(spec, p, y) * a), x)
        e_grad = max(e_grad, rel_err(kernel.grad1_dot(spec, x, y, n, a), fd))
        src, mom, p = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=3)
        tr = sum(central_diff(lambda z: kernel.apply(spec, z[None], src, mom)[0, b], p)[b] for b in range(3))
        e_div = max(e_div, abs(kernel.divergence(spec, p, src, mom) - tr) / max(abs(tr), 1.0))
    el = time.perf_counter() - t0
    ok = e_grad <= 1e-6 and e_div <= 1e-6 and el < 10
    report(4, ok, "50 Grams SPD, grad1_dot %.1e, divergence %.1e, %.1f s" % (e_grad, e_div, el))


def test_criterion_05_hamiltonian_constancy():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(5, 3))
    tgt = q + 0.5 * rng.normal(size=(5, 3))
    spec = KernelSpec(1.0)
    t0 = time.perf_counter()
    prob = flow.SingleFlowProblem(spec, q, dataterm.LandmarkTerm(tgt), T=30)
    res = optim.nlcg_minimize(prob.objective, prob.zero_controls().ravel(),
                              optim.NlcgConfig(max_iters=5000, grad_tol=1e-6))
    a = res.x.reshape(prob.shape)
    x = flow.shoot(spec, q, a)
    H = np.array([flow.hamiltonian(spec, x[t], a[t]) for t in range(30)])
    spread = (H.max() - H.min()) / H.mean()
    el = time.perf_counter() - t0
    ok = res.converged and spread <= 1e-2 and el < 60
    report(5, ok, "%s after %d iterations, H spread %.2e of mean, %.1f s" % (res.status, res.n_iter, spread, el))


def test_criterion_06_identity_convergence(identity_run):
    r = identity_run
    res = r["constraint_inf_norm"] / _bbox_diag(r)
    data = r["data_final"] / r["data_initial"]
    ok = r["code"] == 0 and res <= 1e-3 and data <= 0.05 and r["elapsed"] <= 600
    report(6, ok, "%s, residual %.1e x bbox, data %.2f%% of initial, %.0f s"
           % (r["status"], res, 100 * data, r["elapsed"]))


def test_criterion_07_sliding_convergence(sliding_run):
    r = sliding_run
    L = _bbox_diag(r)
    res = r["constraint_inf_norm"] / (L**2 * (L / 10))
    data = r["data_final"] / r["data_initial"]
    ok = r["code"] == 0 and res <= 1e-3 and data <= 0.05 and r["elapsed"] <= 900
    report(7, ok, "%s, residual %.1e x L^2 v, data %.2f%% of initial, %.0f s"
           % (r["status"], res, 100 * data, r["elapsed"]))


def test_criterion_08_sliding_is_used():
    tmpl, tgt = synth.concentric_spheres(level=1)
    cx = geom.MultiShapeComplex(tmpl)
    prob = multishape.MultiShapeProblem(cx, [KernelSpec(1.0)] * 2, KernelSpec(0.5),
                                        [dataterm.LandmarkTerm(t.vertices) for t in tgt],
                                        [dataterm.LandmarkTerm(t.vertices) for t in tmpl], T=10, mode="sliding")
    res = optim.al_solve(prob)
    ctrl = prob.unflatten(res.x)
    x = prob.forward(ctrl).x[0]
    faces = tmpl[0].faces
    tan = nor = 0.0
    for t in range(prob.T):
        d = x[t + 1] - x[t]
        N, _ = geom.normals_centers(x[t], faces)
        vn = np.zeros_like(x[t])
        for s in range(3):
            np.add.at(vn, faces[:, s], N)
        vn /= np.linalg.norm(vn, axis=1)[:, None]
        dn = np.einsum("ik,ik->i", d, vn)
        nor += np.abs(dn).sum()
        tan += np.linalg.norm(d - dn[:, None] * vn, axis=1).sum()
    resid = prob.constraint_norm(prob.residual(ctrl)) / prob.constraint_scale
    ok = res.status == "converged" and resid <= 1e-3 and tan > 10 * nor
    report(8, ok, "%s, residual %.1e x L^2 v, tangential/normal displacement %.1f" % (res.status, resid, tan / nor))


def test_criterion_09_markers(identity_run):
    # identity flow
    rng = np.random.default_rng(109)
    m = geom.icosphere(2)
    m = m.with_vertices(m.vertices * (1 + 0.05 * rng.uniform(size=(m.n_vertices, 1))))
    a = np.zeros((5, m.n_vertices, 3))
    spec = KernelSpec(0.7)
    x = flow.shoot(spec, m.vertices, a)
    dev = max(np.abs(f.values - 1).max() for f in markers.shape_markers(spec, m, x, x, a))
    # volume Jacobian against the finite-difference determinant
    fd_err = max(_vj_vs_fd(rng, 0.2) for _ in range(10))
    # background normal Jacobian is lowest in the gap between the balls
    bg = identity_run["by_name"]["background"]["mesh0"].vertices
    nj = identity_run["fields"]["background"][2].values
    n0 = len(identity_run["by_name"]["shape_0"]["mesh0"].vertices)
    ca, cb = bg[:n0].mean(axis=0), bg[n0:].mean(axis=0)
    ax = (cb - ca) / np.linalg.norm(cb - ca)
    cos = np.r_[(bg[:n0] - ca) @ ax / np.linalg.norm(bg[:n0] - ca, axis=1),
                -(bg[n0:] - cb) @ ax / np.linalg.norm(bg[n0:] - cb, axis=1)]
    gap, far = nj[cos > 0.5].min(), nj[cos < -0.5].min()
    ok = dev <= 1e-6 and fd_err <= 1e-2 and gap < far
    report(9, ok, "identity deviation %.1e, volume vs FD det %.1e, normal Jacobian min gap %.3f < far %.3f"
           % (dev, fd_err, gap, far))


def test_criterion_10_single_flow_compresses_more(identity_run, single_run):
    nb_multi = identity_run["fields"]["shape_1"][2].values
    n0 = len(identity_run["by_name"]["shape_0"]["mesh0"].vertices)
    nb_single = single_run["fields"]["single"][2].values[n0:]
    s_multi, s_single = nb_multi.max() / nb_multi.min(), nb_single.max() / nb_single.min()
    report(10, s_single > s_multi, "ball B normal Jacobian spread: single flow %.2f > shape flow %.2f"
           % (s_single, s_multi))


def test_criterion_11_substitutes_present():
    # no published numbers exist for the figures; criteria 6 to 10 are the ordering checks that stand in
    names = {k for k in globals() if k.startswith("test_criterion_")}
    have = all(any(n.startswith("test_criterion_%02d" % k) for n in names) for k in range(6, 11))
    report(11, have, "figures checked through criteria 6-10 (ordering and invariant checks)")
