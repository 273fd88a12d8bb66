import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from multilddmm import kernel
from multilddmm.kernel import KernelSolveError, KernelSpec

S1 = KernelSpec(1.0)
vec = arrays(np.float64, 3, elements=st.floats(-2, 2, allow_nan=False))
sigmas = st.floats(0.3, 3.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(0.0)
    with pytest.raises(ValueError):
        KernelSpec(-1.0)
    with pytest.raises(ValueError):
        KernelSpec(1.0, family="cauchy")
    assert KernelSpec(0.7).G(0.0) == 1.0


def test_eval_closed_forms():
    x = np.array([0.3, -1.0, 2.0])
    assert kernel.eval(S1, x, x) == 1.0
    y = x + np.array([np.sqrt(2.0), 0, 0])
    assert kernel.eval(S1, x, y) == pytest.approx(0.36787944117144233, rel=1e-15)
    assert kernel.eval(S1, x, x + [10.0, 0, 0]) <= np.exp(-50)


@given(vec, vec, vec, vec, sigmas)
def test_grad1_dot_formula_and_antisymmetry(x, y, n, a, s):
    spec = KernelSpec(s)
    d = x - y
    expect = 2 * spec.dG(d @ d) * (n @ a) * d
    np.testing.assert_allclose(kernel.grad1_dot(spec, x, y, n, a), expect, rtol=0, atol=1e-15)
    np.testing.assert_allclose(kernel.grad1_dot(spec, y, x, n, a), -expect, rtol=0, atol=1e-15)


def test_grad1_dot_zero_cases(rng):
    x, n = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_array_equal(kernel.grad1_dot(S1, x, x, n, rng.normal(size=3)), 0)
    a = np.cross(n, rng.normal(size=3))
    np.testing.assert_allclose(kernel.grad1_dot(S1, x, x + 1, n, a), 0, atol=1e-16)


@given(vec, vec, vec, vec, sigmas)
def test_grad1_dot_bilinear(x, y, n, a, s):
    spec = KernelSpec(s)
    g = kernel.grad1_dot(spec, x, y, n, a)
    np.testing.assert_allclose(kernel.grad1_dot(spec, x, y, 2 * n, -3 * a), -6 * g, atol=1e-13)


def test_grad1_dot_matches_finite_difference(rng):
    for _ in range(20):
        x, y, n, a = rng.normal(size=(4, 3))
        fd = central_diff(lambda p: n @ (kernel.eval(S1, p, y) * a), x)
        assert rel_err(kernel.grad1_dot(S1, x, y, n, a), fd) <= 1e-7


def test_gram_single_point_and_symmetry(rng):
    np.testing.assert_array_equal(kernel.gram(S1, [[1.0, 2.0, 3.0]]), [[1.0]])
    p = rng.normal(size=(12, 3))
    K = kernel.gram(S1, p)
    assert np.abs(K - K.T).max() <= 1e-14
    perm = rng.permutation(12)
    np.testing.assert_allclose(kernel.gram(S1, p[perm]), K[np.ix_(perm, perm)], rtol=0, atol=1e-15)


def test_gram_entries_match_eval(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    K = kernel.gram(KernelSpec(0.8), a, b)
    ref = [[kernel.eval(KernelSpec(0.8), p, q) for q in b] for p in a]
    np.testing.assert_allclose(K, ref, rtol=1e-13, atol=1e-15)


def test_gram_spd_random_sets(rng):
    for _ in range(10):
        np.linalg.cholesky(kernel.gram(S1, rng.normal(size=(10, 3))))


def test_rkhs_norm_matches_double_loop(rng):
    p, a = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    v = kernel.apply(S1, p, p, a)
    direct = sum(a[i] @ a[j] * kernel.eval(S1, p[i], p[j]) for i in range(8) for j in range(8))
    assert float(np.sum(a * v)) == pytest.approx(direct, rel=1e-12)
    assert direct >= 0


def test_apply_examples(rng):
    s, a = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    np.testing.assert_allclose(kernel.apply(S1, s, s, a), a, rtol=0, atol=0)
    src = rng.normal(size=(6, 3))
    np.testing.assert_array_equal(kernel.apply(S1, rng.normal(size=(4, 3)), src, np.zeros((6, 3))), 0)
    t, m = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    np.testing.assert_allclose(kernel.apply(S1, t, src, m), kernel.gram(S1, t, src) @ m, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        kernel.apply(S1, t, src, m[:5])


def test_apply_vjp_matches_finite_difference(rng):
    y, s, m, w = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    spec = KernelSpec(0.9)
    gy, gs, gm = kernel.apply_vjp(spec, y, s, m, w)
    assert rel_err(gy, central_diff(lambda p: np.sum(w * kernel.apply(spec, p, s, m)), y)) <= 1e-7
    assert rel_err(gs, central_diff(lambda p: np.sum(w * kernel.apply(spec, y, p, m)), s)) <= 1e-7
    assert rel_err(gm, central_diff(lambda p: np.sum(w * kernel.apply(spec, y, s, p)), m)) <= 1e-7


def test_jacobian_matches_finite_difference(rng):
    src, mom, x = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(3, 3))
    J = kernel.jacobian(S1, x, src, mom)
    for i in range(3):
        for b in range(3):
            e = np.zeros(3)
            e[b] = 1e-5
            fd = (kernel.apply(S1, [x[i] + e], src, mom) - kernel.apply(S1, [x[i] - e], src, mom))[0] / 2e-5
            np.testing.assert_allclose(J[i, :, b], fd, rtol=0, atol=1e-9)


def test_divergence_examples(rng):
    s, a = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert kernel.divergence(S1, s[0], s, a) == 0.0
    x = s[0] + np.array([1.0, 0, 0])
    assert kernel.divergence(S1, x, s, np.array([[0.0, 1.0, -2.0]])) == 0.0
    with pytest.raises(ValueError):
        kernel.divergence(S1, x, s, np.zeros((2, 3)))


def test_divergence_is_jacobian_trace(rng):
    for _ in range(10):
        src, mom, x = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=3)
        tr = 0.0
        for b in range(3):
            e = np.zeros(3)
            e[b] = 1e-5
            tr += (kernel.apply(S1, [x + e], src, mom) - kernel.apply(S1, [x - e], src, mom))[0, b] / 2e-5
        assert abs(kernel.divergence(S1, x, src, mom) - tr) <= 1e-6 * max(abs(tr), 1.0)
    xs = rng.normal(size=(4, 3))
    np.testing.assert_allclose(kernel.divergence(S1, xs, src, mom), [kernel.divergence(S1, p, src, mom) for p in xs])


def test_solve_round_trip_and_single_point(rng):
    p, w0 = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
    w = kernel.solve(S1, p, kernel.gram(S1, p) @ w0)
    np.testing.assert_allclose(w, w0, rtol=0, atol=1e-8)
    rhs = rng.normal(size=(1, 3))
    np.testing.assert_allclose(kernel.solve(S1, rng.normal(size=(1, 3)), rhs), rhs)


def test_solve_near_duplicates_uses_jitter(rng):
    p = rng.normal(size=(20, 3))
    p = np.vstack([p, p[0] + [1e-9, 0, 0]])
    K = kernel.gram(S1, p)
    rhs = K @ rng.normal(size=(21, 3))
    w, jitter = kernel.solve(S1, p, rhs, return_jitter=True)
    assert jitter > 0
    assert np.linalg.norm(K @ w - rhs) <= 1e-6 * np.linalg.norm(rhs)


def test_solve_exact_duplicates_are_regularized():
    w, jitter = kernel.solve(S1, np.zeros((3, 3)), np.ones((3, 3)), return_jitter=True)
    assert jitter > 0
    np.testing.assert_allclose(w.sum(axis=0), 1.0, rtol=1e-6)


def test_solve_fails_loudly_when_unfactorizable():
    p = np.array([[0.0, 0, 0], [np.nan, 0, 0]])
    with pytest.raises(KernelSolveError, match="singular"):
        kernel.solve(S1, p, np.ones((2, 3)))
