import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rel_err
from tmm import toeplitz as T
from tmm.toeplitz import ContextExhaustedError, ToeplitzCoeffs

FORWARDS = [T.mix_forward_fft, T.mix_forward_matmul]


def naive_mix(x, c, b=None):
    d, n = x.shape
    y = np.zeros((d, n))
    for j in range(n):
        for k in range(j + 1):
            y[:, j] += c[k] * x[:, j - k]
        if b is not None:
            y[:, j] += b[j]
    return y


# ---------------------------------------------------------------- materialize


def test_materialize_identity():
    assert np.array_equal(T.materialize_causal([1.0, 0, 0], 3), np.eye(3))


def test_materialize_shift_is_superdiagonal():
    assert np.array_equal(T.materialize_causal([0.0, 1, 0], 3), np.eye(3, k=1))


def test_materialize_unrolled():
    a, b, c = 2.0, 3.0, 5.0
    m = T.materialize_causal([a, b, c], 3)
    assert np.array_equal(m, [[a, b, c], [0, a, b], [0, 0, a]])


def test_materialize_prefix_and_oversize():
    c = np.arange(1.0, 6.0)
    assert np.array_equal(T.materialize_causal(c, 2), [[1, 2], [0, 1]])
    with pytest.raises(ContextExhaustedError):
        T.materialize_causal(c, 6)


def test_coeffs_type_validates():
    with pytest.raises(ValueError):
        ToeplitzCoeffs(np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        ToeplitzCoeffs(np.array([1.0, np.nan]), np.zeros(2))
    t = ToeplitzCoeffs.zeros(5)
    assert t.n_ctx == 5 and t.matrix(3).shape == (3, 3)


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("fwd", FORWARDS)
def test_identity_kernel(fwd, rng):
    x = rng.standard_normal((4, 8))
    assert np.allclose(fwd(x, np.eye(8)[0], np.zeros(8)), x, rtol=0, atol=1e-15)


@pytest.mark.parametrize("fwd", FORWARDS)
def test_shift_kernel(fwd, rng):
    x = rng.standard_normal((3, 3))
    y = fwd(x, np.array([0.0, 1, 0]), np.zeros(3))
    np.testing.assert_allclose(y, np.column_stack([np.zeros(3), x[:, 0], x[:, 1]]), atol=1e-15)


@pytest.mark.parametrize("fwd", FORWARDS)
def test_random_matches_materialized(fwd, rng):
    x, c, b = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)
    ref = x @ T.materialize_causal(c, 8) + b[None, :]
    assert rel_err(fwd(x, c, b), ref) <= 1e-10
    assert rel_err(naive_mix(x, c, b), ref) <= 1e-12


@pytest.mark.parametrize("fwd", FORWARDS)
def test_zero_coeffs_give_bias(fwd):
    b = np.arange(6.0)
    y = fwd(np.ones((3, 6)), np.zeros(6), b)
    assert np.allclose(y, np.broadcast_to(b, (3, 6)), atol=1e-15)


@pytest.mark.parametrize("fwd", FORWARDS)
def test_prefix_sums(fwd):
    y = fwd(np.ones((1, 4)), np.ones(4))
    np.testing.assert_allclose(y, [[1, 2, 3, 4]], atol=1e-14)


@pytest.mark.parametrize("fwd", FORWARDS)
def test_shorter_sequence_uses_prefix(fwd, rng):
    c, b = rng.standard_normal(16), rng.standard_normal(16)
    x = rng.standard_normal((2, 5))
    assert rel_err(fwd(x, c, b), naive_mix(x, c[:5], b[:5])) <= 1e-12


@pytest.mark.parametrize("fwd", FORWARDS)
def test_errors(fwd):
    with pytest.raises(ContextExhaustedError):
        fwd(np.zeros((2, 5)), np.zeros(4))
    with pytest.raises(ValueError):
        fwd(np.array([[1.0, np.inf]]), np.zeros(2))
    with pytest.raises(ValueError):
        fwd(np.zeros(4), np.zeros(4))
    with pytest.raises(ValueError):
        fwd(np.zeros((2, 4)), np.zeros(4), np.zeros(3))


def test_batched_coefficients_per_head(rng):
    # coeffs (h, N) apply to x (B, h, d, N) head by head
    x = rng.standard_normal((2, 3, 4, 6))
    c, b = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    for fwd in FORWARDS:
        y = fwd(x, c, b)
        for bi in range(2):
            for h in range(3):
                assert rel_err(y[bi, h], naive_mix(x[bi, h], c[h], b[h])) <= 1e-12


def test_auto_path_threshold():
    assert T.resolve_path("auto", T.AUTO_FFT_MIN_LENGTH) == "fft"
    assert T.resolve_path("auto", T.AUTO_FFT_MIN_LENGTH - 1) == "matmul"
    with pytest.raises(ValueError):
        T.resolve_path("gpu", 8)


def _leak(fwd, x, xp, c, b, i):
    y0 = fwd(x, c, b)
    return np.abs(fwd(xp, c, b)[:, :i] - y0[:, :i]).max(initial=0.0) / np.abs(y0).max()


def test_causality(rng):
    # masked entries are exact zeros, so the materialized path is bit-exact; the
    # FFT path spreads roundoff over all bins and is causal to ~1e-14
    x, c, b = rng.standard_normal((4, 16)), rng.standard_normal(16), rng.standard_normal(16)
    for i in (0, 5, 15):
        xp = x.copy()
        xp[:, i] += 10.0
        assert np.array_equal(T.mix_forward_matmul(xp, c, b)[:, :i], T.mix_forward_matmul(x, c, b)[:, :i])
        assert _leak(T.mix_forward_fft, x, xp, c, b, i) <= 1e-12


# ---------------------------------------------------------------- backward


def fd_grads(x, c, b, g, h=1e-6):
    def f(x_, c_, b_):
        return float(np.sum(naive_mix(x_, c_, b_) * g))

    out = []
    for arr in (x, c, b):
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = [v.copy() for v in (x, c, b)], [v.copy() for v in (x, c, b)]
            out_idx = {id(x): 0, id(c): 1, id(b): 2}[id(arr)]
            plus[out_idx][idx] += h
            minus[out_idx][idx] -= h
            grad[idx] = (f(*plus) - f(*minus)) / (2 * h)
        out.append(grad)
    return out


@pytest.mark.parametrize("path", ["fft", "matmul"])
def test_backward_matches_finite_differences(path, rng):
    x, c, b = rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)
    g = rng.standard_normal((3, 5))
    gx, gc, gb = T.mix_backward(x, c, g, path=path)
    fx, fc, fb = fd_grads(x, c, b, g)
    for got, ref in ((gx, fx), (gc, fc), (gb, fb)):
        assert rel_err(got, ref) <= 1e-6


@pytest.mark.parametrize("path", ["fft", "matmul"])
def test_backward_closed_forms(path, rng):
    x, g = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    c = rng.standard_normal(8)
    gx, gc, gb = T.mix_backward(x, c, g, path=path)
    ref_x = np.array([[sum(c[k] * g[d, i + k] for k in range(6 - i)) for i in range(6)] for d in range(3)])
    ref_c = np.array([sum(x[d, j - k] * g[d, j] for d in range(3) for j in range(k, 6)) for k in range(6)])
    assert rel_err(gx, ref_x) <= 1e-12
    assert rel_err(gc[:6], ref_c) <= 1e-12 and np.all(gc[6:] == 0)
    assert rel_err(gb[:6], g.sum(axis=0)) <= 1e-12 and np.all(gb[6:] == 0)


def test_backward_identity_and_zero(rng):
    x, g = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    gx, _, _ = T.mix_backward(x, np.eye(4)[0], g)
    assert np.allclose(gx, g, atol=1e-15)
    out = T.mix_backward(x, rng.standard_normal(4), np.zeros((2, 4)))
    assert all(np.all(a == 0) for a in out)


def test_backward_paths_agree_batched(rng):
    x, g = rng.standard_normal((2, 3, 4, 7)), rng.standard_normal((2, 3, 4, 7))
    c = rng.standard_normal((3, 9))
    a = T.mix_backward(x, c, g, path="fft")
    m = T.mix_backward(x, c, g, path="matmul")
    for u, v in zip(a, m):
        assert u.shape == v.shape
        assert rel_err(u, v) <= 1e-10


def test_backward_shape_mismatch():
    with pytest.raises(ValueError):
        T.mix_backward(np.zeros((2, 4)), np.zeros(4), np.zeros((2, 3)))


def test_backward_without_bias(rng):
    _, _, gb = T.mix_backward(rng.standard_normal((2, 4)), np.ones(4), np.ones((2, 4)), with_bias=False)
    assert gb is None


# ---------------------------------------------------------------- decode


def test_decode_step_j0(rng):
    c, b, x0 = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(3)
    y = T.decode_step(np.zeros((3, 0)), c, x0, 0, b)
    np.testing.assert_allclose(y, c[0] * x0 + b[0], atol=1e-15)


def test_decode_identity(rng):
    x = rng.standard_normal((3, 6))
    for j in range(6):
        assert np.array_equal(T.decode_step(x[:, :j], np.eye(6)[0], x[:, j], j), x[:, j])


def test_decode_stack_matches_forward(rng):
    x, c, b = rng.standard_normal((5, 12)), rng.standard_normal(12), rng.standard_normal(12)
    cols = [T.decode_step(x[:, :j], c, x[:, j], j, b) for j in range(12)]
    assert np.abs(np.column_stack(cols) - T.mix_forward_fft(x, c, b)).max() <= 1e-6


def test_decode_context_exhausted(rng):
    with pytest.raises(ContextExhaustedError):
        T.decode_step(np.zeros((2, 4)), np.zeros(4), np.zeros(2), 4)
    with pytest.raises(ValueError):
        T.decode_step(np.zeros((2, 3)), np.zeros(8), np.zeros(2), 4)


# ---------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 70), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_paths_agree_property(n, d, seed):
    r = np.random.default_rng(seed)
    x, c, b = r.standard_normal((d, n)), r.standard_normal(n + 3), r.standard_normal(n + 3)
    assert rel_err(T.mix_forward_fft(x, c, b), T.mix_forward_matmul(x, c, b)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1),
       st.floats(-10, 10, allow_nan=False), st.floats(-10, 10, allow_nan=False))
def test_linearity_property(n, seed, alpha, beta):
    r = np.random.default_rng(seed)
    x1, x2, c = r.standard_normal((3, n)), r.standard_normal((3, n)), r.standard_normal(n)
    lhs = T.mix_forward(alpha * x1 + beta * x2, c)
    rhs = alpha * T.mix_forward(x1, c) + beta * T.mix_forward(x2, c)
    assert np.abs(lhs - rhs).max() <= 1e-12 * (abs(alpha) + abs(beta) + 1) * n * (np.abs(c).max() + 1) * 10


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.data())
def test_causality_property(n, seed, data):
    r = np.random.default_rng(seed)
    x, c, b = r.standard_normal((2, n)), r.standard_normal(n), r.standard_normal(n)
    i = data.draw(st.integers(0, n - 1))
    xp = x.copy()
    xp[:, i] = r.standard_normal(2) * 100
    assert np.array_equal(T.mix_forward_matmul(xp, c, b)[:, :i], T.mix_forward_matmul(x, c, b)[:, :i])
    assert _leak(T.mix_forward_fft, x, xp, c, b, i) <= 1e-12
