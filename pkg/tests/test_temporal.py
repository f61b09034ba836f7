import numpy as np
import pytest

from periodsplat import temporal
from periodsplat.errors import OutOfRange, ShapeMismatch


def test_encode_integer_one_hot():
    e = temporal.encode_time(2, 3)
    np.testing.assert_array_equal(e.weights, [0.0, 0.0, 1.0])
    for T in (1, 2, 5):
        for t in range(T):
            w = temporal.encode_time(t, T).weights
            assert w[t] == 1.0 and w.sum() == 1.0 and np.count_nonzero(w) == 1


def test_encode_fractional():
    np.testing.assert_array_equal(temporal.encode_time(0.5, 3).weights, [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(temporal.encode_time(1.25, 4).weights, [0.0, 0.75, 0.25, 0.0])


def test_encode_out_of_range():
    with pytest.raises(OutOfRange):
        temporal.encode_time(-0.1, 3)
    with pytest.raises(OutOfRange):
        temporal.encode_time(2.01, 3)


def test_encode_random_properties(rng):
    for _ in range(1000):
        T = int(rng.integers(2, 7))
        t = rng.uniform(0, T - 1)
        w = temporal.encode_time(t, T).weights
        assert abs(w.sum() - 1.0) <= 1e-12
        nz = np.nonzero(w)[0]
        assert 1 <= nz.size <= 2
        if nz.size == 2:
            assert nz[1] == nz[0] + 1


def test_encode_continuity(rng):
    for _ in range(200):
        T = int(rng.integers(2, 6))
        t = rng.uniform(0, T - 1.001)
        delta = rng.uniform(0, min(0.3, np.floor(t) + 1 - t - 1e-9))
        e1 = temporal.encode_time(t, T).weights
        e2 = temporal.encode_time(t + delta, T).weights
        assert np.abs(e2 - e1).sum() <= 2 * delta + 1e-12


def test_reduce_one_hot_selects_row_bitwise(rng):
    M = rng.normal(size=(4, 7))
    M[1, 3] = -0.0  # sign of zero must survive row selection
    e = temporal.encode_time(1, 4)
    out = temporal.reduce_periods(M, e)
    assert out.tobytes() == M[1].tobytes()


def test_reduce_zero_matrix():
    e = temporal.encode_time(0.3, 3)
    np.testing.assert_array_equal(temporal.reduce_periods(np.zeros((3, 5)), e), np.zeros(5))


def test_reduce_fractional_matches_direct_sum(rng):
    M = rng.normal(size=(2, 6))
    e = temporal.encode_time(0.5, 2)
    np.testing.assert_allclose(temporal.reduce_periods(M, e), 0.5 * M[0] + 0.5 * M[1],
                               atol=1e-15)
    for _ in range(20):
        T = int(rng.integers(2, 5))
        M = rng.normal(size=(T, 4))
        t = rng.uniform(0, T - 1)
        e = temporal.encode_time(t, T)
        expected = sum(e.weights[tau] * M[tau] for tau in range(T))
        np.testing.assert_allclose(temporal.reduce_periods(M, e), expected, atol=1e-14)


def test_reduce_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        temporal.reduce_periods(rng.normal(size=(3, 4)), temporal.encode_time(1, 4))


def test_fuse_zero_features():
    e = temporal.encode_time(1, 3)
    h = temporal.fuse_features(np.zeros(16), np.zeros((3, 16)), np.zeros((3, 32)), e)
    assert h.shape == (64,)
    assert not h.any()


def test_fuse_one_hot_concatenates_rows_bitwise(rng):
    base = rng.normal(size=5)
    local = rng.normal(size=(3, 4))
    glob = rng.normal(size=(3, 6))
    e = temporal.encode_time(2, 3)
    h = temporal.fuse_features(base, local, glob, e)
    assert h[:5].tobytes() == base.tobytes()
    assert h[5:9].tobytes() == local[2].tobytes()
    assert h[9:].tobytes() == glob[2].tobytes()


def test_fuse_fractional_matches_hand_computation(rng):
    base = rng.normal(size=3)
    local = rng.normal(size=(2, 4))
    glob = rng.normal(size=(2, 5))
    e = temporal.encode_time(0.25, 2)
    h = temporal.fuse_features(base, local, glob, e)
    np.testing.assert_allclose(h, np.concatenate([
        base, 0.75 * local[0] + 0.25 * local[1], 0.75 * glob[0] + 0.25 * glob[1]]),
        atol=1e-15)


def test_fuse_backward_one_hot_lands_in_row(rng):
    e = temporal.encode_time(1, 3)
    gh = rng.normal(size=12)
    gb, gl, gg = temporal.fuse_backward(gh, e, 4, 4, 4)
    np.testing.assert_array_equal(gb, gh[:4])
    assert not gl[0].any() and not gl[2].any()
    np.testing.assert_array_equal(gl[1], gh[4:8])
    np.testing.assert_array_equal(gg[1], gh[8:])


def test_fuse_backward_zero():
    e = temporal.encode_time(0.4, 2)
    gb, gl, gg = temporal.fuse_backward(np.zeros(10), e, 2, 4, 4)
    assert not gb.any() and not gl.any() and not gg.any()


def test_fuse_backward_central_difference(rng):
    d_b, d_v, d_g, T = 3, 4, 5, 3
    base = rng.normal(size=d_b)
    local = rng.normal(size=(T, d_v))
    glob = rng.normal(size=(T, d_g))
    e = temporal.encode_time(1.3, T)
    gh = rng.normal(size=d_b + d_v + d_g)
    gb, gl, gg = temporal.fuse_backward(gh, e, d_b, d_v, d_g)

    def loss():
        return float(gh @ temporal.fuse_features(base, local, glob, e))

    h = 1e-6
    for arr, grad in ((base, gb), (local, gl), (glob, gg)):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-6 * max(1.0, abs(fd))


def test_fuse_backward_exact_adjoint(rng):
    """<g, J v> == <J^T g, v> to 1e-12 for random directions."""
    d_b, d_v, d_g, T = 4, 5, 6, 3
    e = temporal.encode_time(rng.uniform(0, T - 1), T)
    for _ in range(50):
        vb = rng.normal(size=d_b)
        vl = rng.normal(size=(T, d_v))
        vg = rng.normal(size=(T, d_g))
        gh = rng.normal(size=d_b + d_v + d_g)
        lhs = float(gh @ temporal.fuse_features(vb, vl, vg, e))
        gb, gl, gg = temporal.fuse_backward(gh, e, d_b, d_v, d_g)
        rhs = float((gb * vb).sum() + (gl * vl).sum() + (gg * vg).sum())
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
