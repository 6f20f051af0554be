import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcbp.sketching import (
    MODE_CBP,
    MODE_TCBP,
    SketchParams,
    cbp_encode,
    circular_convolve,
    count_sketch,
    init_sketch_params,
    sketch_params_from_bytes,
    sketch_params_to_bytes,
    tcbp_encode,
    tensor_sketch,
)

# ---------------------------------------------------------------------------
# Independent oracles.

def direct_circular_convolution(u1, u2):
    """O(d^2) defining sum, no FFT."""
    d = len(u1)
    out = np.zeros(d)
    for k in range(d):
        for j in range(d):
            out[k] += u1[j] * u2[(k - j) % d]
    return out


def folded_linear_convolution(u1, u2):
    """Time-domain np.convolve folded to circular; independent of the FFT path."""
    d = len(u1)
    lin = np.convolve(u1, u2)
    out = lin[:d].copy()
    out[: d - 1] += lin[d:]
    return out


def induced_outer_sketch(x, params):
    """Count sketch of vec(x (x) x) under the induced hash/sign tables.

    H(i, i') = (h1[i] + h2[i']) mod d and S(i, i') = s1[i] * s2[i'], which is
    what convolving the two channel sketches realizes.
    """
    d = params.d
    out = np.zeros(d)
    for i in range(len(x)):
        for ip in range(len(x)):
            j = (params.h1[i] + params.h2[ip]) % d
            out[j] += params.s1[i] * params.s2[ip] * x[i] * x[ip]
    return out


# ---------------------------------------------------------------------------
# init_sketch_params

def test_init_cbp_shapes_and_ranges():
    p = init_sketch_params(c=4, t=1, d=4, seed=7, mode=MODE_CBP)
    assert p.h1.shape == p.h2.shape == (4,)
    assert p.s1.shape == p.s2.shape == (4,)
    for h in (p.h1, p.h2):
        assert h.min() >= 0 and h.max() < 4
    for s in (p.s1, p.s2):
        assert set(np.unique(s)) <= {-1, 1}


def test_init_tcbp_shapes_match_parameter_accounting():
    p = init_sketch_params(c=3, t=2, d=8, seed=1, mode=MODE_TCBP)
    assert p.s1.shape == p.s2.shape == (3, 2)
    assert p.h1.shape == p.h2.shape == (3,)
    assert p.param_count() == 2 * (3 + 3 * 2)


def test_init_deterministic():
    a = init_sketch_params(5, 3, 16, seed=99, mode=MODE_TCBP)
    b = init_sketch_params(5, 3, 16, seed=99, mode=MODE_TCBP)
    for name in ("h1", "h2", "s1", "s2"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("bad", [dict(c=0), dict(t=0), dict(d=0), dict(c=-2)])
def test_init_rejects_nonpositive_dims(bad):
    kwargs = dict(c=3, t=2, d=4, seed=0, mode=MODE_TCBP)
    kwargs.update(bad)
    with pytest.raises(ValueError):
        init_sketch_params(**kwargs)


def test_init_rejects_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        init_sketch_params(3, 1, 4, 0, "other")


def test_params_are_immutable():
    p = init_sketch_params(3, 2, 4, seed=0, mode=MODE_TCBP)
    with pytest.raises(ValueError):
        p.h1[0] = 1


def test_param_count_formulas_sweep():
    for c in (1, 4, 17, 129):
        for t in (1, 2, 5):
            cbp = init_sketch_params(c, 1, 32, seed=0, mode=MODE_CBP)
            tcbp = init_sketch_params(c, t, 32, seed=0, mode=MODE_TCBP)
            assert cbp.param_count() == 2 * 2 * c
            assert tcbp.param_count() == 2 * (c + c * t)


def test_tcbp_t1_draws_same_tables_as_cbp():
    a = init_sketch_params(6, 1, 16, seed=5, mode=MODE_CBP)
    b = init_sketch_params(6, 1, 16, seed=5, mode=MODE_TCBP)
    assert np.array_equal(a.h1, b.h1) and np.array_equal(a.h2, b.h2)
    assert np.array_equal(a.s1, b.s1.ravel()) and np.array_equal(a.s2, b.s2.ravel())


# ---------------------------------------------------------------------------
# count_sketch

def test_count_sketch_zero_input():
    p = init_sketch_params(3, 1, 4, seed=2, mode=MODE_CBP)
    out = count_sketch(np.zeros(3), p.h1, p.s1, 4)
    assert np.array_equal(out, np.zeros(4))


def test_count_sketch_hand_example():
    out = count_sketch(np.array([2.0, 3.0]), np.array([0, 1]), np.array([1, -1]), 2)
    assert np.array_equal(out, np.array([2.0, -3.0]))


def test_count_sketch_collision():
    out = count_sketch(np.array([1.0, 1.0, 1.0]), np.array([0, 0, 1]),
                       np.array([1, -1, 1]), 2)
    assert np.array_equal(out, np.array([0.0, 1.0]))


def test_count_sketch_length_mismatch():
    with pytest.raises(ValueError):
        count_sketch(np.ones(3), np.array([0, 1]), np.array([1, -1]), 2)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_count_sketch_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    c, d = 6, 4
    p = init_sketch_params(c, 1, d, seed=seed, mode=MODE_CBP)
    x, y = rng.normal(size=c), rng.normal(size=c)
    lhs = count_sketch(a * x + b * y, p.h1, p.s1, d)
    rhs = a * count_sketch(x, p.h1, p.s1, d) + b * count_sketch(y, p.h1, p.s1, d)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_count_sketch_preserves_float32():
    p = init_sketch_params(3, 1, 4, seed=2, mode=MODE_CBP)
    out = count_sketch(np.ones(3, dtype=np.float32), p.h1, p.s1, 4)
    assert out.dtype == np.float32
    out64 = count_sketch(np.ones(3), p.h1, p.s1, 4)
    assert out64.dtype == np.float64


# ---------------------------------------------------------------------------
# circular_convolve

def test_convolve_delta_identity(rng):
    u2 = rng.normal(size=4)
    delta = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.allclose(circular_convolve(delta, u2), u2, rtol=1e-12, atol=1e-12)


def test_convolve_hand_example():
    out = circular_convolve(np.array([1.0, 1.0]), np.array([1.0, -1.0]))
    assert np.allclose(out, np.zeros(2), atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3, 4, 7, 8, 12])
def test_convolve_matches_direct_sum(d, rng):
    u1, u2 = rng.normal(size=d), rng.normal(size=d)
    fft = circular_convolve(u1, u2)
    direct = direct_circular_convolution(u1, u2)
    scale = max(np.abs(direct).max(), 1e-12)
    assert np.abs(fft - direct).max() / scale < 1e-9


def test_convolve_large_prime_free_length(rng):
    u1, u2 = rng.normal(size=8192), rng.normal(size=8192)
    fft = circular_convolve(u1, u2)
    direct = folded_linear_convolution(u1, u2)
    assert np.abs(fft - direct).max() / np.abs(direct).max() < 1e-9


def test_convolve_length_mismatch():
    with pytest.raises(ValueError):
        circular_convolve(np.ones(3), np.ones(4))


# ---------------------------------------------------------------------------
# tensor_sketch

def test_tensor_sketch_zero():
    p = init_sketch_params(3, 1, 5, seed=1, mode=MODE_CBP)
    assert np.array_equal(tensor_sketch(np.zeros(3), p), np.zeros(5))


def test_tensor_sketch_matches_induced_outer_sketch(rng):
    p = init_sketch_params(3, 1, 5, seed=21, mode=MODE_CBP)
    x = rng.normal(size=3)
    ts = tensor_sketch(x, p)
    oracle = induced_outer_sketch(x, p)
    assert np.abs(ts - oracle).max() / max(np.abs(oracle).max(), 1e-12) < 1e-9


def test_tensor_sketch_oracle_exhaustive_small(rng):
    for c in range(1, 5):
        for d in range(1, 9):
            p = init_sketch_params(c, 1, d, seed=c * 100 + d, mode=MODE_CBP)
            for _ in range(5):
                x = rng.normal(size=c)
                ts = tensor_sketch(x, p)
                oracle = induced_outer_sketch(x, p)
                scale = max(np.abs(oracle).max(), 1e-12)
                assert np.abs(ts - oracle).max() / scale < 1e-9


def test_tensor_sketch_requires_cbp_mode():
    p = init_sketch_params(3, 2, 5, seed=1, mode=MODE_TCBP)
    with pytest.raises(ValueError, match="CBP"):
        tensor_sketch(np.zeros(3), p)


def test_tensor_sketch_inner_product_unbiased_small(rng):
    # small-scale version of the Monte-Carlo expectation check
    c, d, n = 6, 32, 1500
    x, y = rng.normal(size=c), rng.normal(size=c)
    target = np.dot(x, y) ** 2
    vals = np.empty(n)
    for k in range(n):
        p = init_sketch_params(c, 1, d, seed=k, mode=MODE_CBP)
        vals[k] = np.dot(tensor_sketch(x, p), tensor_sketch(y, p))
    stderr = vals.std(ddof=1) / np.sqrt(n)
    assert abs(vals.mean() - target) < 3 * stderr


# ---------------------------------------------------------------------------
# cbp_encode / tcbp_encode

def test_cbp_single_column_equals_tensor_sketch(rng):
    p = init_sketch_params(4, 1, 8, seed=3, mode=MODE_CBP)
    x = rng.normal(size=(4, 1))
    assert np.allclose(cbp_encode(x, p), tensor_sketch(x[:, 0], p), rtol=1e-12, atol=1e-14)


def test_cbp_two_identical_columns(rng):
    p = init_sketch_params(4, 1, 8, seed=3, mode=MODE_CBP)
    col = rng.normal(size=4)
    x = np.stack([col, col], axis=1)
    assert np.allclose(cbp_encode(x, p), 2 * tensor_sketch(col, p), rtol=1e-12, atol=1e-12)


def test_cbp_matches_per_column_oracle(rng):
    p = init_sketch_params(4, 1, 16, seed=9, mode=MODE_CBP)
    x = rng.normal(size=(4, 3))
    oracle = sum(induced_outer_sketch(x[:, k], p) for k in range(3))
    out = cbp_encode(x, p)
    assert np.abs(out - oracle).max() / np.abs(oracle).max() < 1e-9


def test_cbp_channel_mismatch():
    p = init_sketch_params(4, 1, 8, seed=3, mode=MODE_CBP)
    with pytest.raises(ValueError):
        cbp_encode(np.zeros((5, 2)), p)


def test_tcbp_zero_and_shape_errors(rng):
    p = init_sketch_params(4, 3, 8, seed=5, mode=MODE_TCBP)
    assert np.array_equal(tcbp_encode(np.zeros((4, 3)), p), np.zeros(8))
    with pytest.raises(ValueError):
        tcbp_encode(rng.normal(size=(4, 2)), p)
    with pytest.raises(ValueError):
        tcbp_encode(rng.normal(size=(5, 3)), p)


def test_tcbp_equals_cbp_at_t1(rng):
    seed = 17
    cbp_p = init_sketch_params(6, 1, 16, seed=seed, mode=MODE_CBP)
    tcbp_p = init_sketch_params(6, 1, 16, seed=seed, mode=MODE_TCBP)
    x = rng.normal(size=(6, 1))
    assert np.allclose(tcbp_encode(x, tcbp_p), cbp_encode(x, cbp_p), rtol=1e-12, atol=0)


def test_tcbp_time_constant_signal_and_signs(rng):
    # constant x and constant s over t=3 make each u_k three times the plain
    # count sketch, so the convolution output is 9x the tensor sketch
    c, t, d, seed = 4, 3, 8, 23
    cbp_p = init_sketch_params(c, 1, d, seed=seed, mode=MODE_CBP)
    s1 = np.repeat(cbp_p.s1[:, None], t, axis=1)
    s2 = np.repeat(cbp_p.s2[:, None], t, axis=1)
    tcbp_p = SketchParams(d=d, c=c, t=t, mode=MODE_TCBP, seed=seed,
                          h1=cbp_p.h1.copy(), h2=cbp_p.h2.copy(), s1=s1, s2=s2)
    x0 = rng.normal(size=c)
    x = np.repeat(x0[:, None], t, axis=1)
    out = tcbp_encode(x, tcbp_p)
    assert np.allclose(out, 9 * tensor_sketch(x0, cbp_p), rtol=1e-12, atol=1e-12)


def test_tcbp_destination_slots_one_hot():
    # every (channel, segment) one-hot lands only at h_k[i] in the pre-conv sketches
    from tcbp.sketching import temporal_sketch_kernel
    c, t, d = 5, 3, 7
    p = init_sketch_params(c, t, d, seed=31, mode=MODE_TCBP)
    for i in range(c):
        for tau in range(t):
            x = np.zeros((c, t))
            x[i, tau] = 1.0
            for h, s in ((p.h1, p.s1), (p.h2, p.s2)):
                u = temporal_sketch_kernel(x, h, s.astype(np.float64), d)
                nz = np.flatnonzero(u)
                assert list(nz) == [h[i]]
                assert u[h[i]] == s[i, tau]


def test_tcbp_rejects_wrong_mode(rng):
    p = init_sketch_params(4, 1, 8, seed=3, mode=MODE_CBP)
    with pytest.raises(ValueError, match="TCBP"):
        tcbp_encode(rng.normal(size=(4, 1)), p)


def test_nonfinite_input_rejected():
    p = init_sketch_params(2, 2, 4, seed=3, mode=MODE_TCBP)
    x = np.array([[np.nan, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="NaN|Inf"):
        tcbp_encode(x, p)


# ---------------------------------------------------------------------------
# serialization

def test_params_blob_roundtrip():
    p = init_sketch_params(7, 4, 32, seed=123456789, mode=MODE_TCBP)
    blob = sketch_params_to_bytes(p)
    q = sketch_params_from_bytes(blob)
    assert (q.c, q.t, q.d, q.mode, q.seed) == (p.c, p.t, p.d, p.mode, p.seed)
    for name in ("h1", "h2", "s1", "s2"):
        assert np.array_equal(getattr(p, name), getattr(q, name))


def test_params_blob_rejects_bad_magic():
    blob = bytearray(sketch_params_to_bytes(init_sketch_params(3, 1, 4, 0, MODE_CBP)))
    blob[0] ^= 0xFF
    with pytest.raises(ValueError, match="magic"):
        sketch_params_from_bytes(bytes(blob))


def test_params_blob_rejects_checksum_mismatch():
    blob = bytearray(sketch_params_to_bytes(init_sketch_params(3, 1, 4, 0, MODE_CBP)))
    blob[-1] ^= 0x01  # corrupt the stored table checksum
    with pytest.raises(ValueError, match="checksum"):
        sketch_params_from_bytes(bytes(blob))
