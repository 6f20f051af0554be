import numpy as np
import pytest

from tcbp.autodiff import BackwardError, Param, Tape, Var, max_rel_error
from tcbp.gradcheck import SUITES, TOLERANCE, run_gradchecks
from tcbp.sketching import MODE_TCBP, init_sketch_params, temporal_sketch_kernel


def test_linear_loss_gradient_is_input():
    w = Param(np.array([[0.5, -1.0, 2.0]]), "w")
    x = Var(np.array([[3.0, 4.0, 5.0]]))
    tape = Tape()
    out = tape.sum_pool(tape.matmul(x, w), axis=None)  # <w, x>
    tape.backward(out, np.asarray(1.0))
    assert np.array_equal(w.grad, x.value)
    assert np.array_equal(x.grad, w.value)


def test_relu_subgradient_zero_at_zero():
    x = Var(np.array([[-1.0, 2.0, 0.0]]))
    tape = Tape()
    out = tape.sum_pool(tape.relu(x), axis=None)
    tape.backward(out)
    assert np.array_equal(x.grad, np.array([[0.0, 1.0, 0.0]]))


def test_abs_subgradient_zero_at_zero():
    x = Var(np.array([[-2.0, 0.0, 3.0]]))
    tape = Tape()
    tape.backward(tape.sum_pool(tape.abs_val(x), axis=None))
    assert np.array_equal(x.grad, np.array([[-1.0, 0.0, 1.0]]))


def test_zero_seed_gives_exactly_zero_gradients(rng):
    w = Param(rng.normal(size=(3, 4)), "w")
    b = Param(np.zeros(3), "b", decay=False)
    x = Var(rng.normal(size=(2, 4)))
    tape = Tape()
    out = tape.relu(tape.bias_add(tape.matmul(x, w), b))
    tape.backward(out, np.zeros_like(out.value))
    for v in (w, b, x):
        assert v.grad is not None
        assert np.array_equal(v.grad, np.zeros_like(v.value))


def test_backward_requires_matching_seed_shape(rng):
    x = Var(rng.normal(size=(2, 3)))
    tape = Tape()
    out = tape.relu(x)
    with pytest.raises(BackwardError, match="seed gradient shape"):
        tape.backward(out, np.zeros((3, 2)))


def test_backward_empty_tape_rejected():
    with pytest.raises(BackwardError, match="tape"):
        Tape().backward(Var(np.zeros(2)))
    with pytest.raises(BackwardError):
        Tape(record=False).backward(Var(np.zeros(2)))


def test_gradient_accumulates_when_var_reused(rng):
    x = Var(rng.normal(size=(2, 2)))
    tape = Tape()
    out = tape.sum_pool(tape.add(x, x), axis=None)
    tape.backward(out)
    assert np.array_equal(x.grad, 2 * np.ones((2, 2)))


def test_backward_deterministic(rng):
    def run():
        w = Param(np.arange(6, dtype=float).reshape(2, 3), "w")
        x = Var(np.linspace(-1, 1, 6).reshape(2, 3))
        tape = Tape()
        out = tape.sum_pool(tape.signed_sqrt(tape.add(x, w)), axis=None)
        tape.backward(out)
        return w.grad.copy()
    assert np.array_equal(run(), run())


def test_non_recording_tape_computes_but_keeps_nothing(rng):
    tape = Tape(record=False)
    x = Var(rng.normal(size=(2, 3)))
    out = tape.relu(x)
    assert out.value.shape == (2, 3)
    assert tape.nodes == []


def test_param_metadata():
    p = Param(np.zeros(3), "head.b1", decay=False)
    assert p.name == "head.b1" and p.decay is False
    assert Param(np.zeros(3), "w").decay is True


# ---------------------------------------------------------------------------
# Finite-difference suites: every registered op at < 1e-4 on 10 instances.

@pytest.mark.parametrize("op", sorted(SUITES))
def test_op_passes_finite_differences(op):
    err = run_gradchecks(ops=[op], instances=10, seed=7)[op]
    assert err < TOLERANCE, f"{op}: max rel err {err:.3e}"


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown gradcheck ops"):
        run_gradchecks(ops=["nope"])


# ---------------------------------------------------------------------------
# FFT path vs direct-convolution path for the tcbp gradient.

def _direct_correlate(g, b):
    d = len(g)
    out = np.zeros(d)
    for j in range(d):
        for k in range(d):
            out[j] += g[k] * b[(k - j) % d]
    return out


def test_tcbp_gradient_fft_equals_direct_convolution_path(rng):
    c, t, d = 5, 3, 7
    p = init_sketch_params(c, t, d, seed=3, mode=MODE_TCBP)
    x = rng.normal(size=(1, c, t))
    g = rng.normal(size=(1, d))

    tape = Tape()
    xv = Var(x)
    u1 = tape.temporal_count_sketch(xv, p.h1, p.s1, d)
    u2 = tape.temporal_count_sketch(xv, p.h2, p.s2, d)
    out = tape.circular_convolve(u1, u2)
    tape.backward(out, g)
    fft_grad = xv.grad

    # same chain rule with the O(d^2) correlation instead of the FFT
    s1 = p.s1.astype(float)
    s2 = p.s2.astype(float)
    u1v = temporal_sketch_kernel(x.astype(float), p.h1, s1, d)[0]
    u2v = temporal_sketch_kernel(x.astype(float), p.h2, s2, d)[0]
    du1 = _direct_correlate(g[0], u2v)
    du2 = _direct_correlate(g[0], u1v)
    direct_grad = (du1[p.h1][:, None] * s1 + du2[p.h2][:, None] * s2)[None]

    assert max_rel_error(fft_grad, direct_grad) < 1e-8
