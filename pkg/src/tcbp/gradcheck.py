"""Finite-difference validation suites for every backward rule and the full model.

Each suite builds random small instances, seeds the output with a random
probe, and compares the tape gradient of every differentiable input against
central differences of the probed scalar. Inputs to kinked ops (relu, abs,
signed sqrt, hinges) are drawn bounded away from the kink so the numeric
derivative is well defined.
"""

import numpy as np

from .autodiff import Tape, Var, finite_difference_grad, max_rel_error
from .encoder import EncoderModel
from .sketching import MODE_CBP, MODE_TCBP, init_sketch_params

FD_STEP = 1e-5
TOLERANCE = 1e-4


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    return mag * np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)


def check_pulls(build, inputs: dict, rng, step: float = FD_STEP) -> float:
    """Max relative FD error over all inputs of ``build(tape, **vars) -> out``."""
    vars_ = {k: Var(v) for k, v in inputs.items()}
    tape = Tape()
    out = build(tape, **vars_)
    probe = rng.normal(size=out.value.shape)
    tape.backward(out, probe)

    worst = 0.0
    for name, var in vars_.items():
        def scalar(x, _name=name):
            trial = {k: v.value for k, v in vars_.items()}
            trial[_name] = x
            result = build(Tape(record=False), **{k: Var(v) for k, v in trial.items()})
            return float((probe * result.value).sum())
        numeric = finite_difference_grad(scalar, var.value, step=step)
        analytic = var.grad if var.grad is not None else np.zeros_like(var.value)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _suite_matmul(rng):
    return check_pulls(lambda tape, x, w: tape.matmul(x, w),
                       {"x": rng.normal(size=(3, 5)), "w": rng.normal(size=(4, 5))}, rng)


def _suite_bias_add(rng):
    return check_pulls(lambda tape, x, b: tape.bias_add(x, b),
                       {"x": rng.normal(size=(3, 4)), "b": rng.normal(size=4)}, rng)


def _suite_relu(rng):
    return check_pulls(lambda tape, x: tape.relu(x),
                       {"x": _away_from_zero(rng, (4, 5))}, rng)


def _suite_abs(rng):
    return check_pulls(lambda tape, x: tape.abs_val(x),
                       {"x": _away_from_zero(rng, (4, 5))}, rng)


def _suite_signed_sqrt(rng):
    return check_pulls(lambda tape, x: tape.signed_sqrt(x),
                       {"x": _away_from_zero(rng, (4, 5))}, rng)


def _suite_square(rng):
    return check_pulls(lambda tape, x: tape.square(x),
                       {"x": rng.normal(size=(4, 5))}, rng)


def _suite_add(rng):
    return check_pulls(lambda tape, a, b: tape.add(a, b),
                       {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}, rng)


def _suite_sub(rng):
    return check_pulls(lambda tape, a, b: tape.sub(a, b),
                       {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}, rng)


def _suite_affine(rng):
    return check_pulls(lambda tape, x: tape.affine(x, -1.7, 0.4),
                       {"x": rng.normal(size=(3, 4))}, rng)


def _suite_l2_normalize(rng):
    return check_pulls(lambda tape, x: tape.l2_normalize(x),
                       {"x": rng.normal(size=(3, 6)) + 0.1}, rng)


def _suite_count_sketch(rng):
    c, d = 6, 5
    p = init_sketch_params(c, 1, d, int(rng.integers(1 << 16)), MODE_CBP)
    return check_pulls(lambda tape, x: tape.count_sketch(x, p.h1, p.s1, d),
                       {"x": rng.normal(size=(3, c))}, rng)


def _suite_temporal_count_sketch(rng):
    c, t, d = 5, 3, 4
    p = init_sketch_params(c, t, d, int(rng.integers(1 << 16)), MODE_TCBP)
    return check_pulls(lambda tape, x: tape.temporal_count_sketch(x, p.h1, p.s1, d),
                       {"x": rng.normal(size=(2, c, t))}, rng)


def _suite_circular_convolve(rng):
    return check_pulls(lambda tape, a, b: tape.circular_convolve(a, b),
                       {"a": rng.normal(size=(2, 7)), "b": rng.normal(size=(2, 7))}, rng)


def _suite_sum_pool(rng):
    return check_pulls(lambda tape, x: tape.sum_pool(x, axis=1),
                       {"x": rng.normal(size=(3, 4, 2))}, rng)


def _suite_mean_pool(rng):
    return check_pulls(lambda tape, x: tape.mean_pool(x, axis=2),
                       {"x": rng.normal(size=(3, 4, 2))}, rng)


def _suite_reshape(rng):
    return check_pulls(lambda tape, x: tape.reshape(x, (6, 2)),
                       {"x": rng.normal(size=(3, 4))}, rng)


def _suite_transpose(rng):
    return check_pulls(lambda tape, x: tape.transpose(x, (2, 0, 1)),
                       {"x": rng.normal(size=(3, 4, 2))}, rng)


def _suite_take_rows(rng):
    idx = rng.integers(0, 4, size=6)
    return check_pulls(lambda tape, x: tape.take_rows(x, idx),
                       {"x": rng.normal(size=(4, 3))}, rng)


def _suite_pair_loss(rng):
    def build(tape, a, b):
        return tape.sum_pool(tape.square(tape.relu(tape.sub(a, b))), axis=None)
    # differences bounded away from the hinge kink, both signs present
    a = rng.uniform(0.1, 2.0, size=(1, 8))
    b = a + _away_from_zero(rng, (1, 8), low=0.2, high=0.8)
    return check_pulls(build, {"a": a, "b": b}, rng)


def _suite_negative_hinge(rng):
    alpha = 0.2
    def build(tape, a, b):
        losses = tape.sum_pool(tape.square(tape.relu(tape.sub(a, b))), axis=1)
        return tape.sum_pool(tape.relu(tape.affine(losses, -1.0, alpha)), axis=None)
    # keep each pairwise loss away from the hinge threshold
    a = rng.uniform(0.005, 0.05, size=(3, 4))
    b = rng.uniform(0.3, 0.6, size=(3, 4))
    b[0] = 0.0  # one active hinge (small positive loss), two saturated (zero loss)
    return check_pulls(build, {"a": a, "b": b}, rng)


def _suite_cbp_encode(rng):
    c, t, d = 5, 3, 6
    p = init_sketch_params(c, 1, d, int(rng.integers(1 << 16)), MODE_CBP)
    def build(tape, x):
        n = x.value.shape[0]
        cols = tape.reshape(tape.transpose(x, (0, 2, 1)), (n * t, c))
        u1 = tape.count_sketch(cols, p.h1, p.s1, d)
        u2 = tape.count_sketch(cols, p.h2, p.s2, d)
        return tape.sum_pool(tape.reshape(tape.circular_convolve(u1, u2), (n, t, d)), axis=1)
    return check_pulls(build, {"x": rng.normal(size=(2, c, t))}, rng)


def _suite_tcbp_encode(rng):
    c, t, d = 5, 3, 6
    p = init_sketch_params(c, t, d, int(rng.integers(1 << 16)), MODE_TCBP)
    def build(tape, x):
        u1 = tape.temporal_count_sketch(x, p.h1, p.s1, d)
        u2 = tape.temporal_count_sketch(x, p.h2, p.s2, d)
        return tape.circular_convolve(u1, u2)
    return check_pulls(build, {"x": rng.normal(size=(2, c, t))}, rng)


_KINK_OPS = ("relu", "abs", "signed_sqrt")
_KINK_MARGIN = 1e-3  # central differences need kink inputs well clear of 0


def _kink_margin(tape: Tape) -> float:
    """Smallest |input| feeding a non-smooth op anywhere on the tape."""
    margin = np.inf
    for op, _out, pulls in tape.nodes:
        if op in _KINK_OPS and pulls:
            value = pulls[0][0].value
            if value.size:
                margin = min(margin, float(np.abs(value).min()))
    return margin


def _full_model_error(rng, method: str = "tcbp") -> float:
    """FD check of the whole pipeline + pair loss w.r.t. the input and every parameter.

    Instances whose intermediate values graze a relu/abs/signed-sqrt kink are
    redrawn; finite differences are undefined across the kink.
    """
    for _ in range(500):
        model = EncoderModel({"A": 2, "P": 4}, method=method, t=2, d=8, reduce_dim=4,
                             hidden_dim=6, phi_dim=5, seed=int(rng.integers(1 << 16)))
        x = rng.normal(size=(2, model.c_total, model.t))
        tape = Tape()
        x_var = Var(x)
        _, phi = model.forward(tape, x_var)
        diff = tape.sub(tape.take_rows(phi, [0]), tape.take_rows(phi, [1]))
        total = tape.sum_pool(tape.square(tape.relu(diff)), axis=None)
        if _kink_margin(tape) > _KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a kink-free full-model instance")

    def loss_value() -> float:
        t2 = Tape(record=False)
        _, phi2 = model.forward(t2, x)
        d2 = t2.sub(t2.take_rows(phi2, [0]), t2.take_rows(phi2, [1]))
        return float(t2.sum_pool(t2.square(t2.relu(d2)), axis=None).value)

    model.zero_grad()
    tape.backward(total)

    worst = 0.0
    for p in model.params():
        base = p.value
        def scalar(v, _p=p, _base=base):
            _p.value = v
            try:
                return loss_value()
            finally:
                _p.value = _base
        numeric = finite_difference_grad(scalar, base, step=FD_STEP)
        analytic = p.grad if p.grad is not None else np.zeros_like(base)
        worst = max(worst, max_rel_error(analytic, numeric))

    def scalar_x(v):
        tape2 = Tape(record=False)
        _, phi2 = model.forward(tape2, v)
        d2 = tape2.sub(tape2.take_rows(phi2, [0]), tape2.take_rows(phi2, [1]))
        return float(tape2.sum_pool(tape2.square(tape2.relu(d2)), axis=None).value)
    numeric_x = finite_difference_grad(scalar_x, x, step=FD_STEP)
    worst = max(worst, max_rel_error(x_var.grad, numeric_x))
    return worst


def _suite_full_model(rng):
    return _full_model_error(rng, method="tcbp")


SUITES = {
    "matmul": _suite_matmul,
    "bias_add": _suite_bias_add,
    "relu": _suite_relu,
    "abs": _suite_abs,
    "signed_sqrt": _suite_signed_sqrt,
    "square": _suite_square,
    "add": _suite_add,
    "sub": _suite_sub,
    "affine": _suite_affine,
    "l2_normalize": _suite_l2_normalize,
    "count_sketch": _suite_count_sketch,
    "temporal_count_sketch": _suite_temporal_count_sketch,
    "circular_convolve": _suite_circular_convolve,
    "sum_pool": _suite_sum_pool,
    "mean_pool": _suite_mean_pool,
    "reshape": _suite_reshape,
    "transpose": _suite_transpose,
    "take_rows": _suite_take_rows,
    "pair_loss": _suite_pair_loss,
    "negative_hinge": _suite_negative_hinge,
    "cbp_encode": _suite_cbp_encode,
    "tcbp_encode": _suite_tcbp_encode,
    "full_model": _suite_full_model,
}


def run_gradchecks(ops=None, instances: int = 10, seed: int = 0) -> dict:
    """Run each op's suite ``instances`` times; returns op -> max relative error."""
    names = list(SUITES) if ops is None else list(ops)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown gradcheck ops {unknown}; known: {sorted(SUITES)}")
    results = {}
    for name in names:
        rng = np.random.Generator(np.random.Philox(seed))
        results[name] = max(SUITES[name](rng) for _ in range(max(1, instances)))
    return results
