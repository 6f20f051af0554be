"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` owns both the forward computation and the recording: each op
method computes its output from ``Var`` (or constant) inputs and appends a
node holding the vector-Jacobian pulls for every tracked input. ``backward``
replays the nodes in reverse recording order and accumulates gradients on the
vars. Only the fixed op set needed by the encoder/ordering model is provided;
this is not a general autodiff.

All values are held as float64; sign-sqrt and the l2 norm use the stabilizers
documented on their ops.
"""

import numpy as np

from .sketching import (
    circular_convolve_kernel,
    circular_correlate_kernel,
    count_sketch_kernel,
    scatter_add,
    temporal_sketch_kernel,
)

SIGNED_SQRT_CLAMP = 1e-8   # derivative-only clamp on |x|
L2_NORM_EPS = 1e-12        # added to the norm in forward and backward


class BackwardError(RuntimeError):
    """Raised when gradient propagation hits an internal inconsistency."""


class Var:
    """A tracked array value; ``grad`` is filled in by ``Tape.backward``."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Param(Var):
    """A named learnable leaf; ``decay=False`` opts it out of weight decay."""

    __slots__ = ("name", "decay")

    def __init__(self, value, name: str, decay: bool = True):
        super().__init__(value)
        self.name = name
        self.decay = decay


def _value(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Forward executor and reverse-mode recorder.

    With ``record=False`` the ops compute forward values only and the tape
    holds no state, which makes inference calls safe to run concurrently.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes = []  # (op_name, out_var, ((var, pull_fn), ...))

    def _emit(self, op: str, out_value, pulls) -> Var:
        out = Var(out_value)
        if self.record:
            tracked = tuple((v, fn) for v, fn in pulls if isinstance(v, Var))
            self.nodes.append((op, out, tracked))
        return out

    # -- dense linear algebra ------------------------------------------------

    def matmul(self, x, w) -> Var:
        """y = x @ w.T for x (n, i) and w (o, i)."""
        xv, wv = _value(x), _value(w)
        y = xv @ wv.T
        return self._emit("matmul", y, (
            (x, lambda g: g @ wv),
            (w, lambda g: g.T @ xv),
        ))

    def bias_add(self, x, b) -> Var:
        """y = x + b, broadcasting b (k,) over rows of x (n, k)."""
        xv, bv = _value(x), _value(b)
        return self._emit("bias_add", xv + bv, (
            (x, lambda g: g),
            (b, lambda g: g.sum(axis=0) if g.ndim > bv.ndim else g),
        ))

    # -- elementwise ---------------------------------------------------------

    def relu(self, x) -> Var:
        xv = _value(x)
        mask = xv > 0  # subgradient 0 at 0
        return self._emit("relu", np.where(mask, xv, 0.0), (
            (x, lambda g: g * mask),
        ))

    def abs_val(self, x) -> Var:
        xv = _value(x)
        sgn = np.sign(xv)  # 0 at 0, so subgradient 0 there
        return self._emit("abs", np.abs(xv), (
            (x, lambda g: g * sgn),
        ))

    def signed_sqrt(self, x) -> Var:
        """y = sign(x) * sqrt(|x|); derivative clamps |x| at 1e-8, forward untouched."""
        xv = _value(x)
        y = np.sign(xv) * np.sqrt(np.abs(xv))
        dydx = 0.5 / np.sqrt(np.maximum(np.abs(xv), SIGNED_SQRT_CLAMP))
        return self._emit("signed_sqrt", y, (
            (x, lambda g: g * dydx),
        ))

    def square(self, x) -> Var:
        xv = _value(x)
        return self._emit("square", xv * xv, (
            (x, lambda g: g * (2.0 * xv)),
        ))

    def add(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        return self._emit("add", av + bv, ((a, lambda g: g), (b, lambda g: g)))

    def sub(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        return self._emit("sub", av - bv, ((a, lambda g: g), (b, lambda g: -g)))

    def affine(self, x, scale: float, shift: float = 0.0) -> Var:
        xv = _value(x)
        return self._emit("affine", scale * xv + shift, (
            (x, lambda g: g * scale),
        ))

    def l2_normalize(self, x) -> Var:
        """Rows of x (n, k) scaled to unit norm; eps added to the norm both ways."""
        xv = _value(x)
        m = np.sqrt((xv * xv).sum(axis=-1, keepdims=True)) + L2_NORM_EPS
        y = xv / m
        def pull(g):
            return g / m - xv * ((xv * g).sum(axis=-1, keepdims=True) / m ** 3)
        return self._emit("l2_normalize", y, ((x, pull),))

    # -- sketch projections ----------------------------------------------

    def count_sketch(self, x, h, s, d: int) -> Var:
        """Signed scatter of the last axis: x (n, c) -> (n, d); h, s are constants."""
        xv = _value(x)
        sf = np.asarray(s, dtype=np.float64)
        y = count_sketch_kernel(xv, h, sf, d)
        return self._emit("count_sketch", y, (
            (x, lambda g: sf * g[..., h]),
        ))

    def temporal_count_sketch(self, x, h, s, d: int) -> Var:
        """Time-summed signed scatter: x (n, c, t), s (c, t) -> (n, d)."""
        xv = _value(x)
        sf = np.asarray(s, dtype=np.float64)
        y = temporal_sketch_kernel(xv, h, sf, d)
        return self._emit("temporal_count_sketch", y, (
            (x, lambda g: g[..., h, None] * sf),
        ))

    def circular_convolve(self, a, b) -> Var:
        """Circular convolution along the last axis; gradients are correlations."""
        av, bv = _value(a), _value(b)
        y = circular_convolve_kernel(av, bv)
        return self._emit("circular_convolve", y, (
            (a, lambda g: circular_correlate_kernel(g, bv)),
            (b, lambda g: circular_correlate_kernel(g, av)),
        ))

    # -- pooling / shuffling ---------------------------------------------

    def sum_pool(self, x, axis=None) -> Var:
        xv = _value(x)
        y = xv.sum(axis=axis)
        def pull(g):
            if axis is None:
                return np.broadcast_to(g, xv.shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()
        return self._emit("sum_pool", y, ((x, pull),))

    def mean_pool(self, x, axis: int) -> Var:
        xv = _value(x)
        k = xv.shape[axis]
        def pull(g):
            return np.broadcast_to(np.expand_dims(g, axis), xv.shape) / k
        return self._emit("mean_pool", xv.mean(axis=axis), ((x, pull),))

    def reshape(self, x, shape) -> Var:
        xv = _value(x)
        return self._emit("reshape", xv.reshape(shape), (
            (x, lambda g: g.reshape(xv.shape)),
        ))

    def transpose(self, x, axes) -> Var:
        xv = _value(x)
        inverse = tuple(np.argsort(axes))
        return self._emit("transpose", xv.transpose(axes), (
            (x, lambda g: g.transpose(inverse)),
        ))

    def take_rows(self, x, indices) -> Var:
        """Gather rows of x (n, k) by an int index array (may repeat rows)."""
        xv = _value(x)
        idx = np.asarray(indices, dtype=np.int64)
        def pull(g):
            out = np.zeros_like(xv)
            np.add.at(out, idx, g)
            return out
        return self._emit("take_rows", xv[idx], ((x, pull),))

    # -- backward ----------------------------------------------------------

    def backward(self, out: Var, seed_grad=None) -> None:
        """Accumulate gradients of every tracked input, seeding ``out`` with ``seed_grad``."""
        if not self.record or not self.nodes:
            raise BackwardError("backward needs a recording tape with at least one node")
        if seed_grad is None:
            seed_grad = np.ones_like(out.value)
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != out.value.shape:
            raise BackwardError(
                f"seed gradient shape {seed_grad.shape} does not match output {out.value.shape}"
            )
        out.grad = seed_grad if out.grad is None else out.grad + seed_grad
        for node_id in range(len(self.nodes) - 1, -1, -1):
            op, node_out, pulls = self.nodes[node_id]
            g = node_out.grad
            if g is None:
                continue
            for var, pull in pulls:
                contrib = pull(g)
                if contrib.shape != var.value.shape:
                    raise BackwardError(
                        f"node #{node_id} ({op}): gradient shape {contrib.shape} "
                        f"does not match value shape {var.value.shape}"
                    )
                var.grad = contrib if var.grad is None else var.grad + contrib


# ---------------------------------------------------------------------------
# Finite differences.

def finite_difference_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - n) / denom).max())
