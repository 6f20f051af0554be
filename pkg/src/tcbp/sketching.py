"""Count-sketch projections, FFT circular convolution, and the CBP/TCBP encoders.

A sketch is defined by two hash vectors ``h1, h2`` mapping channels to output
slots and two sign arrays ``s1, s2``. In CBP mode the signs are per channel; in
TCBP mode they are per (channel, temporal segment) while the hashes stay a
function of the channel alone, so every time step of a channel lands in the
same slot with a time-varying sign.
"""

from dataclasses import dataclass

import numpy as np

from ._binary import Reader, Writer, crc64
from .validation import (
    check_feature_map,
    check_hash_vector,
    check_positive_int,
    check_sign_array,
    check_vector,
)

MODE_CBP = "cbp"
MODE_TCBP = "tcbp"
_MODE_CODES = {MODE_CBP: 0, MODE_TCBP: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

PARAMS_MAGIC = b"TCBPSKP"
PARAMS_VERSION = 1

DEFAULT_OUTPUT_DIM = 8192


@dataclass(frozen=True)
class SketchParams:
    """Frozen random projection tables. Generate via :func:`init_sketch_params`."""

    d: int
    c: int
    t: int
    mode: str
    seed: int
    h1: np.ndarray  # (c,) int64 in [0, d)
    h2: np.ndarray
    s1: np.ndarray  # (c,) int8 for CBP, (c, t) int8 for TCBP
    s2: np.ndarray

    def __post_init__(self):
        for name in ("h1", "h2", "s1", "s2"):
            getattr(self, name).setflags(write=False)

    @property
    def sign_shape(self) -> tuple:
        return (self.c,) if self.mode == MODE_CBP else (self.c, self.t)

    def param_count(self) -> int:
        """Total stored (h, s) entries: 2*2c for CBP, 2*(c + c*t) for TCBP."""
        return self.h1.size + self.h2.size + self.s1.size + self.s2.size

    def checksum(self) -> int:
        """CRC64 over the canonical byte layout of (h1, h2, s1, s2)."""
        crc = 0
        for h in (self.h1, self.h2):
            crc = crc64(h.astype("<u4").tobytes(), crc)
        for s in (self.s1, self.s2):
            crc = crc64(s.astype(np.int8).tobytes(), crc)
        return crc


def _raw_uint64(seed: int, n: int) -> np.ndarray:
    """Platform-independent uint64 stream from the Philox counter-based generator."""
    return np.asarray(np.random.Philox(seed).random_raw(n), dtype=np.uint64)


def init_sketch_params(c: int, t: int, d: int, seed: int, mode: str = MODE_TCBP) -> SketchParams:
    """Draw the (h, s) tables for a sketch of ``c`` channels onto ``d`` slots.

    The draw order is h1, h2, s1, s2 from one Philox stream keyed by ``seed``;
    hashes use the modulo-``d`` mapping of the raw 64-bit words and signs use
    their low bit, so the tables regenerate bit-exactly on any platform. TCBP
    at t=1 therefore draws the same values as CBP for the same seed.
    """
    c = check_positive_int(c, "c")
    t = check_positive_int(t, "t")
    d = check_positive_int(d, "d")
    if mode not in _MODE_CODES:
        raise ValueError(f"mode must be one of {sorted(_MODE_CODES)}, got {mode!r}")
    n_sign = c if mode == MODE_CBP else c * t
    raw = _raw_uint64(seed, 2 * c + 2 * n_sign)
    h1 = (raw[:c] % d).astype(np.int64)
    h2 = (raw[c:2 * c] % d).astype(np.int64)
    signs = (1 - 2 * (raw[2 * c:] & 1)).astype(np.int8)
    if mode == MODE_CBP:
        s1, s2 = signs[:c], signs[c:]
    else:
        s1 = signs[:n_sign].reshape(c, t)
        s2 = signs[n_sign:].reshape(c, t)
    return SketchParams(d=d, c=c, t=t, mode=mode, seed=int(seed), h1=h1, h2=h2, s1=s1, s2=s2)


# ---------------------------------------------------------------------------
# Kernels. These operate on float64 arrays with the reduced axis last and are
# shared by the public single-map API and the autodiff ops, so the two paths
# stay bitwise identical.

def scatter_add(w: np.ndarray, h: np.ndarray, d: int) -> np.ndarray:
    """Accumulate ``w[..., i]`` into slot ``h[i]``: out[..., j] = sum_{i: h[i]=j} w[..., i]."""
    lead = w.shape[:-1]
    w2 = w.reshape(-1, w.shape[-1])
    out = np.zeros((w2.shape[0], d), dtype=np.float64)
    np.add.at(out, (slice(None), h), w2)
    return out.reshape(lead + (d,))


def count_sketch_kernel(x: np.ndarray, h: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    """Signed scatter of the channel axis (last): x (..., c) -> (..., d)."""
    return scatter_add(s * x, h, d)


def temporal_sketch_kernel(x: np.ndarray, h: np.ndarray, s: np.ndarray, d: int) -> np.ndarray:
    """Time-summed signed scatter: x (..., c, t), s (c, t) -> (..., d)."""
    return scatter_add((s * x).sum(axis=-1), h, d)


def circular_convolve_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular convolution along the last axis via the real FFT (any length >= 1)."""
    d = a.shape[-1]
    return np.fft.irfft(np.fft.rfft(a) * np.fft.rfft(b), n=d)


def circular_correlate_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular cross-correlation along the last axis: out[j] = sum_k a[k] b[(k-j) % d]."""
    d = a.shape[-1]
    return np.fft.irfft(np.fft.rfft(a) * np.conj(np.fft.rfft(b)), n=d)


# ---------------------------------------------------------------------------
# Public single-input operations.

def _restore_dtype(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    return out.astype(like.dtype) if like.dtype == np.float32 else out


def count_sketch(x, h, s, d: int) -> np.ndarray:
    """Project a length-c vector to d slots: out[j] = sum_{i: h[i]=j} s[i] * x[i]."""
    d = check_positive_int(d, "d")
    x = check_vector(x, "x")
    c = x.shape[0]
    h = check_hash_vector(h, "h", c, d)
    s = check_sign_array(s, "s", (c,))
    out = count_sketch_kernel(x.astype(np.float64), h, s.astype(np.float64), d)
    return _restore_dtype(out, x)


def circular_convolve(u1, u2) -> np.ndarray:
    """Circular convolution of two equal-length vectors (frequency-domain product)."""
    u1 = check_vector(u1, "u1")
    u2 = check_vector(u2, "u2", length=u1.shape[0])
    out = circular_convolve_kernel(u1.astype(np.float64), u2.astype(np.float64))
    return _restore_dtype(out, u1)


def tensor_sketch(x, params: SketchParams) -> np.ndarray:
    """Sketch the self outer product x (x) x by convolving two count sketches of x."""
    if params.mode != MODE_CBP:
        raise ValueError("tensor_sketch requires CBP-mode params (per-channel signs)")
    x = check_vector(x, "x", length=params.c)
    x64 = x.astype(np.float64)
    u1 = count_sketch_kernel(x64, params.h1, params.s1.astype(np.float64), params.d)
    u2 = count_sketch_kernel(x64, params.h2, params.s2.astype(np.float64), params.d)
    return _restore_dtype(circular_convolve_kernel(u1, u2), x)


def cbp_encode(x, params: SketchParams) -> np.ndarray:
    """Tensor-sketch each temporal column of a (c, t) map and sum-pool over t."""
    if params.mode != MODE_CBP:
        raise ValueError("cbp_encode requires CBP-mode params")
    x = check_feature_map(x, "x", channels=params.c)
    cols = x.T.astype(np.float64)  # (t, c)
    s1 = params.s1.astype(np.float64)
    s2 = params.s2.astype(np.float64)
    u1 = count_sketch_kernel(cols, params.h1, s1, params.d)
    u2 = count_sketch_kernel(cols, params.h2, s2, params.d)
    out = circular_convolve_kernel(u1, u2).sum(axis=0)
    return _restore_dtype(out, x)


def tcbp_encode(x, params: SketchParams) -> np.ndarray:
    """Temporal sketch of a (c, t) map: time-summed signed scatter, then one convolution."""
    if params.mode != MODE_TCBP:
        raise ValueError("tcbp_encode requires TCBP-mode params")
    x = check_feature_map(x, "x", channels=params.c, segments=params.t)
    x64 = x.astype(np.float64)
    u1 = temporal_sketch_kernel(x64, params.h1, params.s1.astype(np.float64), params.d)
    u2 = temporal_sketch_kernel(x64, params.h2, params.s2.astype(np.float64), params.d)
    return _restore_dtype(circular_convolve_kernel(u1, u2), x)


# ---------------------------------------------------------------------------
# Serialization. The tables are regenerated from the stored seed and verified
# against the stored checksum rather than written out in full.

def sketch_params_to_bytes(params: SketchParams) -> bytes:
    w = Writer()
    w.bytes_(PARAMS_MAGIC)
    w.u32(PARAMS_VERSION)
    w.u8(_MODE_CODES[params.mode])
    w.u32(params.c)
    w.u32(params.t)
    w.u32(params.d)
    w.u64(params.seed & 0xFFFFFFFFFFFFFFFF)
    w.u64(params.checksum())
    return w.getvalue()


def sketch_params_from_bytes(blob: bytes) -> SketchParams:
    r = Reader(blob)
    magic = r.bytes_(len(PARAMS_MAGIC))
    if magic != PARAMS_MAGIC:
        raise ValueError(f"bad sketch-params magic {magic!r}")
    version = r.u32()
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported sketch-params version {version}")
    mode_code = r.u8()
    if mode_code not in _MODE_NAMES:
        raise ValueError(f"unknown sketch mode code {mode_code}")
    c, t, d = r.u32(), r.u32(), r.u32()
    seed = r.u64()
    stored_checksum = r.u64()
    params = init_sketch_params(c, t, d, seed, _MODE_NAMES[mode_code])
    actual = params.checksum()
    if actual != stored_checksum:
        raise ValueError(
            f"sketch table checksum mismatch (stored {stored_checksum:#018x}, "
            f"regenerated {actual:#018x})"
        )
    return params


SKETCH_PARAMS_BLOB_SIZE = len(sketch_params_to_bytes(init_sketch_params(1, 1, 1, 0, MODE_CBP)))
