"""Clip representation: modality concat, segment sampling, encoding, and the head.

The pipeline for one clip is
    sample t segments -> concat modalities over channels -> 1x1 channel
    reduction (multi-modality only) -> encoding method -> signed sqrt ->
    l2 normalize -> v_clip = W1 v + b1 -> phi = |W2 relu(v_clip) + b2|
where the encoding method is one of tcbp, cbp, meanpool, or concat (flatten
segments after reduction). phi is the nonnegative ordering feature.
"""

from dataclasses import dataclass

import numpy as np

from ._binary import Reader, Writer, check_trailing_crc
from .autodiff import Param, Tape, Var
from .sketching import (
    MODE_CBP,
    MODE_TCBP,
    SKETCH_PARAMS_BLOB_SIZE,
    init_sketch_params,
    sketch_params_from_bytes,
    sketch_params_to_bytes,
)
from .validation import check_feature_map, check_positive_int

MODALITY_ORDER = "APIRS"
REFERENCE_CHANNELS = {"A": 256, "P": 2048, "I": 2048, "R": 2048, "S": 300}

METHOD_TCBP = "tcbp"
METHOD_CBP = "cbp"
METHOD_MEANPOOL = "meanpool"
METHOD_CONCAT = "concat"
METHODS = (METHOD_TCBP, METHOD_CBP, METHOD_MEANPOOL, METHOD_CONCAT)

SAMPLING_RANDOM = "random"
SAMPLING_C_FIRST = "c_first"
SAMPLING_C_LAST = "c_last"
SAMPLINGS = (SAMPLING_RANDOM, SAMPLING_C_FIRST, SAMPLING_C_LAST)

CHECKPOINT_MAGIC = b"TCBPMDL"
CHECKPOINT_VERSION = 1

_SEED_WEIGHTS = 0x57
_SEED_SKETCH = 0x51


class EncodingError(RuntimeError):
    """Raised when a pipeline stage produces non-finite values."""


def mix_seed(seed: int, tag: int) -> int:
    """Derive a decorrelated 64-bit stream key from (seed, tag) via splitmix64."""
    z = (seed * 0x9E3779B97F4A7C15 + tag) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class ModalityFeature:
    """Features of one modality for one clip, shaped (channels, t_full)."""

    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITY_ORDER:
            raise ValueError(f"unknown modality tag {self.modality!r}")
        self.data = check_feature_map(self.data, f"modality {self.modality} features")


@dataclass
class ClipFeatures:
    clip_id: str
    modalities: dict  # tag -> ModalityFeature

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"clip {self.clip_id}: no modalities")
        lengths = {m.data.shape[1] for m in self.modalities.values()}
        if len(lengths) > 1:
            raise ValueError(f"clip {self.clip_id}: modalities disagree on t_full {lengths}")

    @property
    def t_full(self) -> int:
        return next(iter(self.modalities.values())).data.shape[1]


@dataclass
class ClipEmbedding:
    v_clip: np.ndarray  # generic clip representation
    phi: np.ndarray     # nonnegative ordering feature


def choose_window(t_full: int, t: int, strategy: str, rng=None) -> int:
    """Start offset of a run of ``t`` consecutive segments out of ``t_full``."""
    if t_full < t:
        raise ValueError(f"clip too short: has {t_full} segments, need {t}")
    if strategy == SAMPLING_C_FIRST:
        return 0
    if strategy == SAMPLING_C_LAST:
        return t_full - t
    if strategy == SAMPLING_RANDOM:
        if rng is None:
            raise ValueError("random sampling needs an rng")
        return int(rng.integers(0, t_full - t + 1))
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def sample_segments(clip: ClipFeatures, t: int, strategy: str, rng_seed: int = 0) -> dict:
    """Slice the same ``t``-segment window out of every modality of ``clip``."""
    rng = np.random.Generator(np.random.Philox(rng_seed))
    start = choose_window(clip.t_full, t, strategy, rng)
    return {tag: m.data[:, start:start + t] for tag, m in clip.modalities.items()}


def concat_modalities(maps: dict, modality_set: tuple) -> np.ndarray:
    """Row-stack per-modality (c_i, t) maps in fixed A,P,I,R,S order."""
    missing = [tag for tag in modality_set if tag not in maps]
    if missing:
        raise ValueError(f"missing modality {missing[0]!r}")
    return np.concatenate([np.asarray(maps[tag], dtype=np.float64) for tag in modality_set], axis=0)


def _ordered_modalities(modalities) -> tuple:
    tags = tuple(tag for tag in MODALITY_ORDER if tag in set(modalities))
    if len(tags) != len(set(modalities)):
        unknown = set(modalities) - set(MODALITY_ORDER)
        raise ValueError(f"unknown modality tags {sorted(unknown)}")
    if not tags:
        raise ValueError("at least one modality is required")
    return tags


class EncoderModel:
    """All learnable state plus the frozen sketch tables and method selection.

    Dimensions default to the full-scale configuration (reduce to 2048,
    d=8192, heads 4096/2048; meanpool heads 2048/1024) and can be shrunk for
    desk-scale runs. Single-modality models skip channel reduction.
    """

    def __init__(self, channels: dict, method: str = METHOD_TCBP, t: int = 3,
                 d: int = 8192, reduce_dim: int = 2048, hidden_dim: int | None = None,
                 phi_dim: int | None = None, sampling: str = SAMPLING_C_LAST,
                 seed: int = 0):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        if sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}, got {sampling!r}")
        self.modality_set = _ordered_modalities(channels)
        self.channels = {tag: check_positive_int(channels[tag], f"channels[{tag}]")
                         for tag in self.modality_set}
        self.method = method
        self.t = check_positive_int(t, "t")
        self.d = check_positive_int(d, "d")
        self.sampling = sampling
        self.seed = int(seed)

        self.c_total = sum(self.channels.values())
        self.reduce_dim = check_positive_int(reduce_dim, "reduce_dim")
        self.reduces = len(self.modality_set) > 1
        c_enc = self.reduce_dim if self.reduces else self.c_total

        if hidden_dim is None:
            hidden_dim = 2048 if method == METHOD_MEANPOOL else 4096
        if phi_dim is None:
            phi_dim = 1024 if method == METHOD_MEANPOOL else 2048
        self.hidden_dim = check_positive_int(hidden_dim, "hidden_dim")
        self.phi_dim = check_positive_int(phi_dim, "phi_dim")

        if method == METHOD_TCBP:
            self.sketch = init_sketch_params(c_enc, self.t, self.d,
                                             mix_seed(self.seed, _SEED_SKETCH), MODE_TCBP)
            v_dim = self.d
        elif method == METHOD_CBP:
            self.sketch = init_sketch_params(c_enc, 1, self.d,
                                             mix_seed(self.seed, _SEED_SKETCH), MODE_CBP)
            v_dim = self.d
        elif method == METHOD_MEANPOOL:
            self.sketch = None
            v_dim = c_enc
        else:  # concat: flatten the t reduced segment vectors
            self.sketch = None
            v_dim = c_enc * self.t
        self.c_enc = c_enc
        self.v_dim = v_dim

        rng = np.random.Generator(np.random.Philox(mix_seed(self.seed, _SEED_WEIGHTS)))
        def linear(name, out_dim, in_dim):
            bound = 1.0 / np.sqrt(in_dim)
            w = Param(rng.uniform(-bound, bound, size=(out_dim, in_dim)), name)
            b = Param(np.zeros(out_dim), name.replace("w", "b"), decay=False)
            return w, b

        if self.reduces:
            self.reduce_w, self.reduce_b = linear("reduce.w", self.reduce_dim, self.c_total)
        else:
            self.reduce_w = self.reduce_b = None
        self.w1, self.b1 = linear("head.w1", self.hidden_dim, v_dim)
        self.w2, self.b2 = linear("head.w2", self.phi_dim, self.hidden_dim)

    # -- parameter access --------------------------------------------------

    def params(self) -> list:
        out = []
        if self.reduces:
            out += [self.reduce_w, self.reduce_b]
        out += [self.w1, self.b1, self.w2, self.b2]
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    # -- forward -------------------------------------------------------------

    def _check_stage(self, stage: str, value: np.ndarray):
        if not np.all(np.isfinite(value)):
            raise EncodingError(f"non-finite values after stage {stage!r}")

    def forward(self, tape: Tape, x) -> tuple:
        """Run a batch x (n, c, t) through the pipeline; returns (v_clip, phi) vars."""
        x = x if isinstance(x, Var) else Var(x)
        n = x.value.shape[0]
        self._check_stage("input", x.value)
        if x.value.shape[1] != self.c_total or x.value.shape[2] != self.t:
            raise ValueError(
                f"expected batch shaped (n, {self.c_total}, {self.t}), got {x.value.shape}"
            )

        if self.reduces:
            cols = tape.reshape(tape.transpose(x, (0, 2, 1)), (n * self.t, self.c_total))
            red = tape.bias_add(tape.matmul(cols, self.reduce_w), self.reduce_b)
            x = tape.transpose(tape.reshape(red, (n, self.t, self.reduce_dim)), (0, 2, 1))
            self._check_stage("reduce", x.value)

        if self.method == METHOD_TCBP:
            p = self.sketch
            u1 = tape.temporal_count_sketch(x, p.h1, p.s1, p.d)
            u2 = tape.temporal_count_sketch(x, p.h2, p.s2, p.d)
            v = tape.circular_convolve(u1, u2)
        elif self.method == METHOD_CBP:
            p = self.sketch
            cols = tape.reshape(tape.transpose(x, (0, 2, 1)), (n * self.t, self.c_enc))
            u1 = tape.count_sketch(cols, p.h1, p.s1, p.d)
            u2 = tape.count_sketch(cols, p.h2, p.s2, p.d)
            per_loc = tape.circular_convolve(u1, u2)
            v = tape.sum_pool(tape.reshape(per_loc, (n, self.t, p.d)), axis=1)
        elif self.method == METHOD_MEANPOOL:
            v = tape.mean_pool(x, axis=2)
        else:  # concat: time-major concatenation of segment vectors
            v = tape.reshape(tape.transpose(x, (0, 2, 1)), (n, self.c_enc * self.t))
        self._check_stage("encode", v.value)

        v = tape.l2_normalize(tape.signed_sqrt(v))
        self._check_stage("normalize", v.value)
        v_clip = tape.bias_add(tape.matmul(v, self.w1), self.b1)
        phi = tape.abs_val(tape.bias_add(tape.matmul(tape.relu(v_clip), self.w2), self.b2))
        self._check_stage("head", phi.value)
        return v_clip, phi

    def choose_windows(self, clips, strategy: str | None = None, rng=None,
                       rng_seed: int = 0) -> list:
        """Per-clip window start offsets under the given sampling strategy."""
        strategy = self.sampling if strategy is None else strategy
        if rng is None:
            rng = np.random.Generator(np.random.Philox(rng_seed))
        return [choose_window(clip.t_full, self.t, strategy, rng) for clip in clips]

    def stack_clips(self, clips, starts) -> np.ndarray:
        """Concat modalities over the chosen windows and stack into (n, c, t)."""
        rows = []
        for clip, start in zip(clips, starts):
            missing = [tag for tag in self.modality_set if tag not in clip.modalities]
            if missing:
                raise ValueError(f"clip {clip.clip_id}: missing modality {missing[0]!r}")
            maps = {tag: clip.modalities[tag].data[:, start:start + self.t]
                    for tag in self.modality_set}
            rows.append(concat_modalities(maps, self.modality_set))
        return np.stack(rows, axis=0)

    def batch_from_clips(self, clips, strategy: str | None = None, rng=None,
                         rng_seed: int = 0) -> np.ndarray:
        """Sample windows and concat modalities for a list of clips -> (n, c, t)."""
        starts = self.choose_windows(clips, strategy=strategy, rng=rng, rng_seed=rng_seed)
        return self.stack_clips(clips, starts)

    def encode_clips(self, clips, strategy: str | None = None, rng_seed: int = 0) -> tuple:
        """Encode many clips without recording; returns (v_clip, phi) arrays."""
        x = self.batch_from_clips(clips, strategy=strategy, rng_seed=rng_seed)
        v_clip, phi = self.forward(Tape(record=False), x)
        return v_clip.value, phi.value

    def encode_clip(self, clip: ClipFeatures, rng_seed: int = 0) -> ClipEmbedding:
        v, phi = self.encode_clips([clip], rng_seed=rng_seed)
        return ClipEmbedding(v_clip=v[0], phi=phi[0])

    # -- checkpointing -------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        w = Writer()
        w.bytes_(CHECKPOINT_MAGIC)
        w.u32(CHECKPOINT_VERSION)
        w.u8(METHODS.index(self.method))
        w.u8(SAMPLINGS.index(self.sampling))
        w.u8(len(self.modality_set))
        for tag in self.modality_set:
            w.u8(ord(tag))
            w.u32(self.channels[tag])
        for dim in (self.t, self.d, self.reduce_dim, self.hidden_dim, self.phi_dim):
            w.u32(dim)
        w.u64(self.seed & 0xFFFFFFFFFFFFFFFF)
        if self.sketch is None:
            w.u8(0)
        else:
            w.u8(1)
            w.bytes_(sketch_params_to_bytes(self.sketch))
        params = self.params()
        w.u8(len(params))
        for p in params:
            name = p.name.encode()
            w.u8(len(name))
            w.bytes_(name)
            w.u8(p.value.ndim)
            for dim in p.value.shape:
                w.u32(dim)
            w.bytes_(p.value.astype("<f4").tobytes())
        return w.getvalue(with_crc=True)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        return cls.from_bytes(blob, what=str(path))

    @classmethod
    def from_bytes(cls, blob: bytes, what: str = "checkpoint") -> "EncoderModel":
        payload = check_trailing_crc(blob, what)
        r = Reader(payload)
        if r.bytes_(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{what}: bad checkpoint magic")
        version = r.u32()
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{what}: unsupported checkpoint version {version}")
        method = METHODS[r.u8()]
        sampling = SAMPLINGS[r.u8()]
        n_mod = r.u8()
        channels = {}
        for _ in range(n_mod):
            tag = chr(r.u8())
            channels[tag] = r.u32()
        t, d, reduce_dim, hidden_dim, phi_dim = (r.u32() for _ in range(5))
        seed = r.u64()
        sketch = None
        if r.u8():
            sketch = sketch_params_from_bytes(r.bytes_(SKETCH_PARAMS_BLOB_SIZE))
        model = cls(channels, method=method, t=t, d=d, reduce_dim=reduce_dim,
                    hidden_dim=hidden_dim, phi_dim=phi_dim, sampling=sampling, seed=seed)
        if (model.sketch is None) != (sketch is None):
            raise ValueError(f"{what}: sketch presence disagrees with method")
        if sketch is not None and sketch.checksum() != model.sketch.checksum():
            raise ValueError(f"{what}: sketch tables do not match the stored seed")
        by_name = {p.name: p for p in model.params()}
        n_params = r.u8()
        if n_params != len(by_name):
            raise ValueError(f"{what}: expected {len(by_name)} parameters, found {n_params}")
        for _ in range(n_params):
            name = r.bytes_(r.u8()).decode()
            ndim = r.u8()
            shape = tuple(r.u32() for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.bytes_(4 * count), dtype="<f4").reshape(shape)
            if name not in by_name:
                raise ValueError(f"{what}: unknown parameter {name!r}")
            if by_name[name].value.shape != shape:
                raise ValueError(f"{what}: parameter {name!r} has shape {shape}, "
                                 f"expected {by_name[name].value.shape}")
            by_name[name].value = data.astype(np.float64)
        return model
