"""Feature-file and manifest formats plus a synthetic orderable-scene generator.

One feature file holds one modality of one clip as a float32 (c, t_full)
matrix with a trailing CRC64. A dataset is a JSON-lines manifest whose lines
each describe one scene: its split, and its clips in ground-truth temporal
order with per-modality file paths relative to the manifest.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binary import Reader, Writer, check_trailing_crc
from .encoder import MODALITY_ORDER, ClipFeatures, ModalityFeature
from .ordering import Scene

FEATURE_MAGIC = b"MMFE"
FEATURE_VERSION = 1
_DTYPE_F32 = 0
_HEADER_SIZE = len(FEATURE_MAGIC) + 4 + 1 + 4 + 4 + 1

SPLITS = ("train", "val", "test")

# Scene-size counts of the reference validation split (sizes 2..6).
VALIDATION_SIZE_HISTOGRAM = {2: 958, 3: 472, 4: 203, 5: 100, 6: 51}
TEST_SIZE_HISTOGRAM = {2: 1333, 3: 588, 4: 325, 5: 135, 6: 62}


class FormatError(ValueError):
    """A dataset file or manifest violates the on-disk contract."""


def write_feature_file(path, modality: str, data: np.ndarray):
    """Write one modality of one clip as float32 little-endian with CRC64."""
    if modality not in MODALITY_ORDER:
        raise ValueError(f"unknown modality tag {modality!r}")
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"feature data must be 2-D, got shape {arr.shape}")
    w = Writer()
    w.bytes_(FEATURE_MAGIC)
    w.u32(FEATURE_VERSION)
    w.u8(ord(modality))
    w.u32(arr.shape[0])
    w.u32(arr.shape[1])
    w.u8(_DTYPE_F32)
    w.bytes_(arr.astype("<f4").tobytes())
    Path(path).write_bytes(w.getvalue(with_crc=True))


def _parse_header(r: Reader, what: str):
    if r.bytes_(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
        raise FormatError(f"{what}: bad feature-file magic")
    version = r.u32()
    if version != FEATURE_VERSION:
        raise FormatError(f"{what}: unsupported feature-file version {version}")
    modality = chr(r.u8())
    c, t_full = r.u32(), r.u32()
    dtype = r.u8()
    if dtype != _DTYPE_F32:
        raise FormatError(f"{what}: unsupported dtype code {dtype}")
    if modality not in MODALITY_ORDER:
        raise FormatError(f"{what}: unknown modality tag {modality!r}")
    return modality, c, t_full


def peek_feature_header(path):
    """Read (modality, c, t_full) from the fixed-size header without the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER_SIZE)
    return _parse_header(Reader(head), str(path))


def read_feature_file(path):
    """Fully read and CRC-verify one feature file -> (modality, float32 array)."""
    blob = Path(path).read_bytes()
    try:
        payload = check_trailing_crc(blob, str(path))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    r = Reader(payload)
    modality, c, t_full = _parse_header(r, str(path))
    expected = 4 * c * t_full
    if r.remaining() != expected:
        raise FormatError(f"{path}: payload holds {r.remaining()} bytes, expected {expected}")
    data = np.frombuffer(r.bytes_(expected), dtype="<f4").reshape(c, t_full)
    return modality, data


@dataclass
class ClipSource:
    """Lazy handle for one clip's feature files; shapes and CRCs checked on first read."""

    clip_id: str
    t_full: int
    paths: dict  # modality tag -> absolute Path
    _cache: dict = field(default_factory=dict, repr=False)

    def load(self, modalities=None) -> ClipFeatures:
        tags = tuple(self.paths) if modalities is None else tuple(modalities)
        feats = {}
        for tag in tags:
            if tag not in self.paths:
                raise FormatError(f"clip {self.clip_id}: no feature file for modality {tag!r}")
            if tag not in self._cache:
                modality, data = read_feature_file(self.paths[tag])
                if modality != tag:
                    raise FormatError(
                        f"{self.paths[tag]}: holds modality {modality!r}, manifest says {tag!r}"
                    )
                if data.shape[1] != self.t_full:
                    raise FormatError(
                        f"{self.paths[tag]}: t_full {data.shape[1]} != declared {self.t_full}"
                    )
                if not np.all(np.isfinite(data)):
                    raise FormatError(f"{self.paths[tag]}: non-finite feature values")
                if tag == "S" and not np.all(data == data[:, :1]):
                    raise FormatError(
                        f"{self.paths[tag]}: text features must be replicated across segments"
                    )
                self._cache[tag] = ModalityFeature(modality=tag, data=data)
            feats[tag] = self._cache[tag]
        return ClipFeatures(clip_id=self.clip_id, modalities=feats)


@dataclass
class SceneDataset:
    """Scenes grouped by split plus lazy clip sources and per-modality channel dims."""

    root: Path
    scenes_by_split: dict
    clips: dict       # clip_id -> ClipSource
    channels: dict    # modality tag -> channel count

    def scenes(self, split=None) -> list:
        if split is None:
            return [s for lst in self.scenes_by_split.values() for s in lst]
        return list(self.scenes_by_split.get(split, []))

    def size_histogram(self, split=None) -> dict:
        hist = {}
        for scene in self.scenes(split):
            hist[scene.size] = hist.get(scene.size, 0) + 1
        return dict(sorted(hist.items()))

    def validate(self) -> int:
        """Eagerly read every referenced file; returns the number of clips checked."""
        for clip in self.clips.values():
            clip.load()
        return len(self.clips)


def load_manifest(path) -> SceneDataset:
    """Parse a JSON-lines manifest; file existence and headers are checked here,
    payloads and CRCs on first read."""
    path = Path(path)
    root = path.parent
    scenes_by_split = {}
    clips = {}
    channels = {}
    seen_scene_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                scene_id = entry["scene_id"]
                split = entry["split"]
                clip_entries = entry["clips"]
            except (KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
            if split not in SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            if scene_id in seen_scene_ids:
                raise FormatError(f"{path}:{lineno}: duplicate scene id {scene_id!r}")
            seen_scene_ids.add(scene_id)
            try:
                scene = Scene(scene_id=scene_id, clip_ids=[c["clip_id"] for c in clip_entries])
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            for centry in clip_entries:
                clip_id = centry["clip_id"]
                t_full = int(centry["t_full"])
                paths = {tag: (root / rel).resolve()
                         for tag, rel in centry["features"].items()}
                if clip_id in clips:
                    existing = clips[clip_id]
                    if existing.t_full != t_full or existing.paths != paths:
                        raise FormatError(
                            f"{path}:{lineno}: clip {clip_id!r} redeclared inconsistently"
                        )
                    continue
                for tag, fpath in paths.items():
                    if tag not in MODALITY_ORDER:
                        raise FormatError(f"{path}:{lineno}: unknown modality tag {tag!r}")
                    if not fpath.is_file():
                        raise FormatError(f"{path}:{lineno}: missing feature file {fpath}")
                    modality, c, file_t = peek_feature_header(fpath)
                    if modality != tag:
                        raise FormatError(
                            f"{fpath}: holds modality {modality!r}, manifest says {tag!r}"
                        )
                    if file_t != t_full:
                        raise FormatError(
                            f"{fpath}: t_full {file_t} != declared {t_full}"
                        )
                    if tag in channels and channels[tag] != c:
                        raise FormatError(
                            f"{fpath}: modality {tag!r} has {c} channels, "
                            f"expected {channels[tag]}"
                        )
                    channels.setdefault(tag, c)
                clips[clip_id] = ClipSource(clip_id=clip_id, t_full=t_full, paths=paths)
            scenes_by_split.setdefault(split, []).append(scene)
    return SceneDataset(root=root, scenes_by_split=scenes_by_split, clips=clips,
                        channels=channels)


# ---------------------------------------------------------------------------
# Synthetic data.

DEFAULT_SYNTH_CHANNELS = {"A": 24, "P": 48, "I": 48}
DEFAULT_T_WEIGHTS = {4: 0.65, 5: 0.175, 6: 0.175}


def _normalized_weights(weights: dict, name: str) -> dict:
    total = float(sum(weights.values()))
    if total <= 0 or any(v < 0 for v in weights.values()):
        raise ValueError(f"{name} must have nonnegative weights and positive sum")
    if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
        weights = {k: v / total for k, v in weights.items()}
    return weights


@dataclass
class SynthConfig:
    """Knobs for the synthetic generator.

    Each scene embeds a monotone latent progression: clip k of M gets
    ``noise + signal_strength * (k / M) * u_modality`` for a fixed random unit
    direction per modality, so ``signal_strength = 0`` is a pure-noise
    (chance-level) task. Text-like modality S is generated as one column
    replicated across segments.
    """

    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    size_weights: dict = field(default_factory=lambda: dict(VALIDATION_SIZE_HISTOGRAM))
    channels: dict = field(default_factory=lambda: dict(DEFAULT_SYNTH_CHANNELS))
    t_weights: dict = field(default_factory=lambda: dict(DEFAULT_T_WEIGHTS))
    signal_strength: float = 1.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.size_weights = _normalized_weights(
            {int(k): float(v) for k, v in self.size_weights.items()}, "size_weights")
        self.t_weights = _normalized_weights(
            {int(k): float(v) for k, v in self.t_weights.items()}, "t_weights")
        for m in self.size_weights:
            if not 2 <= m <= 6:
                raise ValueError(f"scene sizes must lie in 2..6, got {m}")
        for tag in self.channels:
            if tag not in MODALITY_ORDER:
                raise ValueError(f"unknown modality tag {tag!r}")


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write a synthetic dataset under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(cfg.seed))

    tags = tuple(tag for tag in MODALITY_ORDER if tag in cfg.channels)
    directions = {}
    for tag in tags:
        u = rng.normal(size=cfg.channels[tag])
        directions[tag] = u / np.linalg.norm(u)

    sizes = sorted(cfg.size_weights)
    size_p = np.array([cfg.size_weights[m] for m in sizes])
    ts = sorted(cfg.t_weights)
    t_p = np.array([cfg.t_weights[k] for k in ts])

    manifest_path = out_dir / "manifest.jsonl"
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for split in SPLITS:
            for s_idx in range(counts[split]):
                scene_id = f"{split}-{s_idx:05d}"
                m = int(rng.choice(sizes, p=size_p))
                clip_entries = []
                for k in range(m):
                    clip_id = f"{scene_id}-c{k}"
                    t_full = int(rng.choice(ts, p=t_p))
                    features = {}
                    for tag in tags:
                        c = cfg.channels[tag]
                        if tag == "S":
                            col = rng.normal(0.0, cfg.noise_std, size=(c, 1))
                            data = np.repeat(col, t_full, axis=1)
                        else:
                            data = rng.normal(0.0, cfg.noise_std, size=(c, t_full))
                        data = data + cfg.signal_strength * (k / m) * directions[tag][:, None]
                        rel = f"features/{clip_id}_{tag}.mmfe"
                        write_feature_file(out_dir / rel, tag, data)
                        features[tag] = rel
                    clip_entries.append(
                        {"clip_id": clip_id, "t_full": t_full, "features": features})
                mf.write(json.dumps(
                    {"scene_id": scene_id, "split": split, "clips": clip_entries}) + "\n")
    return manifest_path
