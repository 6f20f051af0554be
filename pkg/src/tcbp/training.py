"""Mini-batch SGD training on ordered clip pairs, and ordering evaluation.

Each iteration samples ``batch_size`` scenes with replacement, one forward
pair per scene, and optionally corrupts each pair (1:1 ratio) by replacing
the later clip with a random clip from another scene in the batch. The
batch objective is the sum of order-violation losses plus margin hinges on
the corrupted pairs; parameters follow heavy-ball SGD with weight decay
added to the gradient (biases excluded).
"""

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tape
from .encoder import SAMPLINGS, ClipFeatures, EncoderModel, mix_seed
from .ordering import OrderingResult, Scene, chance_accuracy, infer_order

_SEED_TRAIN = 0x7A
_SEED_EVAL = 0xE7
_SEED_SHUFFLE = 0x5F


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    iterations: int = 5000
    alpha: float = 0.2
    use_negatives: bool = False
    seed: int = 0
    sampling: str = "c_last"
    t: int = 3

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")


class SGD:
    """Heavy-ball SGD: v <- mu*v - lr*(g + wd*theta); theta <- theta + v."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}
        self.iteration = 0

    def step(self):
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            v = self.momentum * self.velocity[p.name] - self.lr * g
            self.velocity[p.name] = v
            p.value = p.value + v
            p.grad = None
        self.iteration += 1

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, _iteration=np.int64(self.iteration), **self.velocity)
        return buf.getvalue()

    def load_state(self, blob: bytes):
        with np.load(io.BytesIO(blob)) as data:
            self.iteration = int(data["_iteration"])
            for name in self.velocity:
                arr = data[name]
                if arr.shape != self.velocity[name].shape:
                    raise ValueError(f"velocity {name!r} has shape {arr.shape}, "
                                     f"expected {self.velocity[name].shape}")
                self.velocity[name] = arr
        return self


class TrainPair(NamedTuple):
    clip_i: ClipFeatures
    clip_j: ClipFeatures          # ground truth: clip_i precedes clip_j
    corrupt: ClipFeatures | None  # replacement for clip_j in the negative term


def sample_pair(scene: Scene, rng) -> tuple:
    """Uniform draw over the M(M-1)/2 forward pairs -> (i, j) indices with i < j."""
    m = scene.size
    if m < 2:
        raise ValueError(f"scene {scene.scene_id}: need at least 2 clips")
    k = int(rng.integers(0, m * (m - 1) // 2))
    # unrank k into the (i, j) pair, enumerating i-major
    i = 0
    block = m - 1
    while k >= block:
        k -= block
        i += 1
        block -= 1
    return i, i + 1 + k


def train_step(model: EncoderModel, batch, optimizer: SGD, config: TrainConfig,
               rng=None) -> float:
    """One SGD update on a batch of (ordered, optionally corrupted) clip pairs.

    Returns the mean per-pair batch loss (positive term plus the pair's
    negative hinge when present).
    """
    if not batch:
        raise ValueError("empty batch")
    clips = []
    idx_i, idx_j, neg_i, neg_c = [], [], [], []
    for pair in batch:
        idx_i.append(len(clips)); clips.append(pair.clip_i)
        idx_j.append(len(clips)); clips.append(pair.clip_j)
        if pair.corrupt is not None:
            neg_i.append(idx_i[-1])
            neg_c.append(len(clips)); clips.append(pair.corrupt)

    x = model.batch_from_clips(clips, strategy=config.sampling, rng=rng)
    tape = Tape()
    _, phi = model.forward(tape, x)

    diff = tape.sub(tape.take_rows(phi, idx_i), tape.take_rows(phi, idx_j))
    pos_each = tape.sum_pool(tape.square(tape.relu(diff)), axis=1)
    total = tape.sum_pool(pos_each, axis=None)
    if neg_c:
        ndiff = tape.sub(tape.take_rows(phi, neg_i), tape.take_rows(phi, neg_c))
        neg_losses = tape.sum_pool(tape.square(tape.relu(ndiff)), axis=1)
        hinges = tape.relu(tape.affine(neg_losses, -1.0, config.alpha))
        total = tape.add(total, tape.sum_pool(hinges, axis=None))

    loss = float(total.value)
    if not np.isfinite(loss):
        raise RuntimeError(
            f"non-finite batch loss {loss} at iteration {optimizer.iteration} "
            f"(lr={config.lr}, batch_size={len(batch)})"
        )
    model.zero_grad()
    tape.backward(total)
    optimizer.step()
    return loss / len(batch)


def _load_scene_clips(scene: Scene, clip_sources, modalities) -> list:
    return [clip_sources[cid].load(modalities) for cid in scene.clip_ids]


def make_batch(scenes, clip_sources, model: EncoderModel, config: TrainConfig, rng) -> list:
    """Sample one forward pair from each of ``batch_size`` scenes (with replacement)."""
    usable = [s for s in scenes if s.size >= 2]
    if not usable:
        raise ValueError("no scenes with at least 2 clips")
    chosen = [usable[int(rng.integers(0, len(usable)))] for _ in range(config.batch_size)]
    batch = []
    for b_idx, scene in enumerate(chosen):
        i, j = sample_pair(scene, rng)
        clips = _load_scene_clips(scene, clip_sources, model.modality_set)
        corrupt = None
        if config.use_negatives:
            other = [k for k in range(len(chosen)) if chosen[k].scene_id != scene.scene_id]
            if other:
                o_scene = chosen[other[int(rng.integers(0, len(other)))]]
                o_clip = o_scene.clip_ids[int(rng.integers(0, o_scene.size))]
                corrupt = clip_sources[o_clip].load(model.modality_set)
        batch.append(TrainPair(clip_i=clips[i], clip_j=clips[j], corrupt=corrupt))
    return batch


def train(model: EncoderModel, dataset, config: TrainConfig, split: str = "train",
          on_iteration=None) -> list:
    """Run the full training loop; returns one {iteration, loss} record per step.

    ``on_iteration(iteration, loss, model)`` is invoked after each update and
    may be used for logging, checkpointing, or periodic evaluation.
    """
    if model.t != config.t:
        raise ValueError(f"model encodes t={model.t} segments but config.t={config.t}")
    scenes = dataset.scenes(split)
    if not scenes:
        raise ValueError(f"no scenes in split {split!r}")
    rng = np.random.Generator(np.random.Philox(mix_seed(config.seed, _SEED_TRAIN)))
    optimizer = SGD(model.params(), lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay)
    history = []
    for iteration in range(1, config.iterations + 1):
        batch = make_batch(scenes, dataset.clips, model, config, rng)
        loss = train_step(model, batch, optimizer, config, rng=rng)
        history.append({"iteration": iteration, "loss": loss})
        if on_iteration is not None:
            on_iteration(iteration, loss, model)
    return history


# ---------------------------------------------------------------------------
# Evaluation.

@dataclass
class EvalReport:
    accuracy: float
    n_scenes: int
    per_size: dict   # M -> {"n": int, "correct": int, "accuracy": float}
    chance: float

    def size_histogram(self) -> dict:
        return {m: stats["n"] for m, stats in self.per_size.items()}


def order_scenes(model: EncoderModel, scenes, clip_sources, sampling: str | None = None,
                 rng_seed: int = 0, threads: int = 1) -> list:
    """Encode every clip and infer each scene's order; returns [(scene, result)].

    Each scene's clips are presented to the permutation search in a seeded
    shuffled order (inference sees an unordered set); the result is mapped
    back to ground-truth index space. For any non-tied loss landscape the
    argmin is presentation-invariant, and under exact ties the deterministic
    lexicographic tie-break then lands uniformly instead of favoring the
    stored order. Windows and shuffles are drawn sequentially up front, so
    results are identical for any thread count.
    """
    scenes = list(scenes)
    if not scenes:
        return []
    scene_clips = [_load_scene_clips(s, clip_sources, model.modality_set) for s in scenes]
    all_clips = [c for group in scene_clips for c in group]
    strategy = model.sampling if sampling is None else sampling
    rng = np.random.Generator(np.random.Philox(mix_seed(rng_seed, _SEED_EVAL)))
    starts = model.choose_windows(all_clips, strategy=strategy, rng=rng)
    shuffle_rng = np.random.Generator(np.random.Philox(mix_seed(rng_seed, _SEED_SHUFFLE)))
    shuffles = [shuffle_rng.permutation(s.size) for s in scenes]

    def encode_span(lo, hi):
        x = model.stack_clips(all_clips[lo:hi], starts[lo:hi])
        _, phi = model.forward(Tape(record=False), x)
        return phi.value

    n = len(all_clips)
    if threads <= 1 or n < 2 * threads:
        phis = encode_span(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1, dtype=int)
        spans = [(int(bounds[k]), int(bounds[k + 1])) for k in range(threads)
                 if bounds[k] < bounds[k + 1]]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda span: encode_span(*span), spans))
        phis = np.concatenate(parts, axis=0)

    results = []
    offset = 0
    for scene, group, presented in zip(scenes, scene_clips, shuffles):
        block = phis[offset:offset + len(group)]
        offset += len(group)
        raw = infer_order([block[p] for p in presented])
        perm = tuple(int(presented[p]) for p in raw.permutation)
        results.append((scene, OrderingResult(
            permutation=perm,
            total_loss=raw.total_loss,
            correct=perm == tuple(range(scene.size)),
        )))
    return results


def evaluate(model: EncoderModel, dataset, split: str = "val", sampling: str | None = None,
             rng_seed: int = 0, threads: int = 1) -> EvalReport:
    """Ordering accuracy over a split, with a per-scene-size breakdown."""
    scenes = dataset.scenes(split)
    if not scenes:
        raise ValueError(f"no scenes in split {split!r}")
    results = order_scenes(model, scenes, dataset.clips, sampling=sampling,
                           rng_seed=rng_seed, threads=threads)
    per_size = {}
    for scene, result in results:
        stats = per_size.setdefault(scene.size, {"n": 0, "correct": 0})
        stats["n"] += 1
        stats["correct"] += int(result.correct)
    for stats in per_size.values():
        stats["accuracy"] = stats["correct"] / stats["n"]
    n_scenes = len(results)
    n_correct = sum(stats["correct"] for stats in per_size.values())
    hist = {m: stats["n"] for m, stats in per_size.items()}
    return EvalReport(
        accuracy=n_correct / n_scenes,
        n_scenes=n_scenes,
        per_size=dict(sorted(per_size.items())),
        chance=chance_accuracy(hist),
    )
