"""Scikit-learn style fronts: sketch transformers and the ordering estimator.

``CompactBilinearPooling`` and ``TemporalCompactBilinearPooling`` are
stateless-after-fit transformers (fit draws the frozen hash/sign tables from
the input shape and seed) that compose with sklearn pipelines.
``ClipOrderingModel`` wraps the encoder + trainer behind fit/predict/score
over scene datasets.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .dataio import SceneDataset, load_manifest
from .encoder import EncoderModel
from .sketching import (
    DEFAULT_OUTPUT_DIM,
    MODE_CBP,
    MODE_TCBP,
    circular_convolve_kernel,
    count_sketch_kernel,
    init_sketch_params,
    temporal_sketch_kernel,
)
from .training import TrainConfig, order_scenes, train
from .validation import as_float_array


class CompactBilinearPooling(BaseEstimator, TransformerMixin):
    """Sketch second-order feature interactions: (n, c) or (n, c, t) -> (n, output_dim).

    Each location (column) is tensor-sketched and locations are sum-pooled,
    approximating bilinear pooling without forming the c^2 outer product.
    """

    def __init__(self, output_dim: int = DEFAULT_OUTPUT_DIM, seed: int = 0):
        self.output_dim = output_dim
        self.seed = seed

    def fit(self, X, y=None):
        X = as_float_array(X, "X")
        if X.ndim not in (2, 3):
            raise ValueError(f"X must be (n, c) or (n, c, t), got shape {X.shape}")
        self.n_channels_ = X.shape[1]
        self.params_ = init_sketch_params(self.n_channels_, 1, self.output_dim,
                                          self.seed, MODE_CBP)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("CompactBilinearPooling must be fitted before transform")
        X = as_float_array(X, "X")
        squeeze = X.ndim == 2
        if squeeze:
            X = X[:, :, None]
        if X.ndim != 3 or X.shape[1] != self.n_channels_:
            raise ValueError(f"X must be (n, {self.n_channels_}) or "
                             f"(n, {self.n_channels_}, t), got shape {X.shape}")
        n, c, t = X.shape
        p = self.params_
        cols = np.ascontiguousarray(X.transpose(0, 2, 1)).reshape(n * t, c).astype(np.float64)
        u1 = count_sketch_kernel(cols, p.h1, p.s1.astype(np.float64), p.d)
        u2 = count_sketch_kernel(cols, p.h2, p.s2.astype(np.float64), p.d)
        out = circular_convolve_kernel(u1, u2).reshape(n, t, p.d).sum(axis=1)
        return out.astype(X.dtype) if X.dtype == np.float32 else out


class TemporalCompactBilinearPooling(BaseEstimator, TransformerMixin):
    """Temporal sketch of (n, c, t) maps -> (n, output_dim).

    Hashes depend on the channel only while signs vary per (channel, segment),
    so all segments of a channel scatter to one slot before a single
    convolution. At t=1 this coincides with CompactBilinearPooling for the
    same seed.
    """

    def __init__(self, output_dim: int = DEFAULT_OUTPUT_DIM, seed: int = 0):
        self.output_dim = output_dim
        self.seed = seed

    def fit(self, X, y=None):
        X = as_float_array(X, "X")
        if X.ndim != 3:
            raise ValueError(f"X must be (n, c, t), got shape {X.shape}")
        self.n_channels_ = X.shape[1]
        self.n_segments_ = X.shape[2]
        self.params_ = init_sketch_params(self.n_channels_, self.n_segments_,
                                          self.output_dim, self.seed, MODE_TCBP)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("TemporalCompactBilinearPooling must be fitted "
                                 "before transform")
        X = as_float_array(X, "X")
        if X.ndim != 3 or X.shape[1:] != (self.n_channels_, self.n_segments_):
            raise ValueError(f"X must be (n, {self.n_channels_}, {self.n_segments_}), "
                             f"got shape {X.shape}")
        p = self.params_
        x64 = X.astype(np.float64)
        u1 = temporal_sketch_kernel(x64, p.h1, p.s1.astype(np.float64), p.d)
        u2 = temporal_sketch_kernel(x64, p.h2, p.s2.astype(np.float64), p.d)
        out = circular_convolve_kernel(u1, u2)
        return out.astype(X.dtype) if X.dtype == np.float32 else out


def _as_dataset(X) -> SceneDataset:
    if isinstance(X, SceneDataset):
        return X
    return load_manifest(X)


class ClipOrderingModel(BaseEstimator):
    """End-to-end ordering estimator: fit on a scene dataset, predict clip orders.

    ``X`` for fit/predict/score is a :class:`~tcbp.dataio.SceneDataset` or a
    manifest path. ``modalities`` is a tag string like ``"PI"`` or ``"API"``.
    """

    def __init__(self, modalities: str = "PI", method: str = "tcbp", t: int = 3,
                 d: int = DEFAULT_OUTPUT_DIM, reduce_dim: int = 2048,
                 hidden_dim: int | None = None, phi_dim: int | None = None,
                 sampling: str = "c_last", lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 5e-4, batch_size: int = 32,
                 iterations: int = 5000, alpha: float = 0.2,
                 use_negatives: bool = False, seed: int = 0):
        self.modalities = modalities
        self.method = method
        self.t = t
        self.d = d
        self.reduce_dim = reduce_dim
        self.hidden_dim = hidden_dim
        self.phi_dim = phi_dim
        self.sampling = sampling
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.iterations = iterations
        self.alpha = alpha
        self.use_negatives = use_negatives
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           iterations=self.iterations, alpha=self.alpha,
                           use_negatives=self.use_negatives, seed=self.seed,
                           sampling=self.sampling, t=self.t)

    def fit(self, X, y=None, split: str = "train"):
        dataset = _as_dataset(X)
        missing = [tag for tag in self.modalities if tag not in dataset.channels]
        if missing:
            raise ValueError(f"dataset lacks modality {missing[0]!r}")
        channels = {tag: dataset.channels[tag] for tag in self.modalities}
        self.encoder_ = EncoderModel(channels, method=self.method, t=self.t, d=self.d,
                                     reduce_dim=self.reduce_dim, hidden_dim=self.hidden_dim,
                                     phi_dim=self.phi_dim, sampling=self.sampling,
                                     seed=self.seed)
        self.history_ = train(self.encoder_, dataset, self._train_config(), split=split)
        return self

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("ClipOrderingModel must be fitted before use")

    def predict(self, X, split: str | None = None) -> list:
        """Predicted clip-id orderings, one tuple per scene in the split."""
        self._check_fitted()
        dataset = _as_dataset(X)
        scenes = dataset.scenes(split)
        results = order_scenes(self.encoder_, scenes, dataset.clips, rng_seed=self.seed)
        return [tuple(scene.clip_ids[k] for k in result.permutation)
                for scene, result in results]

    def score(self, X, y=None, split: str | None = None) -> float:
        """Exact-match ordering accuracy over the split (all scenes if None)."""
        self._check_fitted()
        dataset = _as_dataset(X)
        scenes = dataset.scenes(split)
        results = order_scenes(self.encoder_, scenes, dataset.clips, rng_seed=self.seed)
        return sum(1 for _, r in results if r.correct) / len(results)
