import numpy as np
import pytest

from tcbp.dataio import SynthConfig, generate_synthetic, load_manifest
from tcbp.encoder import ClipFeatures, EncoderModel, ModalityFeature


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_clip(clip_id, channels, t_full, rng, replicate_s=True):
    feats = {}
    for tag, c in channels.items():
        if tag == "S" and replicate_s:
            col = rng.normal(size=(c, 1))
            data = np.repeat(col, t_full, axis=1)
        else:
            data = rng.normal(size=(c, t_full))
        feats[tag] = ModalityFeature(modality=tag, data=data)
    return ClipFeatures(clip_id=clip_id, modalities=feats)


@pytest.fixture
def clip_factory(rng):
    def factory(clip_id="clip", channels=None, t_full=4):
        return make_clip(clip_id, channels or {"A": 3, "P": 5}, t_full, rng)
    return factory


def tiny_model(channels=None, **kwargs):
    defaults = dict(method="tcbp", t=2, d=8, reduce_dim=4, hidden_dim=6, phi_dim=5, seed=3)
    defaults.update(kwargs)
    return EncoderModel(channels or {"A": 3, "P": 5}, **defaults)


@pytest.fixture
def small_dataset(tmp_path):
    cfg = SynthConfig(n_train=30, n_val=15, size_weights={2: 0.5, 3: 0.5},
                      channels={"A": 4, "P": 6}, signal_strength=1.0,
                      noise_std=0.1, seed=11)
    manifest = generate_synthetic(cfg, tmp_path / "data")
    return load_manifest(manifest)
