import numpy as np
import pytest
import torch

from videoqa.corpus import FeatureStore, VideoFeatures, write_feature_manifest, write_video_features
from videoqa.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    """Small config for fast forward passes in unit tests."""
    return ModelConfig(
        l=8, t=4, m=4, d=16, d_h=32, n_layers=1, n_heads=2,
        dropout=0.0, d_q=16, d_a=16, d_v=6, token_vocab_size=32,
    )


def make_store(tmp_path, features_by_video: dict[str, np.ndarray]) -> FeatureStore:
    """Write feature files plus a manifest and open a store over them."""
    manifest = {}
    for video_id, feats in features_by_video.items():
        path = tmp_path / f"{video_id}.vqf"
        write_video_features(VideoFeatures(video_id, feats.astype(np.float32)), path)
        manifest[video_id] = path.name
    manifest_path = tmp_path / "manifest.jsonl"
    write_feature_manifest(manifest, manifest_path)
    return FeatureStore(manifest_path)


@pytest.fixture
def seeded_torch():
    torch.manual_seed(0)
    return torch
