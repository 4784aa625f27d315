import numpy as np
import pytest
import torch

from ratsir.handkin import HandModel, build_template
from ratsir.net import NetConfig


@pytest.fixture(scope="session")
def template778():
    return build_template(0, 778)


@pytest.fixture(scope="session")
def template100():
    return build_template(1, 100)


@pytest.fixture(scope="session")
def hand_model64(template778):
    return HandModel(template778, dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_net_config():
    # 2x2 token grid, C=8, leanest stack that still exercises every stage.
    return NetConfig(crop_h=8, crop_w=8, in_channels=7, patch=4, channels=8,
                     enc_depth=1, enc_heads=2, relation_hidden=8, fusion_depth=1,
                     fusion_heads=2, feat_dim=8, temporal_depth=1, temporal_heads=2,
                     head_hidden=8, mlp_ratio=1.0, max_seq=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
