"""Backbone, weakly supervised localisation, bottleneck and box extraction."""
import numpy as np
import pytest

from rendezvous.autodiff import Tensor
from rendezvous.encoder import (WSL, Backbone, Bottleneck, ModelConfig, extract_boxes, label_components)
from rendezvous.errors import DimensionError


@pytest.mark.parametrize("hw,feat", [((32, 56), (8, 14)), ((8, 8), (2, 2)), ((30, 50), (8, 13))])
def test_feature_grid_follows_two_stride_two_blocks(hw, feat):
    cfg = ModelConfig(image_hw=hw)
    assert cfg.feature_hw == feat
    bundle = Backbone(cfg, np.random.default_rng(0))(Tensor(np.zeros((2, *hw, 3))))
    assert bundle.x_i.shape == (2, *feat, cfg.depth)
    assert bundle.x_0.shape[-1] == cfg.low_channels
    assert bundle.x_i is bundle.x_v is bundle.x_t


def test_backbone_rejects_wrong_image_size():
    cfg = ModelConfig.tiny()
    with pytest.raises(DimensionError):
        Backbone(cfg, np.random.default_rng(0))(Tensor(np.zeros((9, 8, 3))))


def test_wsl_logits_are_spatial_max_of_class_maps():
    cfg = ModelConfig.tiny()
    rng = np.random.default_rng(1)
    h_i, y_i = WSL(cfg, rng)(Tensor(rng.normal(size=(3, 2, 2, cfg.depth))))
    assert h_i.shape == (3, 2, 2, cfg.n_instruments)
    np.testing.assert_array_equal(y_i.data, h_i.data.max(axis=(1, 2)))


def test_bottleneck_maps_low_features_to_triplet_grid():
    cfg = ModelConfig(image_hw=(16, 24), n_triplets=9)
    rng = np.random.default_rng(2)
    out = Bottleneck(cfg, rng)(Tensor(rng.normal(size=(*cfg.low_hw, cfg.low_channels))))
    assert out.shape == (*cfg.feature_hw, 9)


def test_config_roundtrip_and_validation():
    cfg = ModelConfig.tiny(heads="single-self")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(Exception):
        ModelConfig(heads="bogus")


def test_label_components_is_four_connected():
    mask = np.array([[1, 0, 1],
                     [1, 0, 0],
                     [0, 1, 1]])
    labels, n = label_components(mask)
    assert n == 3
    np.testing.assert_array_equal(labels, [[1, 0, 2], [1, 0, 0], [0, 3, 3]])


def test_boxes_scale_to_image_pixels():
    h = np.full((4, 4, 2), -10.0)
    h[1:3, 0:2, 0] = 3.0
    h[3, 3, 1] = 1.0
    boxes = extract_boxes(h, image_hw=(16, 16))
    assert [(b.class_id, b.box) for b in boxes] == [(0, (0.0, 4.0, 8.0, 12.0)), (1, (12.0, 12.0, 16.0, 16.0))]
    assert boxes[0].score == pytest.approx(1 / (1 + np.exp(-3.0)))


def test_box_contracts():
    with pytest.raises(ValueError):
        extract_boxes(np.zeros((2, 2, 1)), threshold=1.0)
    with pytest.raises(DimensionError):
        extract_boxes(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        extract_boxes(np.full((2, 2, 1), np.nan))
