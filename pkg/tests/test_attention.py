import numpy as np
import pytest

from wsdl import attention as att
from wsdl import backbone as bb
from wsdl.attention import Box

from oracles import flood_fill_bbox, otsu_exhaustive


def test_box_invariants():
    b = Box(1.0, 2.0, 4.0, 7.0)
    assert b.width == 3.0 and b.height == 5.0 and b.area == 15.0
    assert b.contains(1.0, 2.0)
    assert not b.contains(4.0, 2.0)  # half-open edge
    with pytest.raises(ValueError):
        Box(2.0, 0.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        Box(0.0, 0.0, float("nan"), 1.0)


# ---------------------------------------------------------------------------
# attention maps


def test_attention_map_constant_channels_mean():
    features = np.full((4, 3, 3), 8.0)
    amap = att.attention_map(features, "late", stride=8)
    assert np.allclose(amap.values, 8.0)


def test_attention_map_cam_one_hot_selects_channel():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(5, 4, 4))
    weights = np.zeros((5, 3))
    weights[2, 1] = 1.0
    amap = att.attention_map(features, "cam", stride=8, class_weights=weights, predicted_class=1)
    assert np.array_equal(amap.values, features[2])


def test_attention_map_cancellation():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 6))
    amap = att.attention_map(np.stack([a, -a]), "late", stride=8)
    assert np.abs(amap.values).max() < 1e-12


def test_attention_map_mean_property():
    rng = np.random.default_rng(2)
    for _ in range(20):
        features = rng.normal(size=(rng.integers(1, 8), 5, 7))
        amap = att.attention_map(features, "mid", stride=4)
        assert np.abs(amap.values - features.mean(axis=0)).max() < 1e-9


def test_attention_map_cam_requires_weights():
    with pytest.raises(ValueError):
        att.attention_map(np.zeros((2, 3, 3)), "cam", stride=8)


# ---------------------------------------------------------------------------
# OTSU


def test_otsu_two_cluster_map():
    values = np.array([[0.0, 0, 0], [1, 1, 1]])
    thresh = att.otsu_threshold(values)
    assert thresh is not None and 0.0 < thresh < 1.0
    mask = att.binarize(att.AttentionMap(values, "late", 8)).mask
    assert np.array_equal(mask, values >= 0.5)


def test_otsu_constant_map_degenerate():
    assert att.otsu_threshold(np.full((4, 4), 2.5)) is None
    bm = att.binarize(att.AttentionMap(np.full((4, 4), 2.5), "late", 8))
    assert bm.threshold is None
    assert bm.mask.all()


def test_otsu_two_valued_maps():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = sorted(rng.normal(size=2))
        if a == b:
            continue
        n, m = rng.integers(1, 20), rng.integers(1, 20)
        values = np.array([a] * n + [b] * m)
        thresh = att.otsu_threshold(values)
        assert 0.0 < thresh < 1.0
        mask = values >= a + thresh * (b - a)
        # normalized threshold separates the two values
        assert mask.sum() == m


def test_otsu_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for trial in range(200):
        shape = (rng.integers(1, 12), rng.integers(1, 12))
        if trial % 3 == 0:
            values = rng.choice([0.0, 0.3, 0.7, 1.0], size=shape)
        else:
            values = rng.normal(size=shape)
        expected_k = otsu_exhaustive(values)
        got = att.otsu_threshold(values)
        if expected_k is None:
            assert got is None
        else:
            assert got == expected_k / att.OTSU_BINS


# ---------------------------------------------------------------------------
# connected components


def test_single_cell_component():
    mask = np.zeros((5, 6), dtype=bool)
    mask[2, 3] = True
    assert att.largest_component_bbox(mask) == Box(3, 2, 4, 3)


def test_two_blob_sizes():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:2, 1:6] = True  # 5 cells
    mask[5:6, 2:5] = True  # 3 cells
    box = att.largest_component_bbox(mask)
    assert (box.x_min, box.y_min, box.x_max, box.y_max) == flood_fill_bbox(mask)
    assert box == Box(1, 1, 6, 2)


def test_all_true_and_all_false():
    assert att.largest_component_bbox(np.ones((3, 4), dtype=bool)) == Box(0, 0, 4, 3)
    assert att.largest_component_bbox(np.zeros((3, 4), dtype=bool)) is None


def test_component_matches_flood_fill_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        shape = (rng.integers(1, 17), rng.integers(1, 17))
        mask = rng.random(size=shape) < rng.uniform(0.2, 0.8)
        expected = flood_fill_bbox(mask)
        got = att.largest_component_bbox(mask)
        if expected is None:
            assert got is None
        else:
            assert (got.x_min, got.y_min, got.x_max, got.y_max) == expected


# ---------------------------------------------------------------------------
# coordinate mapping


def test_to_image_coords():
    box = Box(1, 1, 3, 3)
    assert att.to_image_coords(box, 1, (64, 64)) == box
    assert att.to_image_coords(box, 8, (64, 64)) == Box(8, 8, 24, 24)
    clipped = att.to_image_coords(Box(1, 1, 9, 9), 8, (64, 64))
    assert clipped == Box(8, 8, 64, 64)
    with pytest.raises(ValueError):
        att.to_image_coords(box, 0, (64, 64))


# ---------------------------------------------------------------------------
# pseudo boxes


@pytest.fixture(scope="module")
def small_cfg():
    return bb.BackboneConfig(num_classes=3)


def test_pseudo_boxes_cardinality_and_bounds(small_cfg):
    params = bb.init_maen_params(small_cfg, np.random.default_rng(6))
    image = np.random.default_rng(7).uniform(0, 1, size=(3, 64, 64)).astype(np.float32)
    boxes = att.pseudo_boxes(image, params, small_cfg)
    assert [level for level, _ in boxes] == list(small_cfg.tap_levels)
    for _, box in boxes:
        assert 0.0 <= box.x_min < box.x_max <= 64.0
        assert 0.0 <= box.y_min < box.y_max <= 64.0


def test_pseudo_boxes_degenerate_network_gives_whole_image(small_cfg):
    params = bb.init_maen_params(small_cfg, np.random.default_rng(8))
    for p in params.values():
        p.data[...] = 0.0
    image = np.random.default_rng(9).uniform(0, 1, size=(3, 64, 64)).astype(np.float32)
    boxes = att.pseudo_boxes(image, params, small_cfg)
    for _, box in boxes:
        assert box == att.whole_image_box(small_cfg.input_size)


def test_write_pgm(tmp_path):
    values = np.arange(12, dtype=np.float64).reshape(3, 4)
    path = tmp_path / "map.pgm"
    att.write_pgm(path, values)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert len(raw) == len(b"P5\n4 3\n255\n") + 12
    assert raw[-1] == 255
