import numpy as np
import pytest

from attrsearch import numerics as N
from attrsearch.backbone import (
    BackboneConfig,
    LayerSpec,
    extract_features,
    init_backbone,
    stack_pixels,
)
from attrsearch.numerics import DimensionError, Tensor, finite_difference_check
from attrsearch.synthgen import band_rows, default_schema, render_image


def test_same_seed_gives_identical_parameters():
    p1 = init_backbone(3)
    p2 = init_backbone(3)
    for name in p1.tensors:
        np.testing.assert_array_equal(p1.tensors[name].array,
                                      p2.tensors[name].array)
    p3 = init_backbone(4)
    assert any((p1.tensors[n].array != p3.tensors[n].array).any()
               for n in p1.tensors)


def test_zero_image_gives_zero_maps():
    params = init_backbone(0)
    zero = Tensor(np.zeros((64, 64, 3), dtype=np.float32))
    feats = extract_features(zero, params)
    assert not feats.mid.array.any()
    assert not feats.last.array.any()


def test_default_shape_contract():
    params = init_backbone(1)
    img = Tensor(np.random.default_rng(0).random((64, 64, 3)).astype(np.float32))
    feats = extract_features(img, params)
    assert feats.mid.shape == (8, 8, 32)
    assert feats.last.shape == (8, 8, 64)
    batch = extract_features(Tensor(np.stack([img.array] * 3)), params)
    assert batch.mid.shape == (3, 8, 8, 32)
    assert batch.last.shape == (3, 8, 8, 64)


def test_forward_is_pure_and_deterministic():
    params = init_backbone(2)
    img = Tensor(np.random.default_rng(1).random((64, 64, 3)).astype(np.float32))
    f1 = extract_features(img, params)
    f2 = extract_features(img, params)
    np.testing.assert_array_equal(f1.mid.array, f2.mid.array)
    np.testing.assert_array_equal(f1.last.array, f2.last.array)


def test_parameter_count_matches_closed_form():
    cfg = BackboneConfig()
    params = init_backbone(0, cfg)
    total = sum(t.size for t in params.tensors.values())
    expected = 0
    cin = cfg.input_channels
    for spec in cfg.layers:
        expected += cfg.kernel * cfg.kernel * cin * spec.channels + spec.channels
        cin = spec.channels
    assert total == expected == cfg.parameter_count()


def test_wrong_pixel_shape_rejected():
    params = init_backbone(0)
    with pytest.raises(DimensionError):
        extract_features(Tensor(np.zeros((32, 32, 3), dtype=np.float32)),
                         params)


def test_channel_means_are_removed():
    params = init_backbone(5).with_channel_means(np.array([0.5, 0.5, 0.5]))
    img = Tensor(np.full((64, 64, 3), 0.5, dtype=np.float32))
    feats = extract_features(img, params)
    assert not feats.last.array.any()   # mean-removed input is zero


def test_first_layer_gradient_matches_finite_differences():
    # small stand-in config keeps the check fast
    cfg = BackboneConfig(input_size=8, input_channels=2, layers=(
        LayerSpec(3, 2), LayerSpec(4, 1)), mid_layer=0, last_layer=1)
    params = init_backbone(7, cfg)
    rng = np.random.default_rng(2)
    img = rng.random((8, 8, 2))
    fd_params = {name: t.array.astype(np.float64)
                 for name, t in params.tensors.items()}

    def loss_fn(p, tape):
        x = Tensor(img, dtype=np.float64)
        for i in range(2):
            x = N.conv2d(x, p[f"backbone/conv{i}/kernel"],
                         stride=cfg.layers[i].stride, padding="same",
                         tape=tape)
            x = N.bias_add(x, p[f"backbone/conv{i}/bias"], tape=tape)
            x = N.relu(x, tape=tape)
        return N.sum_all(N.square(x, tape=tape), tape=tape)

    err = finite_difference_check(loss_fn, fd_params,
                                  "backbone/conv0/kernel", epsilon=1e-4)
    assert err < 1e-4


def test_translation_sensitivity_between_bands():
    """Moving a glyph between top and bottom bands should move mid-map
    energy between the corresponding rows more than in the middle rows."""
    schema = default_schema()
    params = init_backbone(11)
    names = schema.attribute_names()
    top_idx = names.index("top-shape")
    bot_idx = names.index("bottom-shape")
    band_score = 0.0
    middle_score = 0.0
    for trial in range(100):
        rng1 = np.random.Generator(np.random.PCG64(1000 + trial))
        rng2 = np.random.Generator(np.random.PCG64(1000 + trial))
        labels_a = [0, 0, 1, 0]
        labels_b = list(labels_a)
        labels_b[top_idx], labels_b[bot_idx] = labels_b[bot_idx], labels_b[top_idx]
        im_a = render_image(schema, labels_a, rng1, noise_sigma=0.0)
        im_b = render_image(schema, labels_b, rng2, noise_sigma=0.0)
        diff = np.abs(extract_features(im_a, params).mid.array
                      - extract_features(im_b, params).mid.array)
        h = diff.shape[0]
        third = h // 3 + 1
        band_score += diff[:third].mean() + diff[-third:].mean()
        middle_score += 2 * diff[third:-third].mean()
    assert band_score > middle_score


def test_stack_pixels_shapes():
    schema = default_schema()
    rng = np.random.Generator(np.random.PCG64(0))
    ims = [render_image(schema, [0, 0, 0, 0], rng) for _ in range(3)]

    class Holder:
        def __init__(self, pixels):
            self.pixels = pixels

    batch = stack_pixels([Holder(im) for im in ims])
    assert batch.shape == (3, 64, 64, 3)
